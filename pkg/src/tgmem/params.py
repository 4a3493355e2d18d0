"""Named learnable tensors, the Adam step, and the checkpoint container."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, ContractError

CHECKPOINT_MAGIC = b"TGMEMCK1"


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class ParameterStore:
    """Ordered name -> Tensor map for every learnable parameter.

    Random initialization is keyed by (init_seed, parameter name), so a
    parameter's starting value never depends on which other parameters
    exist or the order they were registered in.
    """

    def __init__(self, init_seed: int = 0):
        self.init_seed = init_seed
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_uniform(self, name: str, bound: float, *shape) -> Tensor:
        rng = np.random.default_rng([self.init_seed, _name_key(name)])
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    # Flat-vector views used by the whole-model gradient check.

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def unflatten(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_values():
            raise ContractError("parameter vector has wrong length")
        off = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[off:off + n].reshape(t.data.shape).copy()
            off += n

    def flat_grad(self) -> np.ndarray:
        parts = []
        for t in self._params.values():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            parts.append(g.reshape(-1))
        return np.concatenate(parts)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, t in self._params.items():
            if k not in state:
                raise ConfigError(f"checkpoint missing parameter: {k}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"checkpoint shape mismatch for {k}: {arr.shape} vs {t.data.shape}"
                )
            t.data = arr.copy()


class Adam:
    """Plain Adam over a ParameterStore."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- checkpoint file format --------------------------------------------------
#
#   magic "TGMEMCK1" | uint32 tensor count
#   per tensor: uint16 name length | name utf-8 | uint8 ndim |
#               uint64 extents[ndim] | float64 row-major payload
# All integers little-endian.


def save_checkpoint(path, state: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)  # tobytes(order="C") handles layout
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file (bad magic): {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            payload = fh.read(8 * n)
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return state
