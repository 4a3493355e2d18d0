"""Continuous positional information: time encoding and Gaussian ranges."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError
from .params import ParameterStore


class TimeEncoding:
    """Learnable cosine feature map of elapsed time.

    encode(dt)[l] = cos(omega_l * dt + phi_l).  Frequencies start on a
    geometric ladder from 1 down to 1e-6 so short and long gaps are both
    resolvable before any learning happens; phases start at zero.
    """

    def __init__(self, store: ParameterStore, dim: int, prefix: str = "time_enc"):
        self.dim = dim
        if dim == 1:
            omega0 = np.ones(1)
        else:
            omega0 = np.power(1e-6, np.arange(dim) / (dim - 1))
        self.omega = store.add(f"{prefix}.omega", omega0)
        self.phi = store.add(f"{prefix}.phi", np.zeros(dim))

    def encode(self, dt) -> Tensor:
        """dt: plain array of non-negative gaps, any shape -> (*dt.shape, dim)."""
        dt = np.asarray(dt, dtype=np.float64)
        arg = ag.add(ag.mul(Tensor(dt[..., None]), self.omega), self.phi)
        return ag.cos(arg)


class GaussianRangeEncoding:
    """Range-based positional encoding over n sequence slots.

    Each slot gets a softmax-normalized mixture weight over k Gaussian
    ranges; the mixture of learnable range embeddings is added to the
    input.  Embeddings start at zero so the encoding begins as a no-op.
    """

    def __init__(self, store: ParameterStore, num_positions: int, num_ranges: int,
                 model_dim: int, prefix: str = "gre"):
        if num_ranges < 1:
            raise DimensionError("gaussian range encoding needs k >= 1")
        self.n = num_positions
        self.k = num_ranges
        self.d = model_dim
        mu0 = np.linspace(0.0, num_positions - 1.0, num_ranges)
        sigma0 = max(num_positions / num_ranges, 1e-3)
        # inverse softplus so softplus(sigma_raw) == sigma0 at init
        sigma_raw0 = np.full(num_ranges, sigma0 + np.log1p(-np.exp(-sigma0)))
        self.mu = store.add(f"{prefix}.mu", mu0)
        self.sigma_raw = store.add(f"{prefix}.sigma_raw", sigma_raw0)
        self.embed = store.add(f"{prefix}.embed", np.zeros((num_ranges, model_dim)))

    def range_weights(self) -> Tensor:
        """(n, k) row-stochastic slot-to-range weights."""
        pos = Tensor(np.arange(self.n, dtype=np.float64)[:, None])
        sigma = ag.softplus(self.sigma_raw)
        diff = ag.sub(pos, self.mu)
        raw = ag.sub(
            ag.neg(ag.div(ag.mul(diff, diff), ag.mul(sigma, sigma) * 2.0)),
            ag.log(sigma),
        )
        return ag.softmax(raw, axis=-1)

    def range_logits(self) -> Tensor:
        """(n, k) pre-softmax weights; exposed for direct inspection."""
        pos = Tensor(np.arange(self.n, dtype=np.float64)[:, None])
        sigma = ag.softplus(self.sigma_raw)
        diff = ag.sub(pos, self.mu)
        return ag.sub(
            ag.neg(ag.div(ag.mul(diff, diff), ag.mul(sigma, sigma) * 2.0)),
            ag.log(sigma),
        )

    def slot_embeddings(self) -> Tensor:
        """(n, d) per-slot additive embedding B @ E."""
        return ag.matmul(self.range_weights(), self.embed)

    def encode(self, x: Tensor) -> Tensor:
        """Add the per-slot embedding; x is (..., n, d)."""
        if x.shape[-2] != self.n or x.shape[-1] != self.d:
            raise DimensionError(
                f"gaussian_encode expects (..., {self.n}, {self.d}), got {x.shape}"
            )
        return ag.add(x, self.slot_embeddings())


def sinusoidal_encoding(num_positions: int, dim: int) -> np.ndarray:
    """Classic fixed single-point positional encoding (ablation baseline)."""
    pe = np.zeros((num_positions, dim))
    pos = np.arange(num_positions, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-np.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe
