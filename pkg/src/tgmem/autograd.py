"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learnable piece of the model runs on this engine.  The op set is
deliberately closed: matmul, elementwise arithmetic, concat/slice,
sigmoid/tanh/relu/exp/log/cos/softplus, (masked) softmax, layer norm,
reductions, gather/scatter on rows, plus two model-specific primitives
(gate_blend for the binary update gate, bernoulli_st for the
straight-through sampler).  Gradients are accumulated additively and the
backward walk is a deterministic iterative topological order, so two
backward passes over the same graph produce bit-identical gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "scatter_rows",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "log1p",
    "cos",
    "softplus",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "tsum",
    "tmean",
    "masked_mean",
    "clamp",
    "gate_blend",
    "bernoulli_st",
    "grad_check",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


_grad_enabled = True


class no_grad:
    """Context manager suppressing tape recording (eval-mode replays)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """A float64 array plus an optional gradient slot and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this value; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every requires_grad leaf reachable from here."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse post-order over the tape, iterative to survive deep graphs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    visited.add(id(root))
    while stack:
        node, child_idx = stack[-1]
        if child_idx < len(node._prev):
            stack[-1] = (node, child_idx + 1)
            child = node._prev[child_idx]
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, 0))
        else:
            stack.pop()
            order.append(node)
    order.reverse()
    return order


def _make(data: np.ndarray, prev: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = prev
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul expects operands with ndim >= 2, got {a.data.shape} @ {b.data.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        ) from exc

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# -- shape ops -----------------------------------------------------------


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def _getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by an integer index array; scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(data, (a,), backward)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` with rows[k] written at base[idx[k]]; idx must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("scatter_rows requires unique row indices")
    data = base.data.copy()
    data[idx] = rows.data

    def backward(g):
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
            base._accumulate(gb)
        if rows.requires_grad:
            rows._accumulate(g[idx])

    return _make(data, (base, rows), backward)


# -- pointwise nonlinearities ---------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def log1p(a: Tensor) -> Tensor:
    data = np.log1p(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + a.data))

    return _make(data, (a,), backward)


def cos(a: Tensor) -> Tensor:
    data = np.cos(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g * np.sin(a.data))

    return _make(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s)

    return _make(data, (a,), backward)


# -- softmax / normalization ----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def masked_softmax(a: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to mask==True positions.

    Masked positions get exactly zero weight; rows with no admissible
    position come out all-zero (used for empty neighborhoods).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    neg = np.where(mask, a.data, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(neg - row_max)
    e = np.where(mask, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    data = e / safe

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        n = x.shape[-1]
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            gx = g * gamma.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (term1 - term2 - term3))

    return _make(data, (a, gamma, beta), backward)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(ge, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def masked_mean(a: Tensor, mask, axis: int) -> Tensor:
    """Mean over `axis` counting only mask==True entries (mask must have >=1)."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("masked_mean over an empty selection")
    weighted = mul(a, Tensor(mask))
    total = tsum(weighted, axis=axis, keepdims=True)
    out = div(total, Tensor(counts))
    return reshape(out, np.squeeze(out.data, axis=axis).shape)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(g * inside)

    return _make(data, (a,), backward)


# -- model-specific primitives ---------------------------------------------


def gate_blend(gate: Tensor, update: Tensor, keep: Tensor) -> Tensor:
    """Per-row blend gate*update + (1-gate)*keep.

    When the gate is exactly binary the kept rows are copied bit-exactly
    (no arithmetic touches them).  Gradients follow the arithmetic form,
    including d/d(gate) = sum(update - keep) per row.
    """
    gv = gate.data
    if gv.ndim != update.data.ndim:
        gv = gv.reshape(gv.shape + (1,) * (update.data.ndim - gv.ndim))
    binary = np.all((gv == 0.0) | (gv == 1.0))
    if binary:
        data = np.where(gv.astype(bool), update.data, keep.data)
    else:
        data = gv * update.data + (1.0 - gv) * keep.data

    def backward(g):
        if update.requires_grad:
            update._accumulate(_unbroadcast(g * gv, update.data.shape))
        if keep.requires_grad:
            keep._accumulate(_unbroadcast(g * (1.0 - gv), keep.data.shape))
        if gate.requires_grad:
            gg = _unbroadcast(g * (update.data - keep.data), gv.shape)
            gate._accumulate(gg.reshape(gate.data.shape))

    return _make(data, (gate, update, keep), backward)


def bernoulli_st(p: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample bits ~ Bernoulli(p) with a straight-through (identity) gradient."""
    pv = p.data
    if np.any(pv <= 0.0) or np.any(pv >= 1.0):
        raise ContractError("bernoulli_st requires probabilities strictly inside (0, 1)")
    data = (rng.random(pv.shape) < pv).astype(np.float64)

    def backward(g):
        if p.requires_grad:
            p._accumulate(g)

    return _make(data, (p,), backward)


# -- verification -----------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map the tensor to a scalar Tensor.  The relative error per
    coordinate is |analytic - fd| / max(1, |fd|).
    """
    x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    fd = fd.reshape(x.data.shape)
    if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(analytic))):
        raise NumericError("grad_check hit non-finite values")
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0
