"""Long-term memory via chunked attention over per-window snapshots.

Snapshots of short-term memory from the last n windows are re-sorted by
node identity into fixed-length buckets (one slot per window), padded
with zero rows, and chunked so each chunk holds exactly one node's
bucket.  Attention then runs densely inside chunks under a causal
window-order mask; pooled outputs become the nodes' long-term memory and
their short-term memory is reset.

The dense variant (`flat_layout`) keeps the unsorted snapshot sequence
and attends over all of it with only the causal mask; it exists as the
ablation baseline for the chunked path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encodings import GaussianRangeEncoding, TimeEncoding, sinusoidal_encoding
from .errors import ConfigError
from .params import ParameterStore
from .short_term import MemoryStore

PAD_TIME = -np.inf


@dataclass
class TransformerConfig:
    blocks: int = 2
    heads: int = 2
    dim: int = 100
    ff_dim: int = 200
    chunk: int = 5

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"model dim {self.dim} not divisible by {self.heads} heads"
            )


class ChunkedSequence:
    """Identity-sorted, zero-padded snapshot rows in buckets of n slots.

    Row r of the flattened sequence sits at sorted position c = r, bucket
    r // n, slot r % n; every bucket belongs to exactly one node and the
    slot index equals the window index, so window order is preserved
    inside each bucket.
    """

    def __init__(self, node_ids, times, updated, memory: Tensor, n: int):
        self.node_ids = node_ids        # (A,) dense ids, ascending
        self.times = times              # (A, n), PAD_TIME on pad slots
        self.updated = updated          # (A, n) bool
        self.memory = memory            # Tensor (A, n, d); pads are zero rows
        self.n = n

    @property
    def num_active(self) -> int:
        return len(self.node_ids)

    def sorted_position(self, node: int, window: int) -> int:
        b = int(np.searchsorted(self.node_ids, node))
        return b * self.n + window


def chunk_range(c: int, n: int) -> tuple[int, int]:
    """Inclusive admissible sorted-position range for a query at position c:
    everything in the same or previous chunk."""
    chunk = c // n
    lo = max(0, (chunk - 1) * n)
    hi = (chunk + 1) * n - 1
    return lo, hi


def resort_pad_chunk(window_groups, n: int, dim: int) -> ChunkedSequence | None:
    """Bucket-sort per-window snapshot groups into a ChunkedSequence.

    window_groups: per window w, a tuple (nodes, times, rows) where rows is
    a Tensor of end-of-window short-term memories for the nodes updated in
    that window.  Returns None when no node was updated at all.
    """
    if len(window_groups) != n:
        raise ConfigError(f"expected {n} window groups, got {len(window_groups)}")
    all_nodes = np.unique(np.concatenate(
        [np.asarray(g[0], dtype=np.int64) for g in window_groups]
    )) if any(len(g[0]) for g in window_groups) else np.array([], dtype=np.int64)
    a = len(all_nodes)
    if a == 0:
        return None
    bucket = {int(v): i for i, v in enumerate(all_nodes)}

    times = np.full((a, n), PAD_TIME)
    updated = np.zeros((a, n), dtype=bool)
    flat_idx = []
    row_tensors = []
    for w, (nodes, wtimes, rows) in enumerate(window_groups):
        if len(nodes) == 0:
            continue
        b = np.array([bucket[int(v)] for v in nodes], dtype=np.int64)
        times[b, w] = wtimes
        updated[b, w] = True
        flat_idx.append(b * n + w)
        row_tensors.append(rows)
    flat = ag.scatter_rows(
        ag.zeros((a * n, dim)),
        np.concatenate(flat_idx),
        ag.concat(row_tensors, axis=0) if len(row_tensors) > 1 else row_tensors[0],
    )
    return ChunkedSequence(all_nodes, times, updated, ag.reshape(flat, (a, n, dim)), n)


class AttentionLayout:
    """Geometry shared by the chunked and dense attention paths.

    x0:       Tensor (B, L, d) input rows
    mask:     (B, 1, L, L) bool admissibility (causality, pads, identity)
    dt:       (B, L, L) time gaps for admissible pairs, zeros elsewhere
    gre_pos:  (L,) per-position slot index for the range encoding
    real:     (B, L, 1) float, zero on pad rows
    node_ids: (A,) nodes to pool into
    pool:     callable H -> Tensor (A, d) averaging the nodes' real rows
    t_new:    (A,) latest update time per pooled node
    """

    def __init__(self, x0, mask, dt, gre_pos, real, node_ids, pool, t_new):
        self.x0 = x0
        self.mask = mask
        self.dt = dt
        self.gre_pos = gre_pos
        self.real = real
        self.node_ids = node_ids
        self.pool = pool
        self.t_new = t_new


def chunked_layout(seq: ChunkedSequence) -> AttentionLayout:
    """One chunk per node bucket; causal mask over slot (window) order."""
    a, n = seq.updated.shape
    tril = np.tril(np.ones((n, n), dtype=bool))
    mask = seq.updated[:, None, None, :] & tril[None, None, :, :]
    t = np.where(seq.updated, seq.times, 0.0)
    dt = t[:, :, None] - t[:, None, :]
    valid = seq.updated[:, :, None] & seq.updated[:, None, :]
    dt = np.where(valid, np.maximum(dt, 0.0), 0.0)
    real = seq.updated.astype(np.float64)[:, :, None]
    gre_pos = np.arange(n, dtype=np.int64)

    counts = seq.updated.sum(axis=1, keepdims=True).astype(np.float64)
    weights = seq.updated.astype(np.float64) / counts  # (A, n)
    w3 = Tensor(weights[:, None, :])                   # (A, 1, n)

    def pool(h: Tensor) -> Tensor:
        return ag.reshape(ag.matmul(w3, h), (a, h.shape[-1]))

    t_new = np.where(seq.updated, seq.times, PAD_TIME).max(axis=1)
    return AttentionLayout(seq.memory, mask, dt, gre_pos, real,
                           seq.node_ids, pool, t_new)


def flat_layout(window_groups, n: int, dim: int) -> AttentionLayout | None:
    """Unsorted snapshot sequence with only the causal window-order mask."""
    nodes_all, times_all, windows_all, rows_all = [], [], [], []
    for w, (nodes, wtimes, rows) in enumerate(window_groups):
        if len(nodes) == 0:
            continue
        nodes_all.append(np.asarray(nodes, dtype=np.int64))
        times_all.append(np.asarray(wtimes, dtype=np.float64))
        windows_all.append(np.full(len(nodes), w, dtype=np.int64))
        rows_all.append(rows)
    if not nodes_all:
        return None
    nodes = np.concatenate(nodes_all)
    times = np.concatenate(times_all)
    windows = np.concatenate(windows_all)
    rows = ag.concat(rows_all, axis=0) if len(rows_all) > 1 else rows_all[0]
    r = len(nodes)

    mask = (windows[None, :] <= windows[:, None])[None, None, :, :]
    dt = np.maximum(times[:, None] - times[None, :], 0.0)[None, :, :]
    real = np.ones((1, r, 1))
    x0 = ag.reshape(rows, (1, r, dim))

    active = np.unique(nodes)
    a = len(active)
    member = (nodes[None, :] == active[:, None]).astype(np.float64)
    member /= member.sum(axis=1, keepdims=True)
    wpool = Tensor(member)  # (A, R)

    def pool(h: Tensor) -> Tensor:
        return ag.matmul(wpool, ag.reshape(h, (r, dim)))

    t_new = np.full(a, PAD_TIME)
    np.maximum.at(t_new, np.searchsorted(active, nodes), times)
    return AttentionLayout(x0, mask, dt, windows, real, active, pool, t_new)


class TransformerBlock:
    """Pre-LN block: multi-head chunk attention + position-wise FFN."""

    def __init__(self, store: ParameterStore, dim: int, ff_dim: int, time_dim: int,
                 prefix: str):
        bd = 1.0 / np.sqrt(dim)
        self.w_q = store.add_uniform(f"{prefix}.w_q", bd, dim, dim)
        self.w_k = store.add_uniform(f"{prefix}.w_k", bd, dim, dim)
        self.w_v = store.add_uniform(f"{prefix}.w_v", bd, dim, dim)
        self.w_o = store.add_uniform(f"{prefix}.w_o", bd, dim, dim)
        self.w_t = store.add_uniform(f"{prefix}.w_t", 1.0 / np.sqrt(time_dim),
                                     time_dim, dim)
        self.ln1_g = store.add(f"{prefix}.ln1_g", np.ones(dim))
        self.ln1_b = store.add(f"{prefix}.ln1_b", np.zeros(dim))
        self.ln2_g = store.add(f"{prefix}.ln2_g", np.ones(dim))
        self.ln2_b = store.add(f"{prefix}.ln2_b", np.zeros(dim))
        self.ffn_w1 = store.add_uniform(f"{prefix}.ffn_w1", bd, dim, ff_dim)
        self.ffn_b1 = store.add(f"{prefix}.ffn_b1", np.zeros(ff_dim))
        self.ffn_w2 = store.add_uniform(f"{prefix}.ffn_w2", 1.0 / np.sqrt(ff_dim),
                                        ff_dim, dim)
        self.ffn_b2 = store.add(f"{prefix}.ffn_b2", np.zeros(dim))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, l, d = t.shape
    return ag.transpose(ag.reshape(t, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, l, dh = t.shape
    return ag.reshape(ag.transpose(t, (0, 2, 1, 3)), (b, l, h * dh))


def identity_attention(x: Tensor, layout: AttentionLayout, block: TransformerBlock,
                       time_enc: TimeEncoding, gre: GaussianRangeEncoding | None,
                       heads: int) -> Tensor:
    """One multi-head attention application under the layout's masks.

    Logits are plain dot products (no 1/sqrt(d) scaling) plus a per-pair
    time bias q . (W_t Phi(t_i - t_j)); the range encoding is added to key
    inputs at each key's slot before projection.  Pad queries produce zero
    rows.
    """
    b, l, d = x.shape
    k_in = x
    if gre is not None:
        k_in = ag.add(x, ag.gather_rows(gre.slot_embeddings(), layout.gre_pos))
    q = _split_heads(ag.matmul(x, block.w_q), heads)        # (B, h, L, dh)
    k = _split_heads(ag.matmul(k_in, block.w_k), heads)
    v = _split_heads(ag.matmul(x, block.w_v), heads)
    logits = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))    # (B, h, L, L)

    phi = time_enc.encode(layout.dt)                        # (B, L, L, d_t)
    tb = ag.matmul(phi, block.w_t)                          # (B, L, L, d)
    dh = d // heads
    tb = ag.transpose(ag.reshape(tb, (b, l, l, heads, dh)), (0, 3, 1, 2, 4))
    qe = ag.reshape(q, (b, heads, l, 1, dh))
    bias = ag.tsum(ag.mul(qe, tb), axis=4)                  # (B, h, L, L)

    attn = ag.masked_softmax(ag.add(logits, bias), layout.mask)
    out = _merge_heads(ag.matmul(attn, v))
    out = ag.matmul(out, block.w_o)
    return ag.mul(out, Tensor(layout.real))


def transformer_encode(layout: AttentionLayout, blocks, time_enc: TimeEncoding,
                       gre: GaussianRangeEncoding | None, heads: int,
                       positional: np.ndarray | None = None) -> Tensor:
    """Stack of pre-LN blocks; pad rows stay exactly zero throughout.

    `positional` is an optional fixed per-slot encoding added to the input
    once (the single-point baseline used when the range encoding is off).
    """
    x = layout.x0
    if positional is not None:
        x = ag.add(x, Tensor(positional[layout.gre_pos] * layout.real))
    for block in blocks:
        xn = ag.layer_norm(x, block.ln1_g, block.ln1_b)
        x = ag.add(x, identity_attention(xn, layout, block, time_enc, gre, heads))
        xn = ag.layer_norm(x, block.ln2_g, block.ln2_b)
        h1 = ag.relu(ag.add(ag.matmul(xn, block.ffn_w1), block.ffn_b1))
        delta = ag.add(ag.matmul(h1, block.ffn_w2), block.ffn_b2)
        x = ag.add(x, ag.mul(delta, Tensor(layout.real)))
    return x


def pool_long_memory(h: Tensor, layout: AttentionLayout, mem: MemoryStore):
    """Write pooled rows into long-term memory, reset short-term memory to
    zero for the pooled nodes, and advance their last-update times."""
    pooled = layout.pool(h)
    mem.m_long = ag.scatter_rows(mem.m_long, layout.node_ids, pooled)
    mem.m_short = ag.scatter_rows(
        mem.m_short, layout.node_ids, ag.zeros((len(layout.node_ids), mem.dim))
    )
    mem.t_minus[layout.node_ids] = layout.t_new


class LongTermUpdater:
    """Bundles the encoder stack and flushes window snapshots into M^L."""

    def __init__(self, store: ParameterStore, cfg: TransformerConfig,
                 time_enc: TimeEncoding, num_ranges: int = 10,
                 use_identity_attention: bool = True,
                 use_range_encoding: bool = True):
        self.cfg = cfg
        self.time_enc = time_enc
        self.use_identity_attention = use_identity_attention
        self.use_range_encoding = use_range_encoding
        self.gre = GaussianRangeEncoding(store, cfg.chunk, num_ranges, cfg.dim)
        self.blocks = [
            TransformerBlock(store, cfg.dim, cfg.ff_dim, time_enc.dim,
                             prefix=f"encoder.block{i}")
            for i in range(cfg.blocks)
        ]
        self._positional = sinusoidal_encoding(cfg.chunk, cfg.dim)

    def build_layout(self, window_groups) -> AttentionLayout | None:
        if self.use_identity_attention:
            seq = resort_pad_chunk(window_groups, self.cfg.chunk, self.cfg.dim)
            return None if seq is None else chunked_layout(seq)
        return flat_layout(window_groups, self.cfg.chunk, self.cfg.dim)

    def update(self, window_groups, mem: MemoryStore) -> int:
        """Run the encoder over the batch's snapshots and pool into memory.
        Returns the number of nodes whose long-term memory changed."""
        layout = self.build_layout(window_groups)
        if layout is None:
            return 0
        gre = self.gre if self.use_range_encoding else None
        positional = None if self.use_range_encoding else self._positional
        h = transformer_encode(layout, self.blocks, self.time_enc, gre,
                               self.cfg.heads, positional)
        pool_long_memory(h, layout, mem)
        return len(layout.node_ids)
