"""The full model: gated short-term updates per window, chunked attention
into long-term memory per batch, then neighbor-attention embeddings and a
link-probability head.

Batch protocol: all endpoint messages are built against the long-term
memory frozen at batch start; the batch's n windows update short-term
memory and node states in order; the window snapshots are flushed
through the encoder into long-term memory; the batch's events are then
recorded into the neighbor history and embeddings are computed at event
time (strictly-past lookups, so same-batch earlier events are visible
but never the event itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encodings import TimeEncoding
from .errors import ConfigError, NumericError
from .events import EventStream, NeighborStore
from .graph_embed import GraphEmbedding
from .long_term import LongTermUpdater, TransformerConfig
from .params import ParameterStore
from .short_term import MemoryStore, ShortTermUpdater, aggregate_most_recent, build_messages


@dataclass
class TrainConfig:
    """Every knob of the pipeline; ablation flags turn components off."""

    batch_size: int = 200
    chunk: int = 5                  # windows per batch; chunk size of the encoder
    dim: int = 100
    time_dim: int = 100
    ff_dim: int = 0                 # 0 -> 2 * dim
    blocks: int = 2
    heads: int = 2
    layers: int = 1                 # graph attention hops
    num_neighbors: int = 10
    num_ranges: int = 10
    alpha: float = 0.5
    s0: float = 0.5
    lr: float = 1e-4
    epochs: int = 20
    patience: int = 5
    seed: int = 0
    inductive_fraction: float = 0.1
    use_state_gate: bool = True         # off = indiscriminate updating
    use_range_encoding: bool = True     # off = sinusoidal positional encoding
    use_identity_attention: bool = True  # off = dense attention, causal mask only
    use_reoccurrence: bool = True       # off = drop re-occurrence features
    timing: bool = True                 # off = write 0.0 ms for reproducible CSVs

    def __post_init__(self):
        if self.batch_size % self.chunk != 0:
            raise ConfigError(
                f"batch size {self.batch_size} not divisible by chunk {self.chunk}"
            )
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.ff_dim == 0:
            self.ff_dim = 2 * self.dim

    def ablated(self, variant: str) -> "TrainConfig":
        """Copy with one named component disabled (SM, GRE, IA or ReO)."""
        flag = {
            "SM": "use_state_gate",
            "GRE": "use_range_encoding",
            "IA": "use_identity_attention",
            "ReO": "use_reoccurrence",
        }.get(variant)
        if flag is None:
            raise ConfigError(f"unknown ablation variant: {variant}")
        kv = {f.name: getattr(self, f.name) for f in fields(self)}
        kv[flag] = False
        return TrainConfig(**kv)


class LinkHead:
    """Two-layer MLP scoring a node pair from concatenated embeddings."""

    def __init__(self, store: ParameterStore, dim: int, prefix: str = "link"):
        self.w1 = store.add_uniform(f"{prefix}.w1", 1.0 / np.sqrt(2 * dim),
                                    2 * dim, dim)
        self.b1 = store.add(f"{prefix}.b1", np.zeros(dim))
        self.w2 = store.add_uniform(f"{prefix}.w2", 1.0 / np.sqrt(dim), dim, 1)
        self.b2 = store.add(f"{prefix}.b2", np.zeros(1))

    def probability(self, z_i: Tensor, z_j: Tensor) -> Tensor:
        """Interaction probability in (0, 1); rows are query pairs."""
        x = ag.concat([z_i, z_j], axis=-1)
        h = ag.relu(ag.add(ag.matmul(x, self.w1), self.b1))
        logit = ag.add(ag.matmul(h, self.w2), self.b2)
        return ag.sigmoid(ag.reshape(logit, (logit.shape[0],)))


def link_probability(head: LinkHead, z_i: Tensor, z_j: Tensor) -> Tensor:
    return head.probability(z_i, z_j)


def bce_loss(p_pos: Tensor, p_neg: Tensor) -> Tensor:
    """Summed cross-entropy with one sampled negative per positive."""
    eps = 1e-12
    pos_term = ag.log(ag.clamp(p_pos, eps, 1.0))
    neg_term = ag.log1p(ag.neg(ag.clamp(p_neg, 0.0, 1.0 - eps)))
    return ag.neg(ag.add(ag.tsum(pos_term), ag.tsum(neg_term)))


@dataclass
class BatchResult:
    loss: Tensor
    p_pos: np.ndarray
    p_neg: np.ndarray
    z_src: np.ndarray
    gate_decisions: int
    gate_updates: int
    pooled_nodes: int


class Model:
    """Owns all parameters plus the mutable memory/state/history."""

    def __init__(self, cfg: TrainConfig, num_nodes: int, edge_dim: int):
        self.cfg = cfg
        self.num_nodes = num_nodes
        self.edge_dim = edge_dim
        self.store = ParameterStore(init_seed=cfg.seed)
        self.time_enc = TimeEncoding(self.store, cfg.time_dim)
        self.short = ShortTermUpdater(
            self.store, cfg.dim, edge_dim, cfg.time_dim, alpha=cfg.alpha,
            s0=cfg.s0, num_nodes=num_nodes, use_state_gate=cfg.use_state_gate,
        )
        self.long = LongTermUpdater(
            self.store,
            TransformerConfig(blocks=cfg.blocks, heads=cfg.heads, dim=cfg.dim,
                              ff_dim=cfg.ff_dim, chunk=cfg.chunk),
            self.time_enc, num_ranges=cfg.num_ranges,
            use_identity_attention=cfg.use_identity_attention,
            use_range_encoding=cfg.use_range_encoding,
        )
        self.graph = GraphEmbedding(
            self.store, cfg.dim, edge_dim, self.time_enc, layers=cfg.layers,
            num_neighbors=cfg.num_neighbors, heads=cfg.heads,
            use_reocc=cfg.use_reoccurrence,
        )
        self.link = LinkHead(self.store, cfg.dim)
        self.mem = MemoryStore(num_nodes, cfg.dim)
        self.history = NeighborStore(num_nodes)

    # -- mutable state ------------------------------------------------------

    def reset_state(self):
        self.mem.reset()
        self.short.state.reset()
        self.history = NeighborStore(self.num_nodes)

    def detach_state(self):
        self.mem.detach()
        self.short.state.detach()

    def state_backup(self):
        return (self.mem.backup(), self.short.state.backup())

    def state_restore(self, saved):
        self.mem.restore(saved[0])
        self.short.state.restore(saved[1])

    # -- one batch ----------------------------------------------------------

    def process_batch(self, stream: EventStream, indices, negatives,
                      mode: str, gate_rng: np.random.Generator | None = None,
                      gate_override: str | None = None) -> BatchResult:
        """Run Algorithm-style batch processing and return the loss.

        indices: stream positions of this batch's events (time-ordered);
        negatives: one sampled destination per event.
        """
        idx = np.asarray(indices, dtype=np.int64)
        src, dst = stream.src[idx], stream.dst[idx]
        t, feats = stream.t[idx], stream.feats[idx]
        m = len(idx)
        n = self.cfg.chunk

        nodes, times, pos, payload = build_messages(src, dst, t, feats,
                                                    self.mem, self.time_enc)
        window_len = max(1, int(np.ceil(m / n)))
        groups = []
        decisions = updates = 0
        for w in range(n):
            lo, hi = w * window_len, min((w + 1) * window_len, m)
            in_window = np.flatnonzero((pos >= lo) & (pos < hi))
            if len(in_window) == 0:
                groups.append((np.array([], dtype=np.int64), np.array([]), None))
                continue
            sel = aggregate_most_recent(nodes[in_window], times[in_window],
                                        pos[in_window])
            rows = in_window[sel]
            res = self.short.apply_window(
                nodes[rows], times[rows], ag.gather_rows(payload, rows),
                self.mem, mode, gate_rng, gate_override=gate_override,
            )
            decisions += res.decisions
            updates += res.updates
            on = np.flatnonzero(res.gate_bits == 1.0)
            if len(on):
                groups.append((res.nodes[on], res.times[on],
                               ag.gather_rows(res.memory_rows, on)))
            else:
                groups.append((np.array([], dtype=np.int64), np.array([]), None))

        pooled = self.long.update(groups, self.mem)

        self.history.record_batch(stream, idx)

        queries = np.concatenate([src, dst, np.asarray(negatives, dtype=np.int64)])
        qtimes = np.concatenate([t, t, t])
        z = self.graph.embed(queries, qtimes, self.mem, self.history)
        z_src, z_dst, z_neg = z[:m], z[m:2 * m], z[2 * m:]
        p_pos = self.link.probability(z_src, z_dst)
        p_neg = self.link.probability(z_src, z_neg)
        loss = bce_loss(p_pos, p_neg)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss")
        return BatchResult(loss, p_pos.data.copy(), p_neg.data.copy(),
                           z_src.data.copy(), decisions, updates, pooled)
