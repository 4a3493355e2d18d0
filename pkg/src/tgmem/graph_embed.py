"""Final temporal embeddings: attention over historical neighbors with
re-occurrence features.

Layer l builds keys and values from [neighbor memory | edge feature |
time gap encoding | re-occurrence encoding] and queries from the center
node's memory plus a zero-gap encoding; the attended summary is merged
with the center representation by a two-layer MLP.  Every hop is
anchored strictly before the query time.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encodings import TimeEncoding
from .events import NeighborStore
from .params import ParameterStore
from .short_term import MemoryStore


class ReoccurrenceEncoder:
    """Three-layer perceptron from a raw count to a d-vector; ReLU on the
    two hidden layers, linear output."""

    def __init__(self, store: ParameterStore, dim: int, prefix: str = "reocc"):
        bound = 1.0 / np.sqrt(dim)
        self.w1 = store.add_uniform(f"{prefix}.w1", 1.0, 1, dim)
        self.b1 = store.add(f"{prefix}.b1", np.zeros(dim))
        self.w2 = store.add_uniform(f"{prefix}.w2", bound, dim, dim)
        self.b2 = store.add(f"{prefix}.b2", np.zeros(dim))
        self.w3 = store.add_uniform(f"{prefix}.w3", bound, dim, dim)
        self.b3 = store.add(f"{prefix}.b3", np.zeros(dim))

    def encode(self, counts) -> Tensor:
        """counts: array or Tensor shaped (..., 1) -> (..., d)."""
        x = counts if isinstance(counts, Tensor) else Tensor(counts)
        h = ag.relu(ag.add(ag.matmul(x, self.w1), self.b1))
        h = ag.relu(ag.add(ag.matmul(h, self.w2), self.b2))
        return ag.add(ag.matmul(h, self.w3), self.b3)


class GraphLayerParams:
    """Attention projections and the combining MLP for one layer."""

    def __init__(self, store: ParameterStore, dim: int, edge_dim: int, time_dim: int,
                 use_reocc: bool, prefix: str):
        q_in = dim + time_dim
        k_in = dim + edge_dim + time_dim + (dim if use_reocc else 0)
        self.w_q = store.add_uniform(f"{prefix}.w_q", 1.0 / np.sqrt(q_in), q_in, dim)
        self.w_k = store.add_uniform(f"{prefix}.w_k", 1.0 / np.sqrt(k_in), k_in, dim)
        self.w_v = store.add_uniform(f"{prefix}.w_v", 1.0 / np.sqrt(k_in), k_in, dim)
        self.mlp_w1 = store.add_uniform(f"{prefix}.mlp_w1", 1.0 / np.sqrt(2 * dim),
                                        2 * dim, dim)
        self.mlp_b1 = store.add(f"{prefix}.mlp_b1", np.zeros(dim))
        self.mlp_w2 = store.add_uniform(f"{prefix}.mlp_w2", 1.0 / np.sqrt(dim),
                                        dim, dim)
        self.mlp_b2 = store.add(f"{prefix}.mlp_b2", np.zeros(dim))


def canonical_neighbor_order(times, ids, counts):
    """Deterministic slot order: by event time, then neighbor id, then
    re-occurrence count.  Total for real histories (counts break ties of
    repeated pairs), which makes the attention output independent of the
    order neighbors arrive in."""
    return np.lexsort((counts, ids, times))


def graph_attention_layer(h_center: Tensor, nb_h: Tensor, nb_feat, nb_dt, nb_xr,
                          nb_mask, params: GraphLayerParams,
                          time_enc: TimeEncoding, heads: int) -> Tensor:
    """One batched attention layer.

    h_center: (Q, d); nb_h: (Q, N, d); nb_feat: (Q, N, d_e) array;
    nb_dt: (Q, N) array of time gaps; nb_xr: (Q, N, d) Tensor or None
    (re-occurrence features, absent in the ablation); nb_mask: (Q, N)
    bool, False on padding slots.  Rows with no neighbors attend to
    nothing and contribute a zero summary.
    """
    qn, nn = nb_mask.shape
    d = h_center.shape[-1]
    dh = d // heads
    phi_nb = time_enc.encode(nb_dt)
    parts = [nb_h, Tensor(nb_feat), phi_nb]
    if nb_xr is not None:
        parts.append(nb_xr)
    k_in = ag.concat(parts, axis=-1)
    q_in = ag.concat([h_center, time_enc.encode(np.zeros(qn))], axis=-1)

    q = ag.matmul(q_in, params.w_q)                                   # (Q, d)
    q = ag.transpose(ag.reshape(q, (qn, 1, heads, dh)), (0, 2, 1, 3))  # (Q, h, 1, dh)
    k = ag.transpose(ag.reshape(ag.matmul(k_in, params.w_k), (qn, nn, heads, dh)),
                     (0, 2, 1, 3))                                    # (Q, h, N, dh)
    v = ag.transpose(ag.reshape(ag.matmul(k_in, params.w_v), (qn, nn, heads, dh)),
                     (0, 2, 1, 3))
    logits = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ag.masked_softmax(logits, nb_mask[:, None, None, :])
    summary = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (qn, d))

    merged = ag.concat([h_center, summary], axis=-1)
    hidden = ag.relu(ag.add(ag.matmul(merged, params.mlp_w1), params.mlp_b1))
    return ag.add(ag.matmul(hidden, params.mlp_w2), params.mlp_b2)


class GraphEmbedding:
    """Recursive neighbor attention producing z_i(t) from long-term memory."""

    def __init__(self, store: ParameterStore, dim: int, edge_dim: int,
                 time_enc: TimeEncoding, layers: int, num_neighbors: int,
                 heads: int, use_reocc: bool = True):
        self.dim = dim
        self.edge_dim = edge_dim
        self.layers = layers
        self.num_neighbors = num_neighbors
        self.heads = heads
        self.use_reocc = use_reocc
        self.time_enc = time_enc
        self.reocc = ReoccurrenceEncoder(store, dim)
        self.layer_params = [
            GraphLayerParams(store, dim, edge_dim, time_enc.dim, use_reocc,
                             prefix=f"graph.layer{l}")
            for l in range(1, layers + 1)
        ]

    def gather_neighbors(self, nodes, times, store: NeighborStore):
        """Fixed-width neighbor slabs in canonical order plus a slot mask."""
        qn, nn = len(nodes), self.num_neighbors
        nb_id = np.zeros((qn, nn), dtype=np.int64)
        nb_t = np.zeros((qn, nn))
        nb_count = np.ones((qn, nn))
        nb_feat = np.zeros((qn, nn, self.edge_dim))
        nb_mask = np.zeros((qn, nn), dtype=bool)
        for row, (node, t) in enumerate(zip(nodes, times)):
            entries = store.recent_neighbors(int(node), float(t), nn)
            if not entries:
                continue
            ids = np.array([e[0] for e in entries])
            ts = np.array([e[1] for e in entries])
            counts = np.array([e[3] for e in entries], dtype=np.float64)
            order = canonical_neighbor_order(ts, ids, counts)
            m = len(order)
            nb_id[row, :m] = ids[order]
            nb_t[row, :m] = ts[order]
            nb_count[row, :m] = counts[order]
            for slot, k in enumerate(order):
                nb_feat[row, slot] = entries[k][2]
            nb_mask[row, :m] = True
        return nb_id, nb_t, nb_count, nb_feat, nb_mask

    def embed(self, nodes, times, mem: MemoryStore, store: NeighborStore) -> Tensor:
        """z for each (node, t) query; reads strictly pre-t history only."""
        return self._embed_level(np.asarray(nodes, dtype=np.int64),
                                 np.asarray(times, dtype=np.float64),
                                 mem, store, self.layers)

    def _embed_level(self, nodes, times, mem, store, level) -> Tensor:
        h_center = ag.gather_rows(mem.m_long, nodes)
        if level == 0:
            return h_center
        nb_id, nb_t, nb_count, nb_feat, nb_mask = self.gather_neighbors(
            nodes, times, store
        )
        qn, nn = nb_mask.shape
        nb_h = self._embed_level(nb_id.reshape(-1), np.repeat(times, nn),
                                 mem, store, level - 1)
        nb_h = ag.reshape(nb_h, (qn, nn, self.dim))
        nb_dt = np.where(nb_mask, times[:, None] - nb_t, 0.0)
        nb_xr = self.reocc.encode(nb_count[..., None]) if self.use_reocc else None
        return graph_attention_layer(
            h_center, nb_h, nb_feat, nb_dt, nb_xr, nb_mask,
            self.layer_params[level - 1], self.time_enc, self.heads,
        )
