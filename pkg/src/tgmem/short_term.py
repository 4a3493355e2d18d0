"""Adaptive short-term memory: messages, gated GRU updates, node states.

Each event yields one message per endpoint built from long-term memory;
within a window only the most recent message per node survives.  A
per-node Bernoulli gate decides whether the GRU update is applied, and
the gate parameter itself evolves so that frequently updated nodes grow
less likely to update again.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encodings import TimeEncoding
from .errors import ContractError, OrderingError
from .params import ParameterStore

STATE_EPS = 1e-6


class MemoryStore:
    """Per-node short-term memory, long-term memory and last-update time."""

    def __init__(self, num_nodes: int, dim: int):
        self.num_nodes = num_nodes
        self.dim = dim
        self.m_short = ag.zeros((num_nodes, dim))
        self.m_long = ag.zeros((num_nodes, dim))
        self.t_minus = np.zeros(num_nodes)

    def reset(self):
        self.m_short = ag.zeros((self.num_nodes, self.dim))
        self.m_long = ag.zeros((self.num_nodes, self.dim))
        self.t_minus = np.zeros(self.num_nodes)

    def detach(self):
        """Cut cross-batch gradient flow through carried memory."""
        self.m_short = self.m_short.detach()
        self.m_long = self.m_long.detach()

    def backup(self):
        return (self.m_short.data.copy(), self.m_long.data.copy(), self.t_minus.copy())

    def restore(self, saved):
        self.m_short = Tensor(saved[0].copy())
        self.m_long = Tensor(saved[1].copy())
        self.t_minus = saved[2].copy()


class NodeState:
    """Evolving per-node gate probabilities plus the shared projection."""

    def __init__(self, store: ParameterStore, num_nodes: int, dim: int,
                 alpha: float = 0.5, s0: float = 0.5, prefix: str = "state"):
        if not 0.0 < alpha < 1.0:
            raise ContractError("alpha must lie in (0, 1)")
        if not 0.0 < s0 < 1.0:
            raise ContractError("initial node state must lie in (0, 1)")
        self.num_nodes = num_nodes
        self.alpha = alpha
        self.s0 = s0
        self.w_p = store.add_uniform(f"{prefix}.w_p", 1.0 / np.sqrt(dim), dim, 1)
        self.b_p = store.add(f"{prefix}.b_p", np.zeros(1))
        self.s_hat = Tensor(np.full(num_nodes, s0))

    def reset(self):
        self.s_hat = Tensor(np.full(self.num_nodes, self.s0))

    def detach(self):
        self.s_hat = self.s_hat.detach()

    def backup(self):
        return self.s_hat.data.copy()

    def restore(self, saved):
        self.s_hat = Tensor(saved.copy())


class GRUCell:
    """Standard three-gate GRU; weights uniform in +-1/sqrt(hidden)."""

    def __init__(self, store: ParameterStore, input_dim: int, hidden_dim: int,
                 prefix: str = "gru"):
        bound = 1.0 / np.sqrt(hidden_dim)
        self.w_ir = store.add_uniform(f"{prefix}.w_ir", bound, input_dim, hidden_dim)
        self.w_iz = store.add_uniform(f"{prefix}.w_iz", bound, input_dim, hidden_dim)
        self.w_in = store.add_uniform(f"{prefix}.w_in", bound, input_dim, hidden_dim)
        self.w_hr = store.add_uniform(f"{prefix}.w_hr", bound, hidden_dim, hidden_dim)
        self.w_hz = store.add_uniform(f"{prefix}.w_hz", bound, hidden_dim, hidden_dim)
        self.w_hn = store.add_uniform(f"{prefix}.w_hn", bound, hidden_dim, hidden_dim)
        self.b_r = store.add_uniform(f"{prefix}.b_r", bound, hidden_dim)
        self.b_z = store.add_uniform(f"{prefix}.b_z", bound, hidden_dim)
        self.b_n = store.add_uniform(f"{prefix}.b_n", bound, hidden_dim)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        r = ag.sigmoid(ag.add(ag.add(ag.matmul(x, self.w_ir), ag.matmul(h, self.w_hr)), self.b_r))
        z = ag.sigmoid(ag.add(ag.add(ag.matmul(x, self.w_iz), ag.matmul(h, self.w_hz)), self.b_z))
        n = ag.tanh(ag.add(ag.add(ag.matmul(x, self.w_in), ag.mul(r, ag.matmul(h, self.w_hn))), self.b_n))
        one_minus_z = ag.sub(Tensor(1.0), z)
        return ag.add(ag.mul(one_minus_z, n), ag.mul(z, h))


def build_messages(src, dst, t, feats, mem: MemoryStore, time_enc: TimeEncoding):
    """Vectorized endpoint messages for a slice of events.

    Returns (nodes, times, event_pos, payload) where payload row layout is
    [own long-term memory | partner long-term memory | edge feature |
    time encoding of (t - last update)], source rows first.
    """
    src = np.asarray(src)
    dst = np.asarray(dst)
    t = np.asarray(t, dtype=np.float64)
    m = len(src)
    nodes = np.concatenate([src, dst])
    times = np.concatenate([t, t])
    last = mem.t_minus[nodes]
    if np.any(times < last):
        bad = nodes[times < last][0]
        raise OrderingError(f"event predates last update of node {bad}")
    own = ag.gather_rows(mem.m_long, nodes)
    partner = ag.gather_rows(mem.m_long, np.concatenate([dst, src]))
    efeat = Tensor(np.concatenate([feats, feats], axis=0))
    phi = time_enc.encode(times - last)
    payload = ag.concat([own, partner, efeat, phi], axis=1)
    pos = np.concatenate([np.arange(m), np.arange(m)])
    return nodes, times, pos, payload


def aggregate_most_recent(nodes, times, pos):
    """Indices of the surviving message per node: latest time, then latest
    stream position on ties.  Output is sorted by node id."""
    nodes = np.asarray(nodes)
    if len(nodes) == 0:
        return np.array([], dtype=np.int64)
    order = np.lexsort((pos, times, nodes))
    sorted_nodes = nodes[order]
    last_of_group = np.r_[sorted_nodes[1:] != sorted_nodes[:-1], True]
    return order[last_of_group]


def sample_state(s_hat: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Gate bits from the node state: Bernoulli draw with straight-through
    gradient in train mode, deterministic threshold at 0.5 in eval mode."""
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode sampling needs a generator")
        return ag.bernoulli_st(s_hat, rng)
    if mode == "eval":
        pv = s_hat.data
        if np.any(pv <= 0.0) or np.any(pv >= 1.0):
            raise ContractError("node state left (0, 1)")
        return Tensor((pv >= 0.5).astype(np.float64))
    raise ContractError(f"unknown gate mode: {mode}")


def update_short_memory(old: Tensor, msgs: Tensor, gate: Tensor, gru: GRUCell) -> Tensor:
    """Gated GRU update; rows with gate 0 are returned bit-unchanged."""
    return ag.gate_blend(gate, gru.step(msgs, old), old)


def update_node_state(s_hat: Tensor, mem_new: Tensor, gate: Tensor,
                      alpha: float, w_p: Tensor, b_p: Tensor) -> Tensor:
    """Evolve gate probabilities: refreshed on skip, decayed after update.

    delta = sigmoid(mem_new . w_p + b_p); skipped rows restart at delta,
    updated rows drop by alpha * delta (the min with the sampled bit is
    always delta on that branch), then everything is clamped inside (0,1).
    """
    delta = ag.sigmoid(ag.add(ag.matmul(mem_new, w_p), b_p))
    delta = ag.reshape(delta, (delta.shape[0],))
    decayed = ag.sub(s_hat, alpha * delta)
    return ag.clamp(ag.gate_blend(gate, decayed, delta), STATE_EPS, 1.0 - STATE_EPS)


class WindowResult:
    """What a window update leaves behind for snapshot recording."""

    __slots__ = ("nodes", "times", "gate_bits", "memory_rows", "decisions", "updates")

    def __init__(self, nodes, times, gate_bits, memory_rows, decisions, updates):
        self.nodes = nodes
        self.times = times
        self.gate_bits = gate_bits
        self.memory_rows = memory_rows
        self.decisions = decisions
        self.updates = updates


class ShortTermUpdater:
    """Applies one window of aggregated messages to memory and node state."""

    def __init__(self, store: ParameterStore, dim: int, edge_dim: int, time_dim: int,
                 alpha: float, s0: float, num_nodes: int,
                 use_state_gate: bool = True):
        self.dim = dim
        self.use_state_gate = use_state_gate
        self.gru = GRUCell(store, 2 * dim + edge_dim + time_dim, dim)
        self.state = NodeState(store, num_nodes, dim, alpha=alpha, s0=s0)

    def apply_window(self, nodes, times, payload: Tensor, mem: MemoryStore,
                     mode: str, rng: np.random.Generator,
                     gate_override: str | None = None) -> WindowResult:
        """Aggregate, gate, update; mutates mem.m_short and the node state.

        gate_override: None for sampled gates, "on" to force updates
        (indiscriminate variant), "soft" to use the probability itself as
        the gate (smooth surrogate used by gradient verification).
        """
        if len(nodes) == 0:
            return WindowResult(np.array([], dtype=np.int64), np.array([]),
                                np.array([]), None, 0, 0)
        sel_nodes = nodes
        sel_times = np.asarray(times, dtype=np.float64)
        old = ag.gather_rows(mem.m_short, sel_nodes)
        msgs = payload

        if not self.use_state_gate or gate_override == "on":
            gate = Tensor(np.ones(len(sel_nodes)))
        elif gate_override == "soft":
            gate = ag.gather_rows(self.state.s_hat, sel_nodes)
        else:
            s_rows = ag.gather_rows(self.state.s_hat, sel_nodes)
            gate = sample_state(s_rows, mode, rng)

        bits = gate.data
        if mode == "eval" and np.all((bits == 0.0) | (bits == 1.0)):
            # skipped rows never touch the GRU at inference time
            on = np.flatnonzero(bits == 1.0)
            new_rows = old
            if len(on):
                upd = self.gru.step(ag.gather_rows(msgs, on), ag.gather_rows(old, on))
                new_rows = ag.scatter_rows(old, on, upd)
        else:
            new_rows = update_short_memory(old, msgs, gate, self.gru)

        mem.m_short = ag.scatter_rows(mem.m_short, sel_nodes, new_rows)
        if self.use_state_gate:
            s_old = ag.gather_rows(self.state.s_hat, sel_nodes)
            s_new = update_node_state(s_old, new_rows, gate, self.state.alpha,
                                      self.state.w_p, self.state.b_p)
            self.state.s_hat = ag.scatter_rows(self.state.s_hat, sel_nodes, s_new)

        decisions = len(sel_nodes)
        updates = int(np.sum(bits == 1.0)) if self.use_state_gate else decisions
        return WindowResult(sel_nodes, sel_times, bits, new_rows, decisions, updates)
