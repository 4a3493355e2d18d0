"""Timestamped edge streams: parsing, temporal splits, neighbor history.

Streams are undirected for history purposes: both endpoints record each
other, and re-occurrence counts are kept per unordered node pair.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OrderingError, ParseError

UNSET_LABEL = -1


@dataclass
class Event:
    src: int
    dst: int
    t: float
    edge_feat: np.ndarray
    label: int = UNSET_LABEL


@dataclass
class EventStream:
    """Column-oriented stream of events sorted by non-decreasing time."""

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    feats: np.ndarray
    labels: np.ndarray
    num_nodes: int

    def __len__(self) -> int:
        return len(self.src)

    @property
    def edge_dim(self) -> int:
        return self.feats.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool(np.any(self.labels != UNSET_LABEL))

    def event(self, i: int) -> Event:
        return Event(int(self.src[i]), int(self.dst[i]), float(self.t[i]),
                     self.feats[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)

    def select(self, indices) -> "EventStream":
        """Sub-stream over the given event indices; node ids are preserved."""
        idx = np.asarray(indices)
        return EventStream(self.src[idx], self.dst[idx], self.t[idx],
                           self.feats[idx], self.labels[idx], self.num_nodes)

    def validate(self):
        if np.any(self.t < 0):
            raise OrderingError("negative timestamp in stream")
        if np.any(np.diff(self.t) < 0):
            raise OrderingError("timestamps must be non-decreasing")


def _finish_stream(rows, edge_dim):
    """Assemble parsed rows; remaps raw node keys to dense 0..V-1 ids."""
    node_ids: dict = {}

    def dense(key):
        if key not in node_ids:
            node_ids[key] = len(node_ids)
        return node_ids[key]

    r = len(rows)
    de = edge_dim if edge_dim is not None else 0
    src = np.empty(r, dtype=np.int64)
    dst = np.empty(r, dtype=np.int64)
    ts = np.empty(r, dtype=np.float64)
    labels = np.empty(r, dtype=np.int64)
    feats = np.zeros((r, de), dtype=np.float64)
    prev_t = -np.inf
    for i, (skey, dkey, t, label, fvals, line_no) in enumerate(rows):
        if t < prev_t:
            raise OrderingError(
                f"line {line_no}: timestamp {t} decreases below {prev_t}"
            )
        prev_t = t
        src[i] = dense(("u", skey))
        dst[i] = dense(("i", dkey))
        ts[i] = t
        labels[i] = label
        if fvals:
            if len(fvals) != de:
                raise ParseError(
                    f"line {line_no}: expected {de} feature values, got {len(fvals)}"
                )
            feats[i] = fvals
    stream = EventStream(src, dst, ts, feats, labels, num_nodes=len(node_ids))
    if np.any(ts < 0):
        raise OrderingError("negative timestamp in stream")
    return stream


def parse_events(path, fmt: str = "jodie-csv", edge_dim: int | None = None) -> EventStream:
    """Parse a JODIE-style CSV or JSONL edge stream.

    Node ids are remapped to dense integers by first appearance; the two
    id columns are treated as disjoint namespaces (bipartite convention).
    Rows without feature values get zero vectors of `edge_dim`.
    """
    if fmt == "jodie-csv":
        rows, inferred = _parse_jodie_csv(path)
    elif fmt == "jsonl":
        rows, inferred = _parse_jsonl(path)
    else:
        raise ConfigError(f"unknown stream format: {fmt}")
    de = inferred if inferred is not None else (edge_dim or 0)
    return _finish_stream(rows, de)


def _parse_jodie_csv(path):
    rows = []
    inferred = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line_no == 1 and not line.split(",")[2].replace(".", "", 1).lstrip("-").isdigit():
                continue  # header
            parts = line.split(",")
            if len(parts) < 3:
                raise ParseError(f"line {line_no}: expected at least 3 columns")
            try:
                skey, dkey = parts[0], parts[1]
                t = float(parts[2])
                label = int(float(parts[3])) if len(parts) > 3 and parts[3] != "" else UNSET_LABEL
                fvals = [float(v) for v in parts[4:] if v != ""]
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if inferred is None and fvals:
                inferred = len(fvals)
            rows.append((skey, dkey, t, label, fvals, line_no))
    return rows, inferred


def _parse_jsonl(path):
    rows = []
    inferred = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                skey = str(obj["user_id"])
                dkey = str(obj["item_id"])
                t = float(obj["timestamp"])
                label = int(obj.get("state_label", UNSET_LABEL))
                fvals = [float(v) for v in obj.get("features", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if inferred is None and fvals:
                inferred = len(fvals)
            rows.append((skey, dkey, t, label, fvals, line_no))
    return rows, inferred


@dataclass
class Splits:
    """Temporal 70/15/15 ranges plus the held-out inductive node set."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    train_indices: np.ndarray
    inductive_nodes: frozenset = field(default_factory=frozenset)


def split_temporal(stream: EventStream, ratios=(0.7, 0.15, 0.15),
                   inductive_fraction: float = 0.0, seed: int = 0) -> Splits:
    """Chronological split; optionally holds out nodes for inductive eval.

    The inductive set prefers nodes first appearing after the training
    boundary and is topped up uniformly from the remaining nodes; any
    training event touching the set is dropped from train_indices.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if not 0.0 <= inductive_fraction < 1.0:
        raise ConfigError("inductive_fraction must lie in [0, 1)")
    r = len(stream)
    a = int(np.floor(ratios[0] * r))
    b = int(np.floor((ratios[0] + ratios[1]) * r))
    train_range, val_range, test_range = (0, a), (a, b), (b, r)

    inductive: frozenset = frozenset()
    train_idx = np.arange(a)
    size = int(inductive_fraction * stream.num_nodes)
    if size > 0:
        rng = np.random.default_rng(seed)
        first_seen = np.full(stream.num_nodes, r, dtype=np.int64)
        positions = np.arange(r, dtype=np.int64)
        np.minimum.at(first_seen, stream.src, positions)
        np.minimum.at(first_seen, stream.dst, positions)
        new_nodes = np.flatnonzero(first_seen >= a)
        others = np.flatnonzero(first_seen < a)
        if size <= len(new_nodes):
            chosen = rng.choice(np.sort(new_nodes), size=size, replace=False)
        else:
            extra = rng.choice(np.sort(others), size=size - len(new_nodes), replace=False)
            chosen = np.concatenate([new_nodes, extra])
        inductive = frozenset(int(v) for v in chosen)
        mask = np.ones(a, dtype=bool)
        ind = np.array(sorted(inductive), dtype=np.int64)
        mask &= ~np.isin(stream.src[:a], ind)
        mask &= ~np.isin(stream.dst[:a], ind)
        train_idx = np.flatnonzero(mask)
    return Splits(train_range, val_range, test_range, train_idx, inductive)


class NeighborStore:
    """Per-node interaction history with pairwise re-occurrence counts.

    Entries are appended in stream order; `recent_neighbors` filters to a
    strict past (t_j < t) and returns the most recent entries last.
    """

    def __init__(self, num_nodes: int):
        self.num_nodes = num_nodes
        self._nbr = [[] for _ in range(num_nodes)]     # neighbor ids
        self._time = [[] for _ in range(num_nodes)]
        self._feat = [[] for _ in range(num_nodes)]
        self._count = [[] for _ in range(num_nodes)]
        self._pair_counts: dict[tuple[int, int], int] = {}
        self._last_time = -np.inf

    def record_event(self, e: Event):
        if e.t < self._last_time:
            raise OrderingError(
                f"event at t={e.t} arrives after t={self._last_time}"
            )
        self._last_time = e.t
        key = (e.src, e.dst) if e.src <= e.dst else (e.dst, e.src)
        count = self._pair_counts.get(key, 0) + 1
        self._pair_counts[key] = count
        endpoints = ((e.src, e.dst),) if e.src == e.dst else ((e.src, e.dst), (e.dst, e.src))
        for a, b in endpoints:
            self._nbr[a].append(b)
            self._time[a].append(e.t)
            self._feat[a].append(e.edge_feat)
            self._count[a].append(count)

    def record_batch(self, stream: EventStream, indices):
        for i in indices:
            self.record_event(stream.event(int(i)))

    def pair_count(self, i: int, j: int) -> int:
        key = (i, j) if i <= j else (j, i)
        return self._pair_counts.get(key, 0)

    def recent_neighbors(self, i: int, t: float, n: int):
        """At most `n` most recent entries strictly before t, oldest first."""
        times = self._time[i]
        hi = bisect.bisect_left(times, t)
        lo = max(0, hi - n)
        return [
            (self._nbr[i][k], times[k], self._feat[i][k], self._count[i][k])
            for k in range(lo, hi)
        ]

    def degree(self, i: int) -> int:
        return len(self._nbr[i])


def frequency_subgraph(stream: EventStream, top_fraction: float) -> EventStream:
    """Events whose BOTH endpoints rank in the top fraction by edge count."""
    if not 0.0 < top_fraction <= 1.0:
        raise ConfigError("top_fraction must lie in (0, 1]")
    counts = np.bincount(
        np.concatenate([stream.src, stream.dst]), minlength=stream.num_nodes
    )
    m = int(np.ceil(top_fraction * stream.num_nodes))
    order = np.lexsort((np.arange(stream.num_nodes), -counts))
    keep = np.zeros(stream.num_nodes, dtype=bool)
    keep[order[:m]] = True
    mask = keep[stream.src] & keep[stream.dst]
    return stream.select(np.flatnonzero(mask))
