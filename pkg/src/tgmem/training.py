"""Self-supervised link-prediction training, evaluation and experiments."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NumericError, UndefinedMetricError
from .events import EventStream, Splits, frequency_subgraph, split_temporal
from .metrics import average_precision, chi_square_pvalue, roc_auc
from .model import BatchResult, Model, TrainConfig, bce_loss
from .params import Adam, ParameterStore

CSV_HEADER = "epoch,split,loss,ap,auc,skip_rate,ms_per_batch"


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float | None
    ap: float | None
    auc: float | None
    skip_rate: float | None
    ms_per_batch: float | None

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join([str(self.epoch), self.split, fmt(self.loss), fmt(self.ap),
                         fmt(self.auc), fmt(self.skip_rate), fmt(self.ms_per_batch)])


def write_metrics_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.to_csv() + "\n")


def negative_sample(rng: np.random.Generator, dst_universe: np.ndarray, m: int) -> np.ndarray:
    """One uniform negative destination per event; deterministic under rng."""
    if len(dst_universe) == 0:
        raise ConfigError("empty destination universe for negative sampling")
    return dst_universe[rng.integers(0, len(dst_universe), size=m)]


def batch_slices(indices: np.ndarray, batch_size: int):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo:lo + batch_size]


@dataclass
class SplitStats:
    loss_sum: float = 0.0
    events: int = 0
    decisions: int = 0
    updates: int = 0
    batches: int = 0
    ms_total: float = 0.0
    scores: list = None
    labels: list = None
    z_rows: list = None

    def __post_init__(self):
        self.scores, self.labels, self.z_rows = [], [], []

    def absorb(self, res: BatchResult, m: int, ms: float):
        self.loss_sum += res.loss.item()
        self.events += m
        self.decisions += res.gate_decisions
        self.updates += res.gate_updates
        self.batches += 1
        self.ms_total += ms
        self.scores.append(np.concatenate([res.p_pos, res.p_neg]))
        self.labels.append(np.concatenate([np.ones(m), np.zeros(m)]))

    @property
    def skip_rate(self) -> float:
        if self.decisions == 0:
            return 0.0
        return 1.0 - self.updates / self.decisions

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / max(1, self.events)

    @property
    def ms_per_batch(self) -> float:
        return self.ms_total / max(1, self.batches)

    def metric_arrays(self):
        return np.concatenate(self.scores), np.concatenate(self.labels)

    def row(self, epoch: int, split: str, timing: bool) -> MetricsRow:
        scores, labels = self.metric_arrays()
        return MetricsRow(epoch, split, self.mean_loss,
                          average_precision(scores, labels),
                          roc_auc(scores, labels), self.skip_rate,
                          self.ms_per_batch if timing else 0.0)


def dst_universe(stream: EventStream, indices) -> np.ndarray:
    return np.unique(stream.dst[np.asarray(indices, dtype=np.int64)])


def replay_split(model: Model, stream: EventStream, indices, negatives,
                 collect_z: bool = False) -> SplitStats:
    """Eval-mode pass over a slice of the stream, updating memory as it goes."""
    stats = SplitStats()
    offset = 0
    with ag.no_grad():
        for batch in batch_slices(np.asarray(indices, dtype=np.int64),
                                  model.cfg.batch_size):
            negs = negatives[offset:offset + len(batch)]
            offset += len(batch)
            t0 = time.perf_counter()
            res = model.process_batch(stream, batch, negs, "eval")
            ms = (time.perf_counter() - t0) * 1e3
            stats.absorb(res, len(batch), ms)
            if collect_z:
                stats.z_rows.append(res.z_src)
    return stats


def warm_memory(model: Model, stream: EventStream, indices, neg_rng):
    """Eval-mode replay used purely to evolve memory and history."""
    universe = dst_universe(stream, indices) if len(indices) else np.array([0])
    negs = negative_sample(neg_rng, universe, len(indices))
    replay_split(model, stream, indices, negs)


@dataclass
class TrainResult:
    model: Model
    rows: list
    splits: Splits
    best_epoch: int
    best_state: dict
    test_ap: float | None = None
    test_auc: float | None = None
    inductive_ap: float | None = None


def train(stream: EventStream, cfg: TrainConfig, log=None) -> TrainResult:
    """Full training run with per-epoch validation, early stopping on
    validation AP, and a final test evaluation with the best parameters."""
    splits = split_temporal(stream, inductive_fraction=cfg.inductive_fraction,
                            seed=cfg.seed)
    model = Model(cfg, stream.num_nodes, stream.edge_dim)
    opt = Adam(model.store, lr=cfg.lr)

    train_idx = splits.train_indices
    val_idx = np.arange(*splits.val_range)
    test_idx = np.arange(*splits.test_range)
    train_dst = dst_universe(stream, train_idx) if len(train_idx) else np.array([0])
    val_negs = negative_sample(np.random.default_rng([cfg.seed, 3000]),
                               dst_universe(stream, val_idx) if len(val_idx) else train_dst,
                               len(val_idx))
    test_negs = negative_sample(np.random.default_rng([cfg.seed, 3001]),
                                dst_universe(stream, test_idx) if len(test_idx) else train_dst,
                                len(test_idx))

    rows: list[MetricsRow] = []
    best_ap, best_epoch, best_state = -1.0, -1, model.store.state_dict()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        model.reset_state()
        gate_rng = np.random.default_rng([cfg.seed, 101, epoch])
        neg_rng = np.random.default_rng([cfg.seed, 202, epoch])
        stats = SplitStats()
        for bi, batch in enumerate(batch_slices(train_idx, cfg.batch_size)):
            negs = negative_sample(neg_rng, train_dst, len(batch))
            t0 = time.perf_counter()
            try:
                res = model.process_batch(stream, batch, negs, "train", gate_rng)
                res.loss.backward()
            except NumericError as exc:
                norms = {k: float(np.linalg.norm(v.data))
                         for k, v in model.store.items()}
                worst = max(norms, key=norms.get)
                raise NumericError(
                    f"epoch {epoch} batch {bi}: {exc}; largest parameter "
                    f"{worst} |.| = {norms[worst]:.3e}"
                ) from exc
            opt.step()
            model.store.zero_grad()
            model.detach_state()
            ms = (time.perf_counter() - t0) * 1e3
            stats.absorb(res, len(batch), ms)
        rows.append(stats.row(epoch, "train", cfg.timing))

        val_stats = replay_split(model, stream, val_idx, val_negs)
        rows.append(val_stats.row(epoch, "val", cfg.timing))
        val_scores, val_labels = val_stats.metric_arrays()
        val_ap = average_precision(val_scores, val_labels)
        if log:
            log(f"epoch {epoch}: train loss {stats.mean_loss:.4f} "
                f"val AP {val_ap:.4f} skip {stats.skip_rate:.2%}")
        if val_ap > best_ap:
            best_ap, best_epoch = val_ap, epoch
            best_state = model.store.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.store.load_state_dict(best_state)
    result = TrainResult(model, rows, splits, best_epoch, best_state)

    # final evaluation: rebuild memory from scratch with the best weights
    model.reset_state()
    warm_memory(model, stream, train_idx, np.random.default_rng([cfg.seed, 4000]))
    warm_memory(model, stream, val_idx, np.random.default_rng([cfg.seed, 4001]))
    test_stats = replay_split(model, stream, test_idx, test_negs)
    rows.append(test_stats.row(best_epoch, "test", cfg.timing))
    scores, labels = test_stats.metric_arrays()
    result.test_ap = average_precision(scores, labels)
    result.test_auc = roc_auc(scores, labels)

    if splits.inductive_nodes:
        ind = np.array(sorted(splits.inductive_nodes), dtype=np.int64)
        touching = (np.isin(stream.src[test_idx], ind)
                    | np.isin(stream.dst[test_idx], ind))
        if touching.any():
            p_pos = np.concatenate([s[:len(s) // 2] for s in test_stats.scores])
            p_neg = np.concatenate([s[len(s) // 2:] for s in test_stats.scores])
            s_ind = np.concatenate([p_pos[touching], p_neg[touching]])
            y_ind = np.concatenate([np.ones(touching.sum()), np.zeros(touching.sum())])
            result.inductive_ap = average_precision(s_ind, y_ind)
            rows.append(MetricsRow(best_epoch, "test_inductive", None,
                                   result.inductive_ap, roc_auc(s_ind, y_ind),
                                   None, None))
    return result


# -- downstream node classification ------------------------------------------


def collect_embeddings(model: Model, stream: EventStream, neg_rng=None):
    """Eval-mode replay of the whole stream collecting each event's source
    embedding at event time."""
    model.reset_state()
    rng = neg_rng or np.random.default_rng(0)
    all_idx = np.arange(len(stream))
    negs = negative_sample(rng, np.unique(stream.dst), len(stream))
    stats = replay_split(model, stream, all_idx, negs, collect_z=True)
    return np.concatenate(stats.z_rows, axis=0)


def train_node_head(z_train, y_train, z_test, y_test, dim: int, seed: int = 0,
                    lr: float = 1e-2, epochs: int = 200) -> float:
    """Fit a fresh two-layer classifier on frozen embeddings; test AUC."""
    if len(np.unique(y_train)) < 2 or len(np.unique(y_test)) < 2:
        raise UndefinedMetricError("node labels are single-class")
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    b = 1.0 / np.sqrt(dim)
    w1 = store.add("head.w1", rng.uniform(-b, b, size=(z_train.shape[1], dim)))
    b1 = store.add("head.b1", np.zeros(dim))
    w2 = store.add("head.w2", rng.uniform(-b, b, size=(dim, 1)))
    b2 = store.add("head.b2", np.zeros(1))
    opt = Adam(store, lr=lr)
    zt = Tensor(z_train)
    yt = y_train.astype(np.float64)

    def forward(z):
        h = ag.relu(ag.add(ag.matmul(z, w1), b1))
        out = ag.add(ag.matmul(h, w2), b2)
        return ag.sigmoid(ag.reshape(out, (out.shape[0],)))

    for _ in range(epochs):
        store.zero_grad()
        p = forward(zt)
        pos = ag.mul(Tensor(yt), ag.log(ag.clamp(p, 1e-12, 1.0)))
        neg = ag.mul(Tensor(1.0 - yt), ag.log1p(ag.neg(ag.clamp(p, 0.0, 1.0 - 1e-12))))
        ag.neg(ag.tmean(ag.add(pos, neg))).backward()
        opt.step()
    with ag.no_grad():
        p_test = forward(Tensor(z_test)).data
    return roc_auc(p_test, y_test)


def classify_nodes(model: Model, stream: EventStream, splits: Splits,
                   seed: int = 0) -> float:
    """Freeze the encoder, replay for embeddings, fit the label head, and
    report test AUC on the temporal test range."""
    if not stream.has_labels:
        raise ConfigError("stream carries no state labels")
    z = collect_embeddings(model, stream)
    labeled = stream.labels >= 0
    tr = np.arange(*splits.train_range)
    te = np.arange(*splits.test_range)
    tr = tr[labeled[tr]]
    te = te[labeled[te]]
    return train_node_head(z[tr], stream.labels[tr], z[te], stream.labels[te],
                           dim=model.cfg.dim, seed=seed)


# -- long-term modeling experiment --------------------------------------------


@dataclass
class FractionResult:
    fraction: float
    events: int
    successes: int
    failures: int
    ap: float | None


def longterm_experiment(model: Model, stream: EventStream,
                        fractions=(1.0, 0.8, 0.6, 0.4, 0.2, 0.1),
                        seed: int = 0):
    """Evaluate the trained model on frequency-filtered subgraphs.

    Per fraction: replay the subgraph's train+val ranges to build memory,
    then count test predictions where the positive outranks its paired
    negative.  Returns (per-fraction results, chi-square p-value over the
    success/failure table, dropped fractions).
    """
    results: list[FractionResult] = []
    dropped: list[float] = []
    for k, frac in enumerate(fractions):
        sub = frequency_subgraph(stream, frac)
        if len(sub) < 10:
            dropped.append(frac)
            continue
        sp = split_temporal(sub, inductive_fraction=0.0, seed=seed)
        test_idx = np.arange(*sp.test_range)
        if len(test_idx) == 0:
            dropped.append(frac)
            continue
        model.reset_state()
        warm_memory(model, sub, np.arange(*sp.train_range),
                    np.random.default_rng([seed, 7000, k]))
        warm_memory(model, sub, np.arange(*sp.val_range),
                    np.random.default_rng([seed, 7001, k]))
        negs = negative_sample(np.random.default_rng([seed, 7002, k]),
                               dst_universe(sub, test_idx), len(test_idx))
        stats = replay_split(model, sub, test_idx, negs)
        p_pos = np.concatenate([s[:len(s) // 2] for s in stats.scores])
        p_neg = np.concatenate([s[len(s) // 2:] for s in stats.scores])
        wins = int(np.sum(p_pos > p_neg))
        scores, labels = stats.metric_arrays()
        results.append(FractionResult(frac, len(test_idx), wins,
                                      len(test_idx) - wins,
                                      average_precision(scores, labels)))
    if len(results) < 2:
        raise UndefinedMetricError(
            "chi-square needs at least two non-empty subgraph columns"
        )
    table = np.array([[r.successes for r in results],
                      [r.failures for r in results]], dtype=np.float64)
    return results, chi_square_pvalue(table), dropped


def run_ablations(stream: EventStream, cfg: TrainConfig, variants):
    """Train the full model plus each requested single-component ablation
    under identical seeds and splits; returns (variant_name, TrainResult)."""
    out = [("full", train(stream, cfg))]
    for v in variants:
        out.append((f"wo_{v}", train(stream, cfg.ablated(v))))
    return out
