"""Training loop contracts: sampling, loss, gating stats, determinism."""

import numpy as np
import pytest

from tgmem import autograd as ag
from tgmem.autograd import Tensor
from tgmem.errors import ConfigError, UndefinedMetricError
from tgmem.metrics import chi_square_pvalue
from tgmem.model import LinkHead, Model, TrainConfig, bce_loss
from tgmem.params import ParameterStore
from tgmem.synth import noisy_periodic, periodic_bipartite
from tgmem.training import (
    MetricsRow,
    batch_slices,
    classify_nodes,
    negative_sample,
    train,
    train_node_head,
    write_metrics_csv,
)


def tiny_cfg(**kw):
    base = dict(batch_size=50, chunk=5, dim=8, time_dim=8, epochs=2, lr=1e-3,
                seed=0, num_neighbors=5, blocks=1, heads=2, layers=1,
                inductive_fraction=0.0, num_ranges=4, timing=False)
    base.update(kw)
    return TrainConfig(**base)


class TestNegativeSampling:
    def test_count_and_determinism(self):
        universe = np.arange(10)
        a = negative_sample(np.random.default_rng(5), universe, 37)
        b = negative_sample(np.random.default_rng(5), universe, 37)
        assert len(a) == 37
        np.testing.assert_array_equal(a, b)

    def test_uniformity_within_3_sigma(self):
        universe = np.arange(10)
        draws = negative_sample(np.random.default_rng(0), universe, 100_000)
        counts = np.bincount(draws, minlength=10)
        sigma = np.sqrt(100_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10_000) <= 3 * sigma)

    def test_empty_universe_rejected(self):
        with pytest.raises(ConfigError):
            negative_sample(np.random.default_rng(0), np.array([]), 5)


class TestLinkHeadAndLoss:
    def test_zero_parameters_give_half(self):
        store = ParameterStore()
        head = LinkHead(store, 4)
        for t in store.tensors():
            t.data[:] = 0.0
        p = head.probability(Tensor(np.ones((3, 4))), Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(p.data, np.full(3, 0.5))

    def test_probability_strictly_inside_unit_interval(self):
        store = ParameterStore(init_seed=3)
        head = LinkHead(store, 4)
        rng = np.random.default_rng(0)
        p = head.probability(Tensor(rng.standard_normal((8, 4)) * 50),
                             Tensor(rng.standard_normal((8, 4)) * 50))
        assert np.all(p.data > 0) and np.all(p.data < 1)

    def test_matches_direct_recompute(self):
        store = ParameterStore(init_seed=1)
        head = LinkHead(store, 4)
        z = np.ones((1, 4))
        x = np.concatenate([z, z], axis=1)
        h = np.maximum(x @ head.w1.data + head.b1.data, 0.0)
        logit = h @ head.w2.data + head.b2.data
        expected = 1.0 / (1.0 + np.exp(-logit[0, 0]))
        got = head.probability(Tensor(z), Tensor(z)).data[0]
        assert got == pytest.approx(expected, abs=1e-12)

    def test_loss_limits(self):
        near1 = Tensor(np.array([1.0 - 1e-12]))
        near0 = Tensor(np.array([1e-12]))
        assert bce_loss(near1, near0).item() == pytest.approx(0.0, abs=1e-9)

    def test_half_probabilities_give_two_log_two(self):
        half = Tensor(np.array([0.5]))
        assert bce_loss(half, half).item() == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.uniform(0.01, 0.99, size=20))
        q = Tensor(rng.uniform(0.01, 0.99, size=20))
        assert bce_loss(p, q).item() >= 0.0


class TestBatching:
    def test_epoch_touches_every_event_once(self):
        idx = np.arange(137)
        seen = np.concatenate(list(batch_slices(idx, 50)))
        np.testing.assert_array_equal(np.sort(seen), idx)
        assert len(seen) == len(idx)


class TestTrainingRuns:
    def test_loss_decreases_on_periodic_stream(self):
        stream = periodic_bipartite(num_users=10, num_items=5, num_events=600)
        cfg = tiny_cfg(epochs=5, lr=3e-3)
        res = train(stream, cfg)
        train_rows = [r for r in res.rows if r.split == "train"]
        assert train_rows[-1].loss < train_rows[0].loss

    def test_two_seeded_runs_bit_identical(self):
        stream = periodic_bipartite(num_users=10, num_items=5, num_events=400)
        rows_a = train(stream, tiny_cfg()).rows
        rows_b = train(stream, tiny_cfg()).rows
        assert [r.to_csv() for r in rows_a] == [r.to_csv() for r in rows_b]

    def test_gate_disabled_reports_zero_skip(self):
        stream = periodic_bipartite(num_users=10, num_items=5, num_events=400)
        res = train(stream, tiny_cfg(use_state_gate=False, epochs=1))
        train_rows = [r for r in res.rows if r.split == "train"]
        assert all(r.skip_rate == 0.0 for r in train_rows)

    def test_skip_rate_identity(self):
        stream = noisy_periodic(num_users=10, num_items=5, num_events=500, eta=0.3)
        model = Model(tiny_cfg(), stream.num_nodes, stream.edge_dim)
        gate_rng = np.random.default_rng(1)
        decisions = updates = 0
        for batch in batch_slices(np.arange(300), 50):
            negs = negative_sample(np.random.default_rng(2), np.unique(stream.dst),
                                   len(batch))
            res = model.process_batch(stream, batch, negs, "train", gate_rng)
            decisions += res.gate_decisions
            updates += res.gate_updates
            model.detach_state()
        assert decisions > 0
        skip = 1.0 - updates / decisions
        assert skip == 1.0 - (updates / decisions)  # the reported identity
        assert 0.0 <= skip < 1.0

    def test_cross_batch_memory_detached(self):
        stream = periodic_bipartite(num_users=10, num_items=5, num_events=300)
        cfg = tiny_cfg()
        model = Model(cfg, stream.num_nodes, stream.edge_dim)
        gate_rng = np.random.default_rng(0)
        negs = negative_sample(np.random.default_rng(1), np.unique(stream.dst), 50)

        res0 = model.process_batch(stream, np.arange(50), negs, "train", gate_rng)
        res0.loss.backward()
        model.store.zero_grad()
        carried_short = model.mem.m_short   # graph nodes from batch 0
        carried_long = model.mem.m_long
        model.detach_state()
        carried_short.zero_grad(), carried_long.zero_grad()

        res1 = model.process_batch(stream, np.arange(50, 100), negs, "train",
                                   gate_rng)
        res1.loss.backward()
        assert carried_short.grad is None
        assert carried_long.grad is None
        # while the detached copies do receive gradient inside batch 1
        assert model.store["gru.w_ir"].grad is not None

    def test_eval_mode_deterministic_without_sampling(self):
        stream = periodic_bipartite(num_users=10, num_items=5, num_events=400)
        cfg = tiny_cfg(epochs=1)
        res = train(stream, cfg)
        model = res.model
        model.reset_state()
        with ag.no_grad():
            a = model.process_batch(stream, np.arange(50),
                                    np.zeros(50, dtype=np.int64) + 10, "eval")
        model.reset_state()
        with ag.no_grad():
            b = model.process_batch(stream, np.arange(50),
                                    np.zeros(50, dtype=np.int64) + 10, "eval")
        np.testing.assert_array_equal(a.p_pos, b.p_pos)


class TestMetricsCsv:
    def test_roundtrip_format(self, tmp_path):
        rows = [MetricsRow(1, "train", 1.25, 0.5, 0.5, 0.1, 0.0),
                MetricsRow(1, "test_inductive", None, 0.75, None, None, None)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,split,loss,ap,auc,skip_rate,ms_per_batch"
        assert lines[1] == "1,train,1.25,0.5,0.5,0.1,0.0"
        assert lines[2] == "1,test_inductive,,0.75,,,"


class TestNodeClassification:
    def test_separable_embeddings_reach_high_auc(self):
        rng = np.random.default_rng(0)
        n, d = 400, 8
        y = rng.integers(0, 2, size=n)
        direction = rng.standard_normal(d)
        z = rng.standard_normal((n, d)) * 0.1 + np.outer(2 * y - 1, direction)
        auc = train_node_head(z[:300], y[:300], z[300:], y[300:], dim=d, seed=0)
        assert auc > 0.95

    def test_constant_labels_surface_error(self):
        z = np.random.default_rng(0).standard_normal((40, 4))
        y = np.ones(40, dtype=int)
        with pytest.raises(UndefinedMetricError):
            train_node_head(z[:30], y[:30], z[30:], y[30:], dim=4)

    def test_unlabeled_stream_rejected(self):
        stream = periodic_bipartite(num_users=6, num_items=3, num_events=200)
        cfg = tiny_cfg(epochs=1)
        res = train(stream, cfg)
        with pytest.raises(ConfigError):
            classify_nodes(res.model, stream, res.splits)

    def test_head_training_leaves_encoder_untouched(self):
        stream = periodic_bipartite(num_users=6, num_items=3, num_events=300,
                                    labeled=True)
        cfg = tiny_cfg(epochs=1)
        res = train(stream, cfg)
        before = {k: v.copy() for k, v in res.model.store.state_dict().items()}
        classify_nodes(res.model, stream, res.splits)
        after = res.model.store.state_dict()
        for k in before:
            assert np.array_equal(before[k], after[k]), k


class TestLongTermExperiment:
    def test_planted_degradation_detected(self):
        table = [[900, 600], [100, 400]]  # success rates 0.9 vs 0.6, 1000 trials
        assert chi_square_pvalue(table) < 0.01

    def test_equal_success_rates_give_p_one(self):
        assert chi_square_pvalue([[80, 80, 80], [20, 20, 20]]) == pytest.approx(1.0)

    def test_runs_end_to_end_and_drops_empty(self):
        from tgmem.training import longterm_experiment

        stream = periodic_bipartite(num_users=10, num_items=5, num_events=500)
        res = train(stream, tiny_cfg(epochs=1))
        results, pvalue, dropped = longterm_experiment(
            res.model, stream, fractions=(1.0, 0.5, 0.001), seed=0
        )
        assert 0.0 <= pvalue <= 1.0
        assert 0.001 in dropped          # far too few qualifying events
        assert len(results) == 2

    def test_single_column_undefined(self):
        from tgmem.training import longterm_experiment

        stream = periodic_bipartite(num_users=10, num_items=5, num_events=500)
        res = train(stream, tiny_cfg(epochs=1))
        with pytest.raises(UndefinedMetricError):
            longterm_experiment(res.model, stream, fractions=(1.0,), seed=0)
