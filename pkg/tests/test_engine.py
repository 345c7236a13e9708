import math

import numpy as np
import pytest

from chaoscnn.engine import (ChaosTrainer, ConfigError, DivergenceError, TrainConfig, epoch_order, eta_schedule,
                             evaluate, evaluate_phase, train, train_phase)
from chaoscnn.nn import NetworkInstance, WeightStore, forward, init_weights, load_checkpoint
from harness import contribution_stress, interleaving_stress
from oracle import SequentialCNN, params_from_store


class TestSchedule:
    def test_examples(self):
        assert eta_schedule(0.001, 0.9, 0) == pytest.approx(0.001)
        assert eta_schedule(0.001, 0.9, 1) == pytest.approx(0.0009)
        assert eta_schedule(0.001, 0.9, 2) == pytest.approx(0.00081)

    def test_factor_one_is_constant(self):
        assert eta_schedule(0.05, 1.0, 40) == 0.05

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            eta_schedule(0.1, 0.9, -1)

    def test_order_is_a_seeded_permutation(self):
        a = epoch_order(100, 3, 2)
        assert sorted(a) == list(range(100))
        assert np.array_equal(a, epoch_order(100, 3, 2))
        assert not np.array_equal(a, epoch_order(100, 3, 1))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"eta_factor": 0.0}, {"eta_factor": 1.5}, {"eta0": -0.1}, {"eta0": math.nan},
        {"threads": 0}, {"precision": "f16"}, {"checkpoint_every": 2},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_empty_training_set(self, tiny_spec, synthetic):
        data = synthetic(0, 4)
        with pytest.raises(ConfigError):
            train(tiny_spec, data, TrainConfig(epochs=1))

    def test_store_of_other_architecture(self, tiny_spec, two_conv_spec):
        with pytest.raises(ConfigError):
            ChaosTrainer(tiny_spec, TrainConfig(epochs=1), store=WeightStore(two_conv_spec))


class TestSequentialEquivalence:
    """With one worker the engine is plain sequential on-line SGD."""

    @pytest.mark.parametrize("spec_fixture", ["tiny_spec", "two_conv_spec"])
    def test_matches_oracle(self, request, spec_fixture, synthetic):
        spec = request.getfixturevalue(spec_fixture)
        data = synthetic(40, 12, seed=5, dtype=np.float64)
        cfg = TrainConfig(epochs=2, eta0=0.05, eta_factor=0.9, threads=1, seed=11, precision="f64")
        store = WeightStore(spec, "f64")
        init_weights(store, cfg.seed)
        oracle = SequentialCNN(spec, params_from_store(store))
        outcomes, final = train(spec, data, cfg, store=store)
        for ep, out in enumerate(outcomes):
            order = np.random.default_rng([cfg.seed, ep]).permutation(len(data.train))
            loss = oracle.train_epoch(data.train.images, data.train.labels, order, 0.05 * 0.9 ** ep)
            assert out.train_loss == pytest.approx(loss, rel=1e-9)
            errors, test_loss = oracle.evaluate(data.test.images, data.test.labels)
            assert out.test.errors == errors
            assert out.test.loss == pytest.approx(test_loss, rel=1e-9)
        for i, (w, b) in oracle.params.items():
            np.testing.assert_allclose(final.weights(i), w, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(final.biases(i), b, rtol=1e-9, atol=1e-12)

    def test_training_reduces_loss(self, tiny_spec, synthetic):
        data = synthetic(200, 50, seed=1)
        outcomes, _ = train(tiny_spec, data, TrainConfig(epochs=4, eta0=0.01, threads=2))
        assert outcomes[-1].train_loss < 0.5 * outcomes[0].train_loss
        assert outcomes[-1].test.error_rate < 0.2


class TestExactlyOnce:
    def _workers(self, spec, p):
        store = WeightStore(spec)
        init_weights(store, 0)
        return [NetworkInstance(store, seed=w) for w in range(p)]

    @pytest.mark.parametrize("p", [1, 2, 8])
    def test_every_image_claimed_once(self, tiny_spec, synthetic, p):
        data = synthetic(300, 1)
        workers = self._workers(tiny_spec, p)
        order = epoch_order(300, 0, 0)
        _, record = train_phase(workers, data.train.images, data.train.labels, 0.01, order)
        assert (record.hits == 1).all()
        assert (record.owner >= 0).all() and (record.owner < p).all()
        assert record.per_worker(p).sum() == 300

    def test_two_workers_partition_ten_images(self, tiny_spec, synthetic):
        data = synthetic(10, 1)
        workers = self._workers(tiny_spec, 2)
        _, record = train_phase(workers, data.train.images, data.train.labels, 0.01)
        a = set(np.flatnonzero(record.owner == 0))
        b = set(np.flatnonzero(record.owner == 1))
        assert a.isdisjoint(b) and a | b == set(range(10))

    def test_trainer_reports_worker_counts(self, tiny_spec, synthetic):
        data = synthetic(120, 10)
        outcomes, _ = train(tiny_spec, data, TrainConfig(epochs=2, threads=3))
        for out in outcomes:
            assert sum(out.worker_images) == 120
            assert len(out.worker_images) == 3


class TestPublication:
    def test_two_workers_never_lose_an_update(self):
        assert interleaving_stress(repetitions=10_000) == 0

    def test_two_workers_double_precision(self):
        assert interleaving_stress(repetitions=2_000, dtype=np.float64) == 0

    def test_many_workers_match_serial_replay(self):
        assert contribution_stress(workers=8, contributions=2_000) == (0, 0)


class TestEvaluation:
    def test_perfect_on_own_predictions(self, tiny_spec, synthetic):
        data = synthetic(3, 1)
        store = WeightStore(tiny_spec)
        init_weights(store, 4)
        inst = NetworkInstance(store)
        labels = np.array([int(np.argmax(forward(inst, px))) for px in data.train.images])
        result = evaluate(store, data.train.images, labels)
        assert (result.images, result.errors) == (3, 0)

    def test_matches_oracle(self, two_conv_spec, synthetic):
        data = synthetic(1, 60, seed=2, dtype=np.float64)
        store = WeightStore(two_conv_spec, "f64")
        init_weights(store, 9)
        errors, loss = SequentialCNN(two_conv_spec, params_from_store(store)).evaluate(
            data.test.images, data.test.labels)
        result = evaluate(store, data.test.images, data.test.labels, threads=4)
        assert result.errors == errors
        assert result.loss == pytest.approx(loss, rel=1e-9)

    def test_independent_of_worker_count(self, tiny_spec, synthetic):
        data = synthetic(1, 200, seed=3)
        store = WeightStore(tiny_spec)
        init_weights(store, 1)
        results = [evaluate(store, data.test.images, data.test.labels, threads=p) for p in (1, 2, 8)]
        assert len({(r.images, r.errors) for r in results}) == 1
        for r in results[1:]:
            assert r.loss == pytest.approx(results[0].loss, rel=1e-5)

    def test_evaluation_leaves_weights_alone(self, tiny_spec, synthetic):
        data = synthetic(1, 30)
        store = WeightStore(tiny_spec)
        init_weights(store, 1)
        before = store.data.copy()
        evaluate_phase([NetworkInstance(store, seed=w) for w in range(2)], data.test.images, data.test.labels)
        assert np.array_equal(store.data, before)


class TestBarriers:
    def test_phases_do_not_overlap(self, tiny_spec, synthetic):
        data = synthetic(200, 100)
        trainer = ChaosTrainer(tiny_spec, TrainConfig(epochs=2, threads=4))
        trainer.run(data)
        ends = []
        for epoch in range(2):
            for phase in ("train", "validation", "test"):
                start, end = trainer.phase_log.span(epoch, phase)
                if ends:
                    assert start >= ends[-1]
                ends.append(end)

    def test_every_worker_logged(self, tiny_spec, synthetic):
        trainer = ChaosTrainer(tiny_spec, TrainConfig(epochs=1, threads=3))
        trainer.run(synthetic(30, 6))
        workers = {(ph, w) for _, ph, w, _, _ in trainer.phase_log.entries}
        assert len(workers) == 9


class TestDivergence:
    def test_nan_weights_abort_first_epoch(self, tiny_spec, synthetic):
        store = WeightStore(tiny_spec)
        init_weights(store, 0)
        store.biases(len(tiny_spec) - 1)[3] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(tiny_spec, synthetic(20, 4), TrainConfig(epochs=3, threads=2), store=store)
        assert info.value.epoch == 0
        assert 0 <= info.value.worker < 2
        assert info.value.outcomes == []

    def test_huge_rate_diverges_with_partial_history(self, tiny_spec, synthetic):
        store = WeightStore(tiny_spec)
        init_weights(store, 0)
        history = []
        cfg = TrainConfig(epochs=30, eta0=3e38, eta_factor=1.0, threads=1)
        with pytest.raises(DivergenceError) as info:
            train(tiny_spec, synthetic(50, 4), cfg, store=store, on_epoch=history.append)
        assert info.value.outcomes == history


class TestCheckpoints:
    def test_interval(self, tiny_spec, synthetic, tmp_path):
        cfg = TrainConfig(epochs=4, threads=1, checkpoint_every=2, checkpoint_dir=tmp_path)
        _, store = train(tiny_spec, synthetic(20, 4), cfg)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["tiny_epoch2.chw", "tiny_epoch4.chw"]
        again = load_checkpoint(tmp_path / "tiny_epoch4.chw", tiny_spec)
        assert np.array_equal(again.data, store.data)

    def test_resume_from_checkpoint_weights(self, tiny_spec, synthetic, tmp_path):
        data = synthetic(30, 6)
        _, store = train(tiny_spec, data, TrainConfig(epochs=1))
        outcomes, _ = train(tiny_spec, data, TrainConfig(epochs=1), store=store.copy())
        assert outcomes[0].test.images == 6


class TestTimings:
    def test_layer_times_cover_weighted_and_pool_layers(self, tiny_spec, synthetic):
        outcomes, _ = train(tiny_spec, synthetic(30, 6), TrainConfig(epochs=1))
        times = outcomes[0].layer_times
        assert [t.layer for t in times] == [1, 2, 3, 4]
        assert all(t.forward_seconds > 0 for t in times)
        assert all(t.backward_seconds > 0 for t in times)
        assert outcomes[0].total_wall > 0
