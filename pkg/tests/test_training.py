import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnsnet.data import make_synthetic, split
from gcnsnet.graph import build_graph
from gcnsnet.network import ArchError, ModelSpec, ParameterSet, init_params
from gcnsnet.training import (
    TrainConfig,
    adam_step,
    build_plan,
    cross_validate,
    grid,
    loss,
    train,
)


def _scalar_params(value=0.0):
    return ParameterSet({"w": np.array([value])}, ("w",), ("w",))


def _setup(ds, arch="(C-P)x2-S", filters=(8, 16), k=2, seed=1):
    graph = build_graph(ds)
    spec = ModelSpec(arch, filters, k, ds.n_classes)
    plan = build_plan(graph, spec, seed)
    return graph, spec, plan


@pytest.fixture(scope="module")
def small_task():
    return make_synthetic(n_channels=8, n_per_class=60, n_classes=3, seed=2, separation=3.0)


class TestLoss:
    def test_perfect(self):
        assert loss(np.array([[0.0, 1.0, 0.0]]), [1], _scalar_params(0.0), 1e-3) == 0.0

    def test_uniform(self):
        assert loss(np.full((1, 4), 0.25), [2]) == pytest.approx(math.log(4), abs=1e-15)

    def test_summation_oracle(self, rng):
        probs = rng.dirichlet(np.ones(5), size=30)
        labels = rng.integers(0, 5, 30)
        params = ParameterSet(
            {"a": rng.standard_normal((3, 2)), "g": rng.standard_normal(2)}, ("a", "g"), ("a",)
        )
        expect = 0.0
        for i in range(30):
            expect -= math.log(probs[i, labels[i]])
        expect /= 30
        expect += 0.01 * sum(v * v for v in params["a"].ravel())
        assert loss(probs, labels, params, 0.01) == pytest.approx(expect, abs=1e-12)

    def test_zero_probability_is_finite(self):
        assert math.isfinite(loss(np.array([[1.0, 0.0]]), [1]))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 5), st.booleans(), st.floats(1.01, 3.0))
    def test_l2_monotone(self, w, negative, factor):
        w = -w if negative else w
        probs = np.array([[0.3, 0.7]])
        small = loss(probs, [1], _scalar_params(w), 1e-6)
        big = loss(probs, [1], _scalar_params(w * factor), 1e-6)
        assert big > small


class TestAdam:
    def test_first_step(self):
        p = _scalar_params(0.0)
        adam_step(p, {"w": np.array([1.0])}, TrainConfig())
        # m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert p["w"][0] == -0.01 / (1 + 1e-8)
        assert p["w"][0] == pytest.approx(-0.00999999999, abs=1e-9)

    def test_two_step_trace(self):
        p = _scalar_params(0.0)
        cfg = TrainConfig()
        adam_step(p, {"w": np.array([1.0])}, cfg)
        adam_step(p, {"w": np.array([0.5])}, cfg)
        # m2 = 0.09 + 0.05, v2 = 0.000999 + 0.00025
        m_hat = (0.9 * 0.1 + 0.1 * 0.5) / (1 - 0.9**2)
        v_hat = (0.999 * 0.001 + 0.001 * 0.25) / (1 - 0.999**2)
        expect = -0.01 / (1 + 1e-8) - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert p["w"][0] == pytest.approx(expect, abs=1e-15)
        assert p.step == 2

    def test_zero_gradient_identity(self, rng):
        ds = make_synthetic(8, 10, 2, 0, 1.0)
        graph, spec, plan = _setup(ds)
        p = init_params(spec, plan, 0)
        before = {k: v.copy() for k, v in p.tensors.items()}
        adam_step(p, {k: np.zeros_like(p[k]) for k in p.trainable}, TrainConfig())
        for k in before:
            assert p[k].tobytes() == before[k].tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(_scalar_params(), {"w": np.zeros(2)}, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"learning_rate": 0.0}, {"l2_lambda": -1.0}, {"batch_size": 1}, {"dropout_rate": 1.0}]
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.l2_lambda, cfg.batch_size, cfg.dropout_rate) == (0.01, 1e-6, 1024, 0.5)


class TestTrain:
    def test_deterministic(self, small_task):
        graph, spec, plan = _setup(small_task, filters=(4, 8))
        sp = split(small_task, "holdout:0.9", 1)
        cfg = TrainConfig(epochs=3, batch_size=32, seed=4)
        a = train(small_task, sp, graph, plan, spec, cfg)
        b = train(small_task, sp, graph, plan, spec, cfg)
        assert a.report.to_json() == b.report.to_json()
        for k in a.params.tensors:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_history_shape(self, small_task):
        graph, spec, plan = _setup(small_task, filters=(4, 8))
        sp = split(small_task, "holdout:0.9", 1)
        rep = train(small_task, sp, graph, plan, spec, TrainConfig(epochs=4, batch_size=32, eval_every=2)).report
        assert [r["epoch"] for r in rep.history] == [1, 2, 3, 4]
        assert rep.history[0]["test_gaa"] is None and rep.history[1]["test_gaa"] is not None
        assert all(math.isfinite(r["train_loss"]) and 0 <= r["train_gaa"] <= 1 for r in rep.history)
        assert 0 <= rep.final.gaa <= 1

    def test_loss_mostly_decreases(self, synthetic_task):
        graph, spec, plan = _setup(synthetic_task)
        sp = split(synthetic_task, "holdout:0.9", 1)
        rep = train(synthetic_task, sp, graph, plan, spec, TrainConfig(epochs=6, seed=1)).report
        losses = [r["train_loss"] for r in rep.history]
        assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4

    def test_no_signal_is_chance(self):
        ds = make_synthetic(16, 500, 4, seed=1, separation=0.0)
        graph, spec, plan = _setup(ds)
        sp = split(ds, "holdout:0.9", 1)
        rep = train(ds, sp, graph, plan, spec, TrainConfig(epochs=50, seed=1)).report
        assert 0.20 <= rep.final.gaa <= 0.30

    def test_class_mismatch(self, small_task):
        graph = build_graph(small_task)
        spec = ModelSpec("C-P-S", (4,), 2, 4)
        plan = build_plan(graph, spec)
        with pytest.raises(ArchError):
            train(small_task, split(small_task, "holdout", 0), graph, plan, spec, TrainConfig(epochs=1))


class TestCrossValidate:
    def test_partition_and_mean(self):
        ds = make_synthetic(8, 25, 4, seed=3, separation=3.0)
        graph, spec, plan = _setup(ds, arch="C-P-S", filters=(4,))
        cv = cross_validate(ds, 10, graph, plan, spec, TrainConfig(epochs=2, batch_size=16))
        assert [len(t) for t in cv.test_indices] == [10] * 10
        assert sorted(sum(cv.test_indices, [])) == list(range(100))
        gaas = [f.final.gaa for f in cv.folds]
        assert abs(cv.gaa_mean - sum(gaas) / 10) < 1e-12
        assert cv.gaa_min == min(gaas) and cv.gaa_max == max(gaas)

    def test_needs_two_folds(self, small_task):
        graph, spec, plan = _setup(small_task, filters=(4, 8))
        with pytest.raises(ValueError):
            cross_validate(small_task, 1, graph, plan, spec, TrainConfig())


class TestGrid:
    def test_two_orders(self, small_task):
        rows = grid(small_task, [("C-P-S", (4,), 1), ("C-P-S", (4,), 2)], TrainConfig(epochs=3, batch_size=32))
        assert len(rows) == 2
        assert sorted(r["K"] for r in rows) == [1, 2]
        assert all(0 <= r["gaa"] <= 1 for r in rows)
        assert rows[0]["gaa"] >= rows[1]["gaa"]

    def test_failures_do_not_abort(self, small_task):
        specs = [("(C-P)x5-S", (2,) * 5, 2), ("C-P-S", (4,), 2), ("C-Q-S", None, None)]
        rows = grid(small_task, specs, TrainConfig(epochs=1, batch_size=32))
        assert [r["status"] for r in rows] == ["ok", "failed", "failed"]
        assert rows[0]["framework"] == "C-P-S"
        assert "pooling" in rows[1]["error"]

    def test_ordering_is_sorted_permutation(self, small_task):
        specs = [("C-S", (4,), 1), ("C-P-S", (4,), 2), ("C-C-P-S", (4, 4), 2)]
        rows = grid(small_task, specs, TrainConfig(epochs=3, batch_size=32))
        assert sorted(r["index"] for r in rows) == [0, 1, 2]
        gaas = [r["gaa"] for r in rows]
        assert gaas == sorted(gaas, reverse=True)

    def test_deeper_not_worse(self, synthetic_task):
        rows = grid(
            synthetic_task,
            [("C-P-S", (8,), 2), ("(C-P)x2-S", (8, 16), 2)],
            TrainConfig(epochs=50, seed=1),
        )
        by_arch = {r["framework"]: r["gaa"] for r in rows}
        assert by_arch["(C-P)x2-S"] >= by_arch["C-P-S"] - 0.02

    def test_empty(self, small_task):
        with pytest.raises(ValueError):
            grid(small_task, [], TrainConfig())
