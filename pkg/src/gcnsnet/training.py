"""Loss, Adam, the epoch loop and the cross-validation / architecture-grid
harnesses."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .coarsening import CoarseningPlan, coarsen
from .data import SignalDataset, SplitPlan, split, zscore_stats
from .graph import build_graph
from .metrics import EvalReport, evaluate
from .network import ArchError, ModelSpec, ParameterSet, backward, forward, init_params, spec_replace

__all__ = [
    "NumericalAbort",
    "TrainConfig",
    "TrainReport",
    "TrainResult",
    "CVReport",
    "loss",
    "adam_step",
    "build_plan",
    "predict_proba",
    "train",
    "cross_validate",
    "grid",
]

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300


class NumericalAbort(ArithmeticError):
    """Training produced a non-finite loss; ``snapshot`` holds diagnostics."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    l2_lambda: float = 1e-6
    batch_size: int = 1024
    epochs: int = 10
    dropout_rate: float = 0.5
    seed: int = 0
    eval_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    zscore: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def loss(probabilities, labels, params: ParameterSet | None = None, l2_lambda: float = 0.0) -> float:
    """Mean cross-entropy plus ``l2_lambda`` times the sum of squared weights and biases."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    picked = np.maximum(p[np.arange(y.size), y], PROB_FLOOR)
    data = float(-np.mean(np.log(picked)))
    if params is None or not l2_lambda:
        return data
    return data + l2_lambda * params.l2_sum()


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], config: TrainConfig) -> ParameterSet:
    """One Adam update, in place; returns ``params``."""
    for name in params.trainable:
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, expected {params[name].shape}")
    params.step += 1
    t = params.step
    b1, b2 = config.beta1, config.beta2
    for name in params.trainable:
        g = grads[name]
        m = params.m[name] = b1 * params.m[name] + (1.0 - b1) * g
        v = params.v[name] = b2 * params.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params.tensors[name] = params[name] - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params


def build_plan(graph, spec: ModelSpec, seed: int = 0) -> CoarseningPlan:
    """Coarsen ``graph`` with one level per pooling layer of ``spec``."""
    spec.check_graph(graph.n_nodes)
    return coarsen(graph, spec.n_pool, seed)


def predict_proba(params, spec, plan, values, chunk: int = 4096) -> np.ndarray:
    """Eval-mode softmax outputs for ``values`` (B x N), computed in chunks."""
    out = [forward(params, spec, plan, values[i : i + chunk], "eval")[1] for i in range(0, len(values), chunk)]
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))


@dataclass
class TrainReport:
    run_id: str
    config: dict
    spec: dict
    split: dict
    history: list = field(default_factory=list)
    final: EvalReport | None = None
    wall_time: float = 0.0

    @property
    def final_gaa(self) -> float:
        return self.final.gaa

    def to_dict(self) -> dict:
        # wall time stays out of the document so reruns are byte-identical
        return {
            "run_id": self.run_id,
            "config": self.config,
            "spec": self.spec,
            "split": self.split,
            "history": self.history,
            "final": self.final.to_dict(with_roc=False) if self.final else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class TrainResult:
    report: TrainReport
    params: ParameterSet
    plan: CoarseningPlan
    spec: ModelSpec
    norm: tuple[np.ndarray, np.ndarray] | None = None
    test_probabilities: np.ndarray | None = None


def _run_id(dataset: SignalDataset, config: TrainConfig, spec: ModelSpec, plan: SplitPlan) -> str:
    h = hashlib.blake2b(digest_size=20)
    h.update(dataset.values.tobytes())
    h.update(dataset.labels.tobytes())
    h.update(json.dumps([asdict(config), spec.to_dict(), plan.describe(), plan.seed], sort_keys=True).encode())
    return h.hexdigest()[:12]


def train(
    dataset: SignalDataset,
    split_plan: SplitPlan,
    graph,
    plan: CoarseningPlan,
    spec: ModelSpec,
    config: TrainConfig,
    params: ParameterSet | None = None,
) -> TrainResult:
    """Fixed-epoch minibatch training, deterministic for a given ``config.seed``.

    Minibatches come from a seeded shuffle of the training indices each
    epoch; a final partial batch is kept only if it has at least 2 samples.
    """
    if spec.dropout_rate != config.dropout_rate:
        spec = spec_replace(spec, dropout_rate=config.dropout_rate)
    if plan.n_nodes != dataset.n_channels:
        raise ValueError(f"plan has {plan.n_nodes} nodes, dataset {dataset.n_channels} channels")
    if spec.n_classes != dataset.n_classes:
        raise ArchError(f"spec has {spec.n_classes} classes, dataset {dataset.n_classes}")
    train_idx = np.asarray(split_plan.train_indices)
    test_idx = np.asarray(split_plan.test_indices)
    if train_idx.size < 2:
        raise ValueError("training split needs at least 2 samples")

    values = dataset.values
    norm = None
    if config.zscore:
        norm = zscore_stats(values, train_idx)
        values = (values - norm[0]) / norm[1]
    labels = dataset.labels

    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(spec, plan, config.seed)
    report = TrainReport(
        run_id=_run_id(dataset, config, spec, split_plan),
        config=asdict(config),
        spec=spec.to_dict(),
        split={"kind": split_plan.describe(), "seed": split_plan.seed, "n_train": int(train_idx.size), "n_test": int(test_idx.size)},
    )

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        batches = [order[i : i + config.batch_size] for i in range(0, order.size, config.batch_size)]
        if batches[-1].size < 2:
            batches.pop()
        total_loss, correct, seen = 0.0, 0, 0
        for batch in batches:
            xb, yb = values[batch], labels[batch]
            _, probs, cache = forward(params, spec, plan, xb, "train", rng)
            batch_loss = loss(probs, yb, params, config.l2_lambda)
            if not math.isfinite(batch_loss):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, step {params.step + 1}",
                    {
                        "epoch": epoch,
                        "step": params.step + 1,
                        "loss": batch_loss,
                        "max_abs_param": {k: float(np.max(np.abs(t))) for k, t in params.tensors.items()},
                    },
                )
            grads = backward(cache, yb, config.l2_lambda)
            adam_step(params, grads, config)
            params.tensors.update(cache.running)
            total_loss += batch_loss * batch.size
            correct += int(np.sum(probs.argmax(axis=1) == yb))
            seen += batch.size
        row = {"epoch": epoch, "train_loss": total_loss / seen, "train_gaa": correct / seen, "test_gaa": None}
        if test_idx.size and (epoch % config.eval_every == 0 or epoch == config.epochs):
            probs = predict_proba(params, spec, plan, values[test_idx])
            row["test_gaa"] = float(np.mean(probs.argmax(axis=1) == labels[test_idx]))
        report.history.append(row)
        log.info("epoch %d loss %.4f train %.4f test %s", epoch, row["train_loss"], row["train_gaa"], row["test_gaa"])

    test_probs = None
    if test_idx.size:
        test_probs = predict_proba(params, spec, plan, values[test_idx])
        report.final = evaluate(test_probs, labels[test_idx], dataset.n_classes, dataset.class_names)
    report.wall_time = time.perf_counter() - started
    return TrainResult(report, params, plan, spec, norm, test_probs)


@dataclass
class CVReport:
    folds: list[TrainReport]
    gaa_mean: float
    gaa_min: float
    gaa_max: float
    f1_mean: float
    f1_min: float
    f1_max: float
    test_indices: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "k": len(self.folds),
            "gaa": {"mean": self.gaa_mean, "min": self.gaa_min, "max": self.gaa_max},
            "f1": {"mean": self.f1_mean, "min": self.f1_min, "max": self.f1_max},
            "folds": [f.to_dict() for f in self.folds],
            "test_indices": self.test_indices,
        }


def cross_validate(dataset, k: int, graph, plan, spec, config: TrainConfig) -> CVReport:
    """Train once per fold; all folds come from one shuffle seeded by ``config.seed``."""
    if k < 2:
        raise ValueError("k-fold cross-validation needs k >= 2")
    folds, tests = [], []
    for fold in range(k):
        sp = split(dataset, ("kfold", k, fold), config.seed)
        folds.append(train(dataset, sp, graph, plan, spec, config).report)
        tests.append(sp.test_indices.tolist())
    gaas = np.array([f.final.gaa for f in folds])
    f1s = np.array([f.final.macro_f1 for f in folds])
    return CVReport(
        folds,
        float(gaas.mean()),
        float(gaas.min()),
        float(gaas.max()),
        float(f1s.mean()),
        float(f1s.min()),
        float(f1s.max()),
        tests,
    )


def grid(dataset, specs, config: TrainConfig, graph=None, split_plan: SplitPlan | None = None) -> list[dict]:
    """Train every spec with the same seed/config; rows sorted by test GAA, best first.

    A spec that fails (bad grammar, too many pooling layers, numerical abort)
    yields a row with ``status='failed'`` and does not stop the grid.
    Entries of ``specs`` may be :class:`ModelSpec` objects or
    ``(framework, filters, K)`` tuples.
    """
    if not specs:
        raise ValueError("grid needs at least one spec")
    graph = graph if graph is not None else build_graph(dataset)
    split_plan = split_plan or split(dataset, ("holdout", 0.9), config.seed)
    rows = []
    for i, item in enumerate(specs):
        row = {"index": i, "framework": None, "filters": None, "K": None, "gaa": None, "status": "ok", "error": None}
        try:
            if isinstance(item, ModelSpec):
                spec = item
            else:
                arch, filters, order = item
                row["framework"] = arch
                if filters is None or order is None:
                    raise ArchError(f"unparseable spec line {arch!r}")
                row.update(filters=list(filters), K=order)
                spec = ModelSpec(arch, tuple(filters), int(order), dataset.n_classes, dropout_rate=config.dropout_rate)
            row.update(framework=spec.arch, filters=list(spec.filters), K=spec.order)
            plan = build_plan(graph, spec, config.seed)
            result = train(dataset, split_plan, graph, plan, spec, config)
            row["gaa"] = result.report.final_gaa
        except (ValueError, ArithmeticError) as exc:
            row.update(status="failed", error=str(exc))
            log.warning("grid row %d failed: %s", i, exc)
        rows.append(row)
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -r["gaa"])
    return ok + [r for r in rows if r["status"] != "ok"]
