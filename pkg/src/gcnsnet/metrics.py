"""Classification metrics and the Welch t-test used to compare models."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "EvalReport",
    "TTestResult",
    "confusion_matrix",
    "gaa",
    "per_class_accuracy",
    "kappa",
    "macro_prf",
    "per_class_prf",
    "roc_auc",
    "t_test",
    "evaluate",
    "betainc_reg",
]


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} index outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def _check(confusion) -> np.ndarray:
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.size == 0 or c.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    return c


def gaa(confusion) -> float:
    """Global average accuracy, trace / total."""
    c = _check(confusion)
    return float(np.trace(c) / c.sum())


def per_class_accuracy(confusion) -> np.ndarray:
    """Diagonal over row sums; NaN for classes absent from the labels."""
    c = _check(confusion)
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(c) / rows, np.nan)


def _kappa_parts(c: np.ndarray) -> tuple[float, float]:
    total = c.sum()
    p_o = np.trace(c) / total
    p_e = float(np.sum(c.sum(axis=1) * c.sum(axis=0)) / total**2)
    return float(p_o), p_e


def kappa(confusion) -> float:
    """Cohen's kappa ``(p_o - p_e) / (1 - p_e)``.

    When ``p_e == 1`` the ratio is undefined: 1.0 is returned for perfect
    agreement, else 0.0 (see :func:`kappa_is_degenerate`).
    """
    c = _check(confusion)
    p_o, p_e = _kappa_parts(c)
    if p_e >= 1.0:
        return 1.0 if p_o >= 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def kappa_is_degenerate(confusion) -> bool:
    p_o, p_e = _kappa_parts(_check(confusion))
    return p_e >= 1.0 and p_o < 1.0


def per_class_prf(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F1; empty denominators give 0."""
    c = _check(confusion)
    tp = np.diag(c)
    col, row = c.sum(axis=0), c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_prf(confusion) -> tuple[float, float, float]:
    p, r, f = per_class_prf(confusion)
    return float(p.mean()), float(r.mean()), float(f.mean())


def _binary_roc(scores: np.ndarray, positive: np.ndarray):
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None, float("nan")
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    # one threshold step per distinct score
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def roc_auc(scores, labels, n_classes: int | None = None):
    """One-vs-rest ROC curves and trapezoidal AUCs.

    Returns ``(roc_points, auc_per_class, macro_auc)``. A class with no
    positive or no negative samples gets ``None`` points and a NaN AUC and
    is left out of the macro mean.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim == 1:
        s = np.stack([1.0 - s, s], axis=1)
    if s.shape[0] != y.size or s.shape[0] < 1:
        raise ValueError(f"{s.shape[0]} score rows for {y.size} labels")
    n_classes = n_classes or s.shape[1]
    points, aucs = [], []
    for c in range(n_classes):
        pts, auc = _binary_roc(s[:, c], y == c)
        points.append(pts)
        aucs.append(auc)
    aucs = np.array(aucs)
    valid = ~np.isnan(aucs)
    macro = float(aucs[valid].mean()) if valid.any() else float("nan")
    return points, aucs, macro


# ---------------------------------------------------------------------------
# Welch t-test


def _betacf(a: float, b: float, x: float, tol: float = 1e-10, max_iter: int = 10000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


class TTestResult(NamedTuple):
    t: float
    p: float
    significant: bool
    df: float
    degenerate: bool = False


def t_test(sample_a, sample_b, alpha: float = 0.05) -> TTestResult:
    """Two-sided Welch t-test (unequal variances)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return TTestResult(0.0, 1.0, False, float("nan"), True)
        return TTestResult(math.copysign(math.inf, ma - mb), 0.0, True, float("nan"), True)
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(float(t), float(p), bool(p < alpha), float(df))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    confusion: list
    gaa: float
    per_class_accuracy: list
    kappa: float
    kappa_degenerate: bool
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc: list
    macro_auc: float
    roc_points: list
    class_names: list

    def to_dict(self, with_roc: bool = True) -> dict:
        d = asdict(self)
        if not with_roc:
            d.pop("roc_points")
        return _jsonable(d)

    def roc_csv(self, cls: int) -> str:
        pts = self.roc_points[cls] or []
        return "fpr,tpr\n" + "".join(f"{f!r},{t!r}\n" for f, t in pts)


def _jsonable(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def evaluate(probabilities, labels, n_classes: int | None = None, class_names=None) -> EvalReport:
    """Full metric suite for softmax outputs ``probabilities`` (B x O)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    n_classes = n_classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(pred, labels, n_classes)
    p, r, f = macro_prf(cm)
    points, aucs, macro = roc_auc(probs, labels, n_classes)
    return EvalReport(
        confusion=cm.tolist(),
        gaa=gaa(cm),
        per_class_accuracy=per_class_accuracy(cm).tolist(),
        kappa=kappa(cm),
        kappa_degenerate=kappa_is_degenerate(cm),
        macro_precision=p,
        macro_recall=r,
        macro_f1=f,
        auc=aucs.tolist(),
        macro_auc=macro,
        roc_points=points,
        class_names=list(class_names) if class_names is not None else [str(c) for c in range(n_classes)],
    )
