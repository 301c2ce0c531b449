"""AUC, F1, and accuracy with percentile-bootstrap confidence intervals.

AUC uses the Mann-Whitney pair-counting convention (ties half-credited) and
is evaluated with exact integer arithmetic, so the result is independent of
row order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fusebench.nncore import child_seed, seeded_rng


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. single-class AUC)."""


class CIUnavailableError(RuntimeError):
    """Too few valid bootstrap resamples to form a confidence interval."""


@dataclass
class PredictionTable:
    """Per-sample class probabilities and ground-truth labels."""

    scores: np.ndarray  # (n, num_classes) probabilities, rows sum to 1
    labels: np.ndarray  # (n,) integers in [0, num_classes)
    sample_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape[0] < 1 or self.scores.shape[1] < 2:
            raise ValueError(f"scores must be (n >= 1, K >= 2), got {self.scores.shape}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("labels length must match scores rows")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores contain non-finite values")
        row_sums = self.scores.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            raise ValueError("score rows must sum to 1 within 1e-6")
        if (self.labels < 0).any() or (self.labels >= self.scores.shape[1]).any():
            raise ValueError("labels out of range")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def __len__(self) -> int:
        return self.scores.shape[0]

    def take(self, indices: np.ndarray) -> "PredictionTable":
        """Row-resampled view used by the bootstrap (ids dropped).

        Skips __post_init__ validation: any row selection of a validated
        table is itself valid, and the bootstrap calls this in a hot loop.
        """
        t = object.__new__(PredictionTable)
        t.scores = self.scores[indices]
        t.labels = self.labels[indices]
        t.sample_ids = None
        return t


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties 0.5.

    Computed as an exact rational (integer pair counts over 2*P*N), so the
    float result does not depend on input order. Raises UndefinedMetricError
    when either class is absent.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError("scores and labels must be 1-d and aligned")
    pos_mask = y == 1
    neg_mask = y == 0
    if not (pos_mask | neg_mask).all():
        raise ValueError("labels must be binary 0/1")
    n_pos = int(pos_mask.sum())
    n_neg = int(neg_mask.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    _, inverse = np.unique(s, return_inverse=True)
    n_vals = inverse.max() + 1
    pos_per = np.bincount(inverse[pos_mask], minlength=n_vals).tolist()
    neg_per = np.bincount(inverse[neg_mask], minlength=n_vals).tolist()
    twice_wins = 0  # 2*(strict wins) + ties, ascending over distinct scores
    neg_below = 0
    for p_v, n_v in zip(pos_per, neg_per):
        twice_wins += p_v * (2 * neg_below + n_v)
        neg_below += n_v
    return twice_wins / (2 * n_pos * n_neg)


def macro_auc_ovr(table: PredictionTable) -> float:
    """Mean one-vs-rest AUC over classes; plain binary AUC when K == 2."""
    k = table.num_classes
    if k == 2:
        return roc_auc(table.scores[:, 1], (table.labels == 1).astype(np.int64))
    aucs = []
    for c in range(k):
        y = (table.labels == c).astype(np.int64)
        try:
            aucs.append(roc_auc(table.scores[:, c], y))
        except UndefinedMetricError as exc:
            raise UndefinedMetricError(f"class {c}: {exc}") from exc
    return float(np.mean(aucs))


def _confusion(table: PredictionTable) -> np.ndarray:
    preds = np.argmax(table.scores, axis=1)  # ties resolve to the lower index
    k = table.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (table.labels, preds), 1)
    return cm


def f1_breakdown(table: PredictionTable) -> tuple[float, list[float], list[int]]:
    """(f1, per-class f1, degenerate classes with no true and no predicted).

    Binary tables report the F1 of class 1; multiclass tables report the
    unweighted macro mean. A class with neither true nor predicted instances
    contributes 0 by convention and is listed as degenerate.
    """
    cm = _confusion(table)
    k = table.num_classes
    per_class = []
    degenerate = []
    for c in range(k):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        denom = 2 * tp + fp + fn
        if denom == 0:
            degenerate.append(c)
            per_class.append(0.0)
        else:
            per_class.append(2 * tp / denom)
    f1 = per_class[1] if k == 2 else float(np.mean(per_class))
    return f1, per_class, degenerate


def f1_score(table: PredictionTable) -> float:
    """Binary: F1 of class 1. Multiclass: macro-F1."""
    return f1_breakdown(table)[0]


def accuracy(table: PredictionTable) -> float:
    """Fraction of rows whose argmax score matches the label."""
    preds = np.argmax(table.scores, axis=1)
    return float(np.mean(preds == table.labels))


METRIC_FUNCS: dict[str, Callable[[PredictionTable], float]] = {
    "auc": macro_auc_ovr,
    "f1": f1_score,
    "acc": accuracy,
}


@dataclass
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    n_valid: int
    skipped: int


def bootstrap_ci(
    metric: Callable[[PredictionTable], float],
    table: PredictionTable,
    n_boot: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap over resampled rows of the prediction table.

    Every iteration draws its resample indices from its own child seed, so
    the result is deterministic in ``seed`` regardless of execution order.
    Resamples on which the metric is undefined are redrawn up to 100 times,
    then counted as skipped; fewer than 10 valid values raises
    CIUnavailableError.
    """
    n = len(table)
    if n < 2:
        raise ValueError(f"bootstrap needs n >= 2 rows, got {n}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    point = float(metric(table))
    values = []
    skipped = 0
    for b in range(n_boot):
        rng = seeded_rng(child_seed(seed, "boot", b))
        value = None
        for _attempt in range(100):
            idx = rng.integers(0, n, size=n)
            try:
                value = float(metric(table.take(idx)))
                break
            except UndefinedMetricError:
                continue
        if value is None:
            skipped += 1
        else:
            values.append(value)
    if len(values) < 10:
        raise CIUnavailableError(
            f"only {len(values)} valid bootstrap values (need >= 10); skipped {skipped}"
        )
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(point, float(lo), float(hi), len(values), skipped)


@dataclass
class MetricReport:
    """Point estimates and bootstrap CI bounds for one experiment."""

    metrics: dict[str, BootstrapResult]
    n_boot: int
    alpha: float
    seed: int
    degenerate_f1_classes: list[int] = field(default_factory=list)

    def validate(self) -> None:
        for name, r in self.metrics.items():
            if not (r.ci_low <= r.ci_high):
                raise ValueError(f"{name}: ci_low > ci_high")
            for v in (r.point, r.ci_low, r.ci_high):
                if not (0.0 <= v <= 1.0):
                    raise ValueError(f"{name}: value {v} outside [0, 1]")


def evaluate_table(
    table: PredictionTable, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0
) -> MetricReport:
    """Bootstrap all three standard metrics with per-metric child seeds."""
    results = {}
    for name, fn in METRIC_FUNCS.items():
        results[name] = bootstrap_ci(fn, table, n_boot=n_boot, alpha=alpha, seed=child_seed(seed, "metric", name))
    report = MetricReport(
        metrics=results,
        n_boot=n_boot,
        alpha=alpha,
        seed=seed,
        degenerate_f1_classes=f1_breakdown(table)[2],
    )
    report.validate()
    return report
