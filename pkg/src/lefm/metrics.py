"""Pixel-classification metrics, inter-annotator agreement, and ANOVA.

All pixel metrics are micro measures: confusion counts are pooled over every
evaluated pixel before any ratio is formed.  Degenerate denominators yield
0.0 and are listed by `ConfusionCounts.degenerate_metrics` so reports stay
machine readable; balanced accuracy raises instead, because an empty class
makes SE or SP meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError, NumericError

SIGNIFICANCE_LEVEL = 0.05

# fixed runs.csv column order; see README
RUNS_CSV_COLUMNS = [
    "model",
    "m",
    "seed",
    "status",
    "bacc",
    "f1",
    "precision",
    "sensitivity",
    "specificity",
    "tp",
    "tn",
    "fp",
    "fn",
    "epochs",
    "wall_time_s",
    "precision_mode",
    "prenormalized",
    "config_hash",
    "note",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def degenerate_metrics(self) -> tuple[str, ...]:
        bad = []
        if 2 * self.tp + self.fp + self.fn == 0:
            bad.append("f1")
        if self.tp + self.fp == 0:
            bad.append("precision")
        if self.tp + self.fn == 0:
            bad.append("sensitivity")
        if self.tn + self.fp == 0:
            bad.append("specificity")
        return tuple(bad)


def confusion(pred_binary, target_binary) -> ConfusionCounts:
    """Pooled confusion counts for binary arrays of identical shape."""
    pred = np.asarray(pred_binary)
    target = np.asarray(target_binary)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(target, (0, 1)).all():
        raise ValueError("confusion requires binary inputs")
    p = pred.astype(bool)
    t = target.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def sensitivity(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def specificity(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return c.tn / denom if denom else 0.0


def bacc(c: ConfusionCounts) -> float:
    """Balanced accuracy; raises DataError when either class is empty."""
    if c.tp + c.fn == 0:
        raise DataError("balanced accuracy undefined: no positive pixels in the target")
    if c.tn + c.fp == 0:
        raise DataError("balanced accuracy undefined: no negative pixels in the target")
    return 0.5 * (sensitivity(c) + specificity(c))


def fleiss_kappa(votes, raters: int) -> float:
    """Chance-corrected agreement for a fixed rater count over N items.

    `votes` is an N x C matrix of per-item category counts, every row summing
    to `raters`.
    """
    table = np.asarray(votes, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] < 2 or table.shape[0] < 1:
        raise ValueError("votes must be an N x C matrix with C >= 2 and N >= 1")
    if raters < 2:
        raise ValueError("at least two raters are required")
    if not np.allclose(table.sum(axis=1), raters):
        raise ValueError(f"every row must sum to the rater count {raters}")
    n_items = table.shape[0]
    return _kappa_from_sums(n_items, float((table ** 2).sum()), table.sum(axis=0), raters)


def pooled_fleiss_kappa(tables, raters: int) -> float:
    """Fleiss kappa with items pooled across an iterable of vote tables."""
    n_items = 0
    sum_sq = 0.0
    col_sums = None
    for table in tables:
        table = np.asarray(table, dtype=np.float64)
        if not np.allclose(table.sum(axis=1), raters):
            raise ValueError(f"every row must sum to the rater count {raters}")
        n_items += table.shape[0]
        sum_sq += float((table ** 2).sum())
        col_sums = table.sum(axis=0) if col_sums is None else col_sums + table.sum(axis=0)
    if n_items == 0:
        raise ValueError("no items to pool")
    return _kappa_from_sums(n_items, sum_sq, col_sums, raters)


def _kappa_from_sums(n_items, sum_sq, col_sums, raters):
    a = float(raters)
    p_bar = (sum_sq - n_items * a) / (n_items * a * (a - 1.0))
    p_j = np.asarray(col_sums) / (n_items * a)
    p_e = float((p_j ** 2).sum())
    if p_e >= 1.0 - 1e-15:
        # all mass in one category forces perfect observed agreement
        if p_bar >= 1.0 - 1e-12:
            return 1.0
        raise NumericError("chance agreement is 1 but observed agreement is not")
    return (p_bar - p_e) / (1.0 - p_e)


def agreement_band(kappa: float) -> str:
    """Qualitative agreement label for a kappa value (standard bands)."""
    if kappa < 0.0:
        return "poor"
    if kappa <= 0.20:
        return "slight"
    if kappa <= 0.40:
        return "fair"
    if kappa <= 0.60:
        return "moderate"
    if kappa <= 0.80:
        return "substantial"
    return "almost perfect"


def regularized_incomplete_beta(a: float, b: float, x: float, tol: float = 1e-10) -> float:
    """I_x(a, b) via the continued-fraction expansion (Lentz), abs tol 1e-10."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x, tol) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x, tol) / b


def _beta_continued_fraction(a, b, x, tol, max_iter=500):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise NumericError("incomplete beta continued fraction did not converge")


def f_distribution_sf(f_value: float, df1: int, df2: int) -> float:
    """P(F > f_value) for the F distribution with (df1, df2) degrees of freedom."""
    if f_value <= 0.0:
        return 1.0
    if math.isinf(f_value):
        return 0.0
    x = df2 / (df2 + df1 * f_value)
    return regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, x)


def one_way_anova(groups) -> tuple[float, float]:
    """One-way analysis of variance over >= 2 groups of >= 2 values each.

    Returns (F, p).  Identical group means give (0, 1); zero within-group
    variance with distinct means gives (inf, 0) explicitly.
    """
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError("ANOVA needs at least two groups")
    if any(a.ndim != 1 or a.size < 2 for a in arrays):
        raise ValueError("every group needs at least two values")
    sizes = np.array([a.size for a in arrays], dtype=np.float64)
    n_total = float(sizes.sum())
    k = len(arrays)
    grand = float(sum(a.sum() for a in arrays)) / n_total
    means = np.array([a.mean() for a in arrays])
    ss_between = float(np.sum(sizes * (means - grand) ** 2))
    ss_within = float(sum(((a - mu) ** 2).sum() for a, mu in zip(arrays, means)))
    if ss_between <= 0.0:
        return 0.0, 1.0
    if ss_within <= 0.0:
        return math.inf, 0.0
    df1 = k - 1
    df2 = int(n_total) - k
    f_value = (ss_between / df1) / (ss_within / df2)
    return f_value, f_distribution_sf(f_value, df1, df2)


def anova_verdict(metric: str, group_names, groups) -> dict:
    """ANOVA outcome as the report payload {metric, groups, F, p, significant}."""
    f_value, p_value = one_way_anova(groups)
    return {
        "metric": metric,
        "groups": list(group_names),
        "F": f_value,
        "p": p_value,
        "significant": bool(p_value < SIGNIFICANCE_LEVEL),
    }


@dataclass
class RunReport:
    """Per-run record feeding runs.csv, ANOVA groups, and summaries.

    wall_time_s is operational data: it goes to runs.csv but is excluded
    from the byte-stable report JSON (see `report_payload`).
    """

    model: str
    m: int
    seed: int
    bacc: float
    f1: float
    precision: float
    sensitivity: float
    specificity: float
    counts: ConfusionCounts
    epochs: int
    wall_time_s: float
    precision_mode: str
    config_hash: str
    prenormalized: bool = False
    status: str = "ok"
    note: str = ""

    def validate(self, tol: float = 1e-12):
        """Check that stored metric values match the stored counts."""
        c = self.counts
        for name, value in [
            ("bacc", bacc(c)),
            ("f1", f1(c)),
            ("precision", precision(c)),
            ("sensitivity", sensitivity(c)),
            ("specificity", specificity(c)),
        ]:
            if abs(getattr(self, name) - value) > tol:
                raise ValueError(f"{name} inconsistent with confusion counts")

    def csv_row(self) -> list:
        return [
            self.model,
            self.m,
            self.seed,
            self.status,
            repr(self.bacc),
            repr(self.f1),
            repr(self.precision),
            repr(self.sensitivity),
            repr(self.specificity),
            self.counts.tp,
            self.counts.tn,
            self.counts.fp,
            self.counts.fn,
            self.epochs,
            f"{self.wall_time_s:.3f}",
            self.precision_mode,
            int(self.prenormalized),
            self.config_hash,
            self.note,
        ]

    def report_payload(self) -> dict:
        """Deterministic projection for report files (no wall time)."""
        payload = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("counts", "wall_time_s")}
        payload["counts"] = {"tp": self.counts.tp, "tn": self.counts.tn, "fp": self.counts.fp, "fn": self.counts.fn}
        return payload

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, **kwargs) -> "RunReport":
        return cls(
            bacc=bacc(counts),
            f1=f1(counts),
            precision=precision(counts),
            sensitivity=sensitivity(counts),
            specificity=specificity(counts),
            counts=counts,
            **kwargs,
        )
