"""AUROC, seed aggregation, Welch's t-test and comparison reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ContractViolation, UndefinedAUCError

VARIANTS = ("cl-init", "masked-init", "external-baseline")


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (P * N), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractViolation("scores and labels must be 1-d and equally long")
    if not np.isin(y, (0, 1)).all():
        raise ContractViolation("labels must be binary")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUROC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for one value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractViolation("cannot aggregate an empty list")
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f} (±{std:.3f})"


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
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
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ContractViolation("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def welch_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Unequal-variance two-sample t statistic and two-tailed p-value.

    When both samples have zero variance the result is ``(0, 1)`` for equal
    means and ``(+-inf, 0)`` otherwise.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ContractViolation("each sample needs at least two values")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 == 0.0:
        if mx == my:
            return 0.0, 1.0
        return math.copysign(math.inf, mx - my), 0.0
    t = float((mx - my) / math.sqrt(se2))
    df = se2**2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    return t, float(t_sf_two_tailed(t, df))


@dataclass
class SeedResults:
    task: str
    variant: str
    aucs: list[float]
    fraction: float = 1.0
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for v in self.aucs):
            raise ContractViolation("AUC values must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SeedResults":
        return cls(**d)


@dataclass
class ReportRow:
    model: str
    fraction: float
    mean: float
    std: float
    n: int


@dataclass
class TTestResult:
    task: str
    fraction: float
    a: str
    b: str
    t: float
    p: float


@dataclass
class Report:
    task: str
    rows: list[ReportRow]
    ttests: list[TTestResult]

    @classmethod
    def from_results(cls, results: Sequence[SeedResults], reference: str = "cl-init") -> "Report":
        if not results:
            raise ContractViolation("no results to report")
        tasks = {r.task for r in results}
        if len(tasks) != 1:
            raise ContractViolation(f"results mix tasks: {sorted(tasks)}")
        task = tasks.pop()
        ordered = sorted(results, key=lambda r: (r.variant, -r.fraction))
        rows = [ReportRow(r.variant, r.fraction, *aggregate(r.aucs), len(r.aucs)) for r in ordered]
        ttests = []
        by_key = {(r.variant, r.fraction): r for r in results}
        for (variant, fraction), res in sorted(by_key.items()):
            ref = by_key.get((reference, fraction))
            if variant == reference or ref is None:
                continue
            if len(ref.aucs) < 2 or len(res.aucs) < 2:
                continue
            t, p = welch_ttest(ref.aucs, res.aucs)
            ttests.append(TTestResult(task, fraction, reference, variant, t, p))
        return cls(task, rows, ttests)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "model", "fraction", "mean_auc", "std_auc", "n_seeds", "cell"])
        for r in self.rows:
            w.writerow([self.task, r.model, r.fraction, f"{r.mean:.6f}", f"{r.std:.6f}", r.n,
                        format_cell(r.mean, r.std)])
        return buf.getvalue()

    def to_text(self) -> str:
        fractions = sorted({r.fraction for r in self.rows}, reverse=True)
        models = sorted({r.model for r in self.rows})
        cells = {(r.model, r.fraction): format_cell(r.mean, r.std) for r in self.rows}
        header = ["Model"] + [f"{int(round(f * 100))}% Training Data" for f in fractions]
        body = [[m] + [cells.get((m, f), "-") for f in fractions] for m in models]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        line = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
        out = [f"Mean Test AUC ({self.task})", line(header), line(["-" * w for w in widths])]
        out += [line(row) for row in body]
        return "\n".join(out) + "\n"

    def ttests_json(self) -> str:
        return json.dumps([asdict(t) for t in self.ttests], indent=2, sort_keys=True)
