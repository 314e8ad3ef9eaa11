"""One-sided paired tests of H0: E[q - p] <= margin against H1: E[q - p] > margin.

``certainty_margin`` is the margin by which watermarked posteriors must
exceed benign ones; ``significance`` is the usual test level.  They are
different quantities and both are recorded in every report.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 20000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz's method."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float, y: float | None = None) -> float:
    """I_x(a, b).  ``y`` may carry 1 - x when the caller has it without cancellation."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if y is None:
        y = 1.0 - x
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def _t_tail(t: float, df: int) -> float:
    """P(T > |t|) for Student's t with ``df`` degrees of freedom."""
    t2 = t * t
    return 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def _check_t_args(t: float, df: int) -> None:
    if int(df) != df or df < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {df}")
    if not math.isfinite(t):
        raise ValueError(f"t must be finite, got {t}")


def student_t_cdf(t: float, df: int) -> float:
    """Lower-tail probability P(T <= t)."""
    _check_t_args(t, df)
    if t == 0:
        return 0.5
    tail = _t_tail(t, df)
    return 1.0 - tail if t > 0 else tail


def student_t_sf(t: float, df: int) -> float:
    """Upper-tail probability P(T > t), accurate far into the tail."""
    _check_t_args(t, df)
    if t == 0:
        return 0.5
    tail = _t_tail(t, df)
    return tail if t > 0 else 1.0 - tail


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class PairedSample:
    """Target-class posterior of a benign image (p) and of its watermarked copy (q)."""

    p: float
    q: float

    def __post_init__(self):
        for name in ("p", "q"):
            v = getattr(self, name)
            if math.isnan(v):
                raise ValueError(f"{name} is NaN")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class TestReport:
    test_kind: str
    statistic: float
    p_value: float
    alpha: float
    significance: float
    reject_h0: bool
    sample_size: int
    mean_difference: float
    degrees_of_freedom: int | None = None
    differences: list[float] | None = field(default=None, repr=False)

    __test__ = False  # not a pytest class

    def to_dict(self, verbose: bool = False) -> dict:
        d = asdict(self)
        d["certainty_margin"] = d.pop("alpha")
        if not math.isfinite(d["statistic"]):
            # JSON has no infinities; the degenerate zero-variance case lands here.
            d["statistic"] = None
        if not verbose:
            d.pop("differences")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TestReport":
        d = dict(d)
        d["alpha"] = d.pop("certainty_margin")
        if d.get("statistic") is None:
            d["statistic"] = math.nan
        return cls(**d)


def _differences(pairs: Iterable[PairedSample | tuple[float, float]]) -> np.ndarray:
    out = []
    for i, pr in enumerate(pairs):
        p, q = (pr.p, pr.q) if isinstance(pr, PairedSample) else pr
        if math.isnan(p) or math.isnan(q):
            raise ValueError(f"pair {i} contains NaN")
        out.append(q - p)
    return np.asarray(out, dtype=np.float64)


def _check_levels(alpha: float, significance: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"certainty margin must be in [0, 1], got {alpha}")
    if not 0.0 < significance < 1.0:
        raise ValueError(f"significance must be in (0, 1), got {significance}")


def paired_t_test(pairs: Sequence, alpha: float, significance: float = 0.05) -> TestReport:
    """One-sided paired t-test of mean(q - p) > alpha."""
    _check_levels(alpha, significance)
    d = _differences(pairs)
    m = len(d)
    if m < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {m}")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        reject = mean > alpha
        stat = math.copysign(math.inf, mean - alpha) if mean != alpha else 0.0
        p_value = 0.0 if reject else 1.0
    else:
        stat = (mean - alpha) / (sd / math.sqrt(m))
        p_value = student_t_sf(stat, m - 1)
        reject = p_value < significance
    return TestReport(
        test_kind="t",
        statistic=stat,
        p_value=p_value,
        alpha=alpha,
        significance=significance,
        reject_h0=bool(reject),
        sample_size=m,
        mean_difference=mean,
        degrees_of_freedom=m - 1,
        differences=d.tolist(),
    )


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their mean rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _signed_rank_inputs(pairs, alpha: float):
    d = _differences(pairs)
    e = d - alpha
    nz = e[e != 0.0]
    if len(nz) < 5:
        raise ValueError(f"Wilcoxon test needs at least 5 nonzero differences from the margin, got {len(nz)}")
    ranks = average_ranks(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    return d, nz, ranks, w_plus


def wilcoxon_signed_rank(pairs: Sequence, alpha: float, significance: float = 0.05) -> TestReport:
    """One-sided signed-rank test of median(q - p) > alpha (normal approximation).

    Zero differences are dropped; ties get average ranks and the variance is
    tie-corrected; a 0.5 continuity correction is applied.
    """
    _check_levels(alpha, significance)
    d, nz, ranks, w_plus = _signed_rank_inputs(pairs, alpha)
    n = len(nz)
    mean_w = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(nz), return_counts=True)
    var_w = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean_w - 0.5) / math.sqrt(var_w)
    p_value = normal_sf(z)
    return TestReport(
        test_kind="wilcoxon",
        statistic=w_plus,
        p_value=p_value,
        alpha=alpha,
        significance=significance,
        reject_h0=bool(p_value < significance),
        sample_size=len(d),
        mean_difference=float(d.mean()),
        differences=d.tolist(),
    )


def run_test(kind: str, pairs: Sequence, alpha: float, significance: float) -> TestReport:
    if kind == "t":
        return paired_t_test(pairs, alpha, significance)
    if kind == "wilcoxon":
        return wilcoxon_signed_rank(pairs, alpha, significance)
    raise ValueError(f"unknown test kind {kind!r}")
