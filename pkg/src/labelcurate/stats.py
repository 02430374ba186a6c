"""
Hypothesis tests used to compare segmentation-quality samples across groups.

Shapiro-Wilk follows Royston's AS R94 algorithm. The studentized range
distribution (for Tukey's HSD) is evaluated by Gauss-Legendre quadrature of
its double-integral representation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.optimize import brentq

from .errors import DegenerateSample, SampleTooSmall

__all__ = [
    "PairwiseResult", "TestResult", "average_ranks", "dunn", "kruskal_wallis", "levene",
    "one_way_anova", "shapiro_wilk", "studentized_range_cdf", "studentized_range_ppf",
    "studentized_range_sf", "tukey_hsd", "welch_anova",
]


@dataclass(frozen=True)
class PairwiseResult:
    a: str
    b: str
    p_value: float
    # positive when group ``a`` has the larger mean (Tukey) or mean rank (Dunn)
    statistic: float


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    p_value: float
    df: tuple = ()
    pairwise: tuple[PairwiseResult, ...] = field(default=())

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")


def _clip_p(p) -> float:
    return float(min(1.0, max(0.0, p)))


def _as_groups(groups, min_size: int, labels=None):
    arrs = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(arrs) < 2:
        raise SampleTooSmall("need at least two groups")
    labels = [str(i) for i in range(len(arrs))] if labels is None else [str(l) for l in labels]
    for lab, a in zip(labels, arrs):
        if len(a) < min_size:
            raise SampleTooSmall(f"group {lab} has {len(a)} value(s), need at least {min_size}")
    return arrs, labels


# ---------------------------------------------------------------------------
# Shapiro-Wilk (AS R94)
# ---------------------------------------------------------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x):
    # coef[0] + coef[1] x + coef[2] x^2 + ...
    return sum(c * x**i for i, c in enumerate(coef))


def _sw_coefficients(n: int) -> np.ndarray:
    """Half of the antisymmetric weight vector, for the smallest order statistics."""
    nn2 = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    m = special.ndtri((np.arange(1, nn2 + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * float(np.sum(m**2))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(nn2)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
        a[1] = a2
        start = 2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1**2))
        start = 1
    a[0] = a1
    a[start:] = -m[start:] / fac
    return a


def shapiro_wilk(sample) -> TestResult:
    """Shapiro-Wilk W and its p-value (Royston 1995 normalizing approximations)."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = len(x)
    if n < 3:
        raise SampleTooSmall(f"Shapiro-Wilk needs at least 3 values, got {n}")
    if n > 5000:
        warnings.warn("Shapiro-Wilk p-values are approximate for n > 5000", stacklevel=2)
    rng = x[-1] - x[0]
    if rng < 1e-19 * max(1.0, abs(x[0])):
        raise DegenerateSample("Shapiro-Wilk is undefined for a constant sample")

    half = _sw_coefficients(n)
    coef = np.zeros(n)
    coef[: len(half)] = -half
    coef[n - len(half):] = half[::-1]

    xs = x / rng
    xc = xs - xs.mean()
    ac = coef - coef.mean()
    ssa, ssx, sax = float(ac @ ac), float(xc @ xc), float(ac @ xc)
    ssassx = math.sqrt(ssa * ssx)
    w = 1.0 - (ssassx - sax) * (ssassx + sax) / (ssa * ssx)
    w = min(w, 1.0)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return TestResult("shapiro_wilk", w, _clip_p(p))

    y = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return TestResult("shapiro_wilk", w, 1e-99)
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    p = float(special.ndtr(-(y - mean) / sd)) if y != -math.inf else 1.0
    return TestResult("shapiro_wilk", w, _clip_p(p))


# ---------------------------------------------------------------------------
# omnibus tests
# ---------------------------------------------------------------------------

def _f_result(name, num, den, dfn, dfd):
    if den == 0.0:
        stat = 0.0 if num == 0.0 else math.inf
    else:
        stat = num / den
    if stat == 0.0:
        p = 1.0
    elif math.isinf(stat):
        p = 0.0
    else:
        p = float(special.fdtrc(dfn, dfd, stat))
    return TestResult(name, float(stat), _clip_p(p), (dfn, dfd))


def levene(groups, labels=None) -> TestResult:
    """Levene's test for equal variances with mean-centred absolute deviations."""
    arrs, _ = _as_groups(groups, 2, labels)
    z = [np.abs(a - a.mean()) for a in arrs]
    return _anova_core("levene", z)


def _anova_core(name, arrs):
    k = len(arrs)
    n_total = sum(len(a) for a in arrs)
    grand = np.concatenate(arrs).mean()
    ssb = sum(len(a) * (a.mean() - grand) ** 2 for a in arrs)
    ssw = sum(float(np.sum((a - a.mean()) ** 2)) for a in arrs)
    dfn, dfd = k - 1, n_total - k
    if dfd <= 0:
        raise SampleTooSmall(f"{name} needs more observations than groups")
    return _f_result(name, ssb / dfn, ssw / dfd, dfn, dfd)


def one_way_anova(groups, labels=None) -> TestResult:
    arrs, _ = _as_groups(groups, 2, labels)
    return _anova_core("anova", arrs)


def welch_anova(groups, labels=None) -> TestResult:
    """Welch's heteroscedastic one-way ANOVA."""
    arrs, labels = _as_groups(groups, 2, labels)
    k = len(arrs)
    means = np.array([a.mean() for a in arrs])
    variances = np.array([a.var(ddof=1) for a in arrs])
    ns = np.array([len(a) for a in arrs], dtype=float)
    if np.all(variances == 0):
        if np.all(means == means[0]):
            return TestResult("welch_anova", 0.0, 1.0, (k - 1, math.inf))
        raise DegenerateSample("Welch ANOVA is undefined when every group is constant")
    if np.any(variances == 0):
        bad = [lab for lab, v in zip(labels, variances) if v == 0]
        raise DegenerateSample(f"Welch ANOVA is undefined for constant group(s) {', '.join(bad)}")
    w = ns / variances
    sw = w.sum()
    mw = float(np.sum(w * means) / sw)
    a = float(np.sum(w * (means - mw) ** 2)) / (k - 1)
    tmp = float(np.sum((1 - w / sw) ** 2 / (ns - 1)))
    b = 1 + 2 * (k - 2) / (k**2 - 1) * tmp
    df2 = (k**2 - 1) / (3 * tmp)
    return _f_result("welch_anova", a, b, k - 1, df2)


def average_ranks(values) -> tuple[np.ndarray, np.ndarray]:
    """1-based ranks with ties averaged, plus the sizes of each tie group."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    boundaries = np.flatnonzero(np.diff(sv) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(v)]))
    ranks = np.empty(len(v))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks, ends - starts


def kruskal_wallis(groups, labels=None) -> TestResult:
    """Kruskal-Wallis H with tie correction; H = 0, p = 1 when every value is tied."""
    arrs, _ = _as_groups(groups, 1, labels)
    k = len(arrs)
    n_total = sum(len(a) for a in arrs)
    if n_total < 5:
        warnings.warn("Kruskal-Wallis with fewer than 5 observations is unreliable", stacklevel=2)
    ranks, ties = average_ranks(np.concatenate(arrs))
    correction = 1.0 - float(np.sum(ties**3 - ties)) / (n_total**3 - n_total)
    if correction <= 0:
        return TestResult("kruskal_wallis", 0.0, 1.0, (k - 1,))
    h, start = 0.0, 0
    for a in arrs:
        r = ranks[start:start + len(a)]
        h += r.sum() ** 2 / len(a)
        start += len(a)
    h = 12.0 / (n_total * (n_total + 1)) * h - 3 * (n_total + 1)
    h = max(h, 0.0) / correction
    p = 1.0 if h == 0 else float(special.chdtrc(k - 1, h))
    return TestResult("kruskal_wallis", h, _clip_p(p), (k - 1,))


# ---------------------------------------------------------------------------
# studentized range distribution
# ---------------------------------------------------------------------------

def _gl_nodes(a, b, panels, order):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


_Z_NODES, _Z_WEIGHTS = _gl_nodes(-9.0, 9.0, 48, 20)
_Z_PHI = np.exp(-0.5 * _Z_NODES**2) / math.sqrt(2 * math.pi)
_Z_CDF = special.ndtr(_Z_NODES)


def _range_cdf_normal(w, k):
    """P(range of k iid standard normals < w), vectorized over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    inner = np.clip(_Z_CDF[None, :] - special.ndtr(_Z_NODES[None, :] - w[:, None]), 0.0, 1.0)
    return k * np.sum(_Z_WEIGHTS * _Z_PHI * inner ** (k - 1), axis=1)


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """CDF of the studentized range for ``k`` means and ``df`` error degrees of freedom."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if q <= 0:
        return 0.0
    if not math.isfinite(q):
        return 1.0
    if math.isinf(df) or df > 1e5:
        return _clip_p(_range_cdf_normal([q], k)[0])
    eps = 1e-14
    lo = math.sqrt(special.chdtri(df, 1 - eps) / df)
    hi = math.sqrt(special.chdtri(df, eps) / df)
    s, ws = _gl_nodes(lo, hi, 64, 16)
    log_f = (0.5 * df * math.log(df) - special.gammaln(0.5 * df) - (0.5 * df - 1) * math.log(2)
             + (df - 1) * np.log(s) - 0.5 * df * s**2)
    return _clip_p(float(np.sum(ws * np.exp(log_f) * _range_cdf_normal(q * s, k))))


def studentized_range_sf(q: float, k: int, df: float) -> float:
    return _clip_p(1.0 - studentized_range_cdf(q, k, df))


def studentized_range_ppf(p: float, k: int, df: float) -> float:
    return brentq(lambda q: studentized_range_cdf(q, k, df) - p, 1e-6, 200.0, xtol=1e-12)


# ---------------------------------------------------------------------------
# post-hoc tests
# ---------------------------------------------------------------------------

def tukey_hsd(groups, labels=None) -> TestResult:
    """Tukey-Kramer pairwise comparisons. The statistic field is the pooled MSE."""
    arrs, labels = _as_groups(groups, 2, labels)
    k = len(arrs)
    n_total = sum(len(a) for a in arrs)
    df = n_total - k
    mse = sum(float(np.sum((a - a.mean()) ** 2)) for a in arrs) / df
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = float(arrs[i].mean() - arrs[j].mean())
            se = math.sqrt(mse / 2 * (1 / len(arrs[i]) + 1 / len(arrs[j])))
            if se == 0:
                p = 1.0 if diff == 0 else 0.0
            else:
                p = studentized_range_sf(abs(diff) / se, k, df)
            pairs.append(PairwiseResult(labels[i], labels[j], p, diff))
    return TestResult("tukey_hsd", mse, 1.0 if not pairs else min(p.p_value for p in pairs),
                      (k, df), tuple(pairs))


def dunn(groups, labels=None) -> TestResult:
    """Dunn's rank-sum z tests with tie correction and Bonferroni adjustment."""
    arrs, labels = _as_groups(groups, 1, labels)
    k = len(arrs)
    n_total = sum(len(a) for a in arrs)
    ranks, ties = average_ranks(np.concatenate(arrs))
    tie_term = float(np.sum(ties**3 - ties)) / (12.0 * (n_total - 1)) if n_total > 1 else 0.0
    base_var = n_total * (n_total + 1) / 12.0 - tie_term
    mean_ranks, start = [], 0
    for a in arrs:
        mean_ranks.append(float(ranks[start:start + len(a)].mean()))
        start += len(a)
    m = k * (k - 1) // 2
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = mean_ranks[i] - mean_ranks[j]
            se = math.sqrt(max(base_var, 0.0) * (1 / len(arrs[i]) + 1 / len(arrs[j])))
            if se == 0:
                z, p = 0.0, 1.0
            else:
                z = diff / se
                p = min(1.0, m * 2.0 * float(special.ndtr(-abs(z))))
            pairs.append(PairwiseResult(labels[i], labels[j], _clip_p(p), z))
    return TestResult("dunn", float(base_var), min(p.p_value for p in pairs), (k,), tuple(pairs))
