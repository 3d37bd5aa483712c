"""Cohort-level reference edges from compositional abundance tables.

Two screens run over every taxon pair: Spearman correlation of CLR
coordinates, and a univariate logistic regression of the label on the pair's
log-ratio. Each family is BH-adjusted; the reference set is the intersection
of the two significant sets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import rankdata


@dataclass
class AbundanceTable:
    sample_ids: list[str]
    taxa: list[str]
    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        n, p = self.x.shape
        if len(self.sample_ids) != n or len(self.taxa) != p or self.labels.shape != (n,):
            raise ValueError("table dimensions do not match ids/labels")
        if p < 2:
            raise ValueError("need at least two taxa")
        if np.any(self.x < 0):
            raise ValueError("abundances must be nonnegative")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise ValueError("labels must be 0/1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def column(self, taxon: str) -> np.ndarray:
        return self.x[:, self.taxa.index(taxon)]

    def select(self, taxa: list[str]) -> "AbundanceTable":
        idx = [self.taxa.index(t) for t in taxa]
        return AbundanceTable(list(self.sample_ids), list(taxa), self.x[:, idx], self.labels.copy())


@dataclass
class PairTestResult:
    pair: tuple[int, int]
    statistic: float
    pvalue: float
    qvalue: float = float("nan")
    direction: int = 0
    firth: bool = False


@dataclass
class ReferenceEdgeSet:
    spearman: list[PairTestResult]
    ratio: list[PairTestResult]
    e_spear: set[tuple[int, int]] = field(default_factory=set)
    e_ratio: set[tuple[int, int]] = field(default_factory=set)
    e_gt: set[tuple[int, int]] = field(default_factory=set)
    fdr: float = 0.05

    def counts(self) -> dict[str, int]:
        return {"E_spear": len(self.e_spear), "E_ratio": len(self.e_ratio), "E_GT": len(self.e_gt)}


# transforms ---------------------------------------------------------------------

def clr_transform(x, pseudocount: float = 1e-6) -> np.ndarray:
    """Centered log-ratio of each row after adding ``pseudocount`` and closing to 1."""
    if pseudocount <= 0:
        raise ValueError("pseudocount must be positive")
    x = np.asarray(x.x if isinstance(x, AbundanceTable) else x, dtype=np.float64)
    shifted = x + pseudocount
    closed = shifted / shifted.sum(axis=-1, keepdims=True)
    logs = np.log(closed)
    return logs - logs.mean(axis=-1, keepdims=True)


def log_ratio(x_a, x_b, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("stabilizer must be positive")
    return np.log(np.asarray(x_a) + eps) - np.log(np.asarray(x_b) + eps)


# Spearman -----------------------------------------------------------------------

def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


EXACT_MAX_N = 8


def spearman(a, b) -> tuple[float, float]:
    """Rank correlation (mid-ranks for ties) and two-sided p-value.

    For n <= 8 the p-value enumerates all permutations; otherwise it uses the
    t approximation with n - 2 degrees of freedom.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    if n < 3 or b.size != n:
        raise ValueError("need two vectors of equal length >= 3")
    ra, rb = rankdata(a), rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        raise ValueError("zero rank variance")
    rho = max(-1.0, min(1.0, _pearson(ra, rb)))
    if n <= EXACT_MAX_N:
        rc = ra - ra.mean()
        denom = math.sqrt(np.dot(rc, rc) * np.dot(rb - rb.mean(), rb - rb.mean()))
        rbc = rb - rb.mean()
        hits = 0
        total = 0
        for perm in itertools.permutations(range(n)):
            r = np.dot(rc, rbc[list(perm)]) / denom
            hits += abs(r) >= abs(rho) - 1e-12
            total += 1
        return rho, hits / total
    if abs(rho) >= 1.0:
        return rho, 0.0
    df = n - 2
    t = rho * math.sqrt(df / (1.0 - rho * rho))
    return rho, float(min(1.0, 2.0 * special.stdtr(df, -abs(t))))


# multiple testing ---------------------------------------------------------------

def bh_fdr(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values in the input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def bh_reject(pvals, alpha: float) -> np.ndarray:
    """Classic step-up rule: reject the k smallest, k the largest i with p_(i) <= i alpha / m."""
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="mergesort")
    below = np.nonzero(p[order] <= alpha * np.arange(1, m + 1) / m)[0]
    out = np.zeros(m, dtype=bool)
    if below.size:
        out[order[: below[-1] + 1]] = True
    return out


# logistic regression ------------------------------------------------------------

class SeparationError(RuntimeError):
    pass


@dataclass
class LogisticFit:
    intercept: float
    slope: float
    se_slope: float
    pvalue: float
    iterations: int
    converged: bool
    firth: bool


def _sigmoid(z):
    return special.expit(z)


def _wald_p(beta: float, se: float) -> float:
    if not np.isfinite(se) or se <= 0:
        return 1.0
    return float(2.0 * special.ndtr(-abs(beta / se)))


def fit_logistic(s, y, max_iter: int = 50, tol: float = 1e-8) -> LogisticFit:
    """Newton/IRLS for Pr(y=1|s) = sigmoid(alpha + beta s)."""
    X = np.column_stack([np.ones_like(s), s])
    beta = np.zeros(2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(X @ beta)
        score = X.T @ (y - p)
        if np.linalg.norm(score) < tol:
            converged = True
            break
        w = p * (1 - p)
        info = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if not np.all(np.isfinite(beta)) or abs(beta[1]) > 1e3:
            break
    p = _sigmoid(X @ beta)
    info = X.T @ (X * (p * (1 - p))[:, None])
    try:
        se = float(np.sqrt(np.linalg.inv(info)[1, 1]))
    except np.linalg.LinAlgError:
        se = float("inf")
    return LogisticFit(float(beta[0]), float(beta[1]), se, _wald_p(beta[1], se), it, converged, False)


def fit_firth(s, y, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    """Jeffreys-penalized logistic regression with step halving."""
    X = np.column_stack([np.ones_like(s), s])

    def penalized(beta):
        eta = X @ beta
        p = _sigmoid(eta)
        info = X.T @ (X * (p * (1 - p))[:, None])
        sign, logdet = np.linalg.slogdet(info)
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        return ll + 0.5 * logdet if sign > 0 else -np.inf

    beta = np.zeros(2)
    converged = False
    it = 0
    current = penalized(beta)
    for it in range(1, max_iter + 1):
        p = _sigmoid(X @ beta)
        w = p * (1 - p)
        info = X.T @ (X * w[:, None])
        inv = np.linalg.inv(info)
        h = w * np.einsum("ij,jk,ik->i", X, inv, X)
        score = X.T @ (y - p + h * (0.5 - p))
        if np.linalg.norm(score) < tol:
            converged = True
            break
        step = inv @ score
        t = 1.0
        while t > 1e-8:
            cand = beta + t * step
            val = penalized(cand)
            if val >= current - 1e-12:
                break
            t *= 0.5
        beta, current = cand, val
    p = _sigmoid(X @ beta)
    info = X.T @ (X * (p * (1 - p))[:, None])
    se = float(np.sqrt(np.linalg.inv(info)[1, 1]))
    return LogisticFit(float(beta[0]), float(beta[1]), se, _wald_p(beta[1], se), it, converged, True)


SEPARATION_SLOPE = 20.0


def logistic_with_fallback(s, y) -> LogisticFit:
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise ValueError("both label classes are required")
    if np.ptp(s) == 0:
        raise ValueError("log-ratio feature is constant")
    fit = fit_logistic(s, y)
    if fit.converged and abs(fit.slope) <= SEPARATION_SLOPE:
        return fit
    return fit_firth(s, y)


def logratio_logistic(table: AbundanceTable, pair: tuple[int, int], eps: float = 1e-6) -> PairTestResult:
    a, b = pair
    s = log_ratio(table.x[:, a], table.x[:, b], eps)
    fit = logistic_with_fallback(s, table.labels)
    return PairTestResult((a, b), fit.slope, fit.pvalue, direction=int(np.sign(fit.slope)), firth=fit.firth)


# reference set ------------------------------------------------------------------

def build_reference(table: AbundanceTable, fdr: float = 0.05, pseudocount: float = 1e-6,
                    eps: float = 1e-6) -> ReferenceEdgeSet:
    """Intersect CLR-Spearman and log-ratio-logistic significant pairs.

    A pair is significant when its BH q-value is below ``fdr``; ``fdr = 1``
    keeps every testable pair.
    """
    if not 0 < fdr <= 1:
        raise ValueError("fdr must lie in (0, 1]")
    z = clr_transform(table, pseudocount)
    pairs = list(itertools.combinations(range(table.p), 2))
    spear = []
    for a, b in pairs:
        rho, pv = spearman(z[:, a], z[:, b])
        spear.append(PairTestResult((a, b), rho, pv, direction=int(np.sign(rho))))
    ratio = [logratio_logistic(table, pr, eps) for pr in pairs]
    for family in (spear, ratio):
        q = bh_fdr([r.pvalue for r in family])
        for r, qv in zip(family, q):
            r.qvalue = float(qv)

    def keep(r):
        return fdr >= 1 or r.qvalue < fdr

    e_spear = {r.pair for r in spear if keep(r)}
    e_ratio = {r.pair for r in ratio if keep(r)}
    return ReferenceEdgeSet(spear, ratio, e_spear, e_ratio, e_spear & e_ratio, fdr)
