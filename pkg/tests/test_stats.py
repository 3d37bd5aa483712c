import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from ilora import data, stats as S


def _table(x, labels=None):
    x = np.asarray(x, dtype=float)
    if labels is None:
        labels = np.arange(x.shape[0]) % 2
    return S.AbundanceTable([f"s{i}" for i in range(x.shape[0])], [f"t{j}" for j in range(x.shape[1])],
                            x, labels)


# CLR ---------------------------------------------------------------------------------

def test_clr_uniform_row_is_zero():
    np.testing.assert_allclose(S.clr_transform(np.full((1, 5), 0.2)), 0.0, atol=1e-15)


def test_clr_hand_example():
    ln2 = math.log(2)
    want = [2 / 3 * ln2, -ln2 / 3, -ln2 / 3]
    np.testing.assert_allclose(S.clr_transform(np.array([[0.5, 0.25, 0.25]]), 1e-15)[0], want, atol=1e-12)
    np.testing.assert_allclose(want, [0.4621, -0.2310, -0.2310], atol=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30))
def test_clr_rows_sum_to_zero(seed, p):
    x = np.random.default_rng(seed).dirichlet(np.ones(p), size=7)
    x[0, 0] = 0.0
    assert np.max(np.abs(S.clr_transform(x).sum(axis=1))) < 1e-12


def test_clr_rejects_bad_pseudocount():
    with pytest.raises(ValueError):
        S.clr_transform(np.ones((2, 3)), 0.0)


def test_log_ratio_is_clr_difference():
    rng = np.random.default_rng(0)
    x = rng.dirichlet(np.ones(6), size=20)
    # without closure the pseudocount lines up exactly with the stabilizer
    shifted = np.log(x + 1e-6)
    clr = shifted - shifted.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(S.log_ratio(x[:, 1], x[:, 4]), clr[:, 1] - clr[:, 4], atol=1e-12)
    z = S.clr_transform(x, 1e-6)
    closed = np.log((x[:, 1] + 1e-6) / (x[:, 4] + 1e-6))
    np.testing.assert_allclose(z[:, 1] - z[:, 4], closed, atol=1e-12)


# Spearman ----------------------------------------------------------------------------

def test_spearman_monotone_cases():
    a = np.array([0.3, 1.2, 2.0, 5.0, 9.0])
    assert S.spearman(a, np.exp(a))[0] == 1.0
    assert S.spearman(a, -a ** 3)[0] == -1.0


def test_spearman_hand_case():
    rho, p = S.spearman([1, 2, 3, 4], [2, 1, 4, 3])
    d2 = 4
    assert rho == pytest.approx(1 - 6 * d2 / (4 * 15), abs=1e-15)
    assert rho == pytest.approx(0.6, abs=1e-15)
    # exact enumeration: |rho| >= 0.6 occurs for 10 of 24 permutations
    assert p == pytest.approx(10 / 24, abs=1e-12)


def test_spearman_large_n_matches_scipy():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(60)
    b = a + rng.standard_normal(60)
    b[:5] = b[0]  # ties
    rho, p = S.spearman(a, b)
    ref = sps.spearmanr(a, b)
    assert rho == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_spearman_exact_matches_scipy_permutation():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal(7), rng.standard_normal(7)
    rho, p = S.spearman(a, b)
    ref = sps.permutation_test((b,), lambda y: sps.spearmanr(a, y).statistic, permutation_type="pairings",
                               n_resamples=np.inf, alternative="two-sided")
    assert p == pytest.approx(ref.pvalue, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(9, 40))
def test_spearman_symmetric_and_rank_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    r1, p1 = S.spearman(a, b)
    r2, p2 = S.spearman(b, a)
    r3, p3 = S.spearman(np.exp(a), b ** 3)
    assert r1 == pytest.approx(r2, abs=1e-14) and r1 == pytest.approx(r3, abs=1e-14)
    assert p1 == pytest.approx(p3, abs=1e-12)
    assert 0.0 <= p1 <= 1.0


def test_spearman_errors():
    with pytest.raises(ValueError):
        S.spearman([1, 2], [2, 1])
    with pytest.raises(ValueError):
        S.spearman([1, 1, 1, 1], [1, 2, 3, 4])


# BH ----------------------------------------------------------------------------------

def test_bh_cases():
    assert S.bh_fdr([0.03]).tolist() == [0.03]
    np.testing.assert_allclose(S.bh_fdr([0.01, 0.04, 0.03, 0.02]), [0.04] * 4, atol=1e-15)
    np.testing.assert_allclose(S.bh_fdr([0.2] * 5), [0.2] * 5, atol=1e-15)
    with pytest.raises(ValueError):
        S.bh_fdr([0.1, 1.2])


def test_bh_matches_scipy():
    p = np.random.default_rng(0).random(40) ** 3
    np.testing.assert_allclose(S.bh_fdr(p), sps.false_discovery_control(p, method="bh"), atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.001, 0.5))
def test_bh_properties(p, alpha):
    p = np.array(p)
    q = S.bh_fdr(p)
    assert np.all(q >= p - 1e-15) and np.all(q <= 1)
    order = np.argsort(p, kind="mergesort")
    assert np.all(np.diff(q[order]) >= -1e-15)
    # p * m / i and alpha * i / m round differently when a q-value sits exactly on alpha
    assume(np.all(np.abs(q - alpha) > 1e-12 * alpha))
    np.testing.assert_array_equal(q <= alpha, S.bh_reject(p, alpha))


# logistic ----------------------------------------------------------------------------

def test_logistic_symmetric_design():
    fit = S.logistic_with_fallback([1, 1, -1, -1], [1, 0, 1, 0])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert not fit.firth


def test_logistic_separation_uses_firth():
    plain = S.fit_logistic(np.array([-1.0, -1, 1, 1]), np.array([0.0, 0, 1, 1]))
    assert not plain.converged or abs(plain.slope) > S.SEPARATION_SLOPE
    fit = S.logistic_with_fallback([-1, -1, 1, 1], [0, 0, 1, 1])
    assert fit.firth and np.isfinite(fit.slope) and fit.slope > 0


def test_firth_matches_penalized_likelihood_maximum():
    s, y = np.array([-1.0, -1, 1, 1]), np.array([0.0, 0, 1, 1])
    fit = S.fit_firth(s, y)
    X = np.column_stack([np.ones(4), s])

    def pen(a, b):
        eta = a + b * s
        p = 1 / (1 + np.exp(-eta))
        info = X.T @ (X * (p * (1 - p))[:, None])
        return np.sum(y * eta - np.logaddexp(0, eta)) + 0.5 * np.log(np.linalg.det(info))

    grid = np.linspace(-3, 6, 901)
    best = max(((pen(0.0, b), b) for b in grid))[1]
    assert fit.intercept == pytest.approx(0.0, abs=1e-8)
    assert abs(fit.slope - best) < 0.01


def _grid_mle(s, y, lo=-5.0, hi=5.0, points=201, rounds=6):
    def ll(a, b):
        eta = a[..., None] + b[..., None] * s
        return np.sum(y * eta - np.logaddexp(0, eta), axis=-1)

    alo = blo = lo
    ahi = bhi = hi
    for _ in range(rounds):
        A, B = np.meshgrid(np.linspace(alo, ahi, points), np.linspace(blo, bhi, points), indexing="ij")
        i = np.unravel_index(np.argmax(ll(A, B)), A.shape)
        a, b = A[i], B[i]
        da, db = (ahi - alo) / (points - 1), (bhi - blo) / (points - 1)
        alo, ahi, blo, bhi = a - 2 * da, a + 2 * da, b - 2 * db, b + 2 * db
    return a, b


def test_irls_matches_grid_mle():
    rng = np.random.default_rng(6)
    s = rng.standard_normal(20)
    y = (rng.random(20) < 1 / (1 + np.exp(-(0.2 + 1.5 * s)))).astype(float)
    fit = S.logistic_with_fallback(s, y)
    a, b = _grid_mle(s, y)
    assert not fit.firth
    assert abs(fit.slope - b) < 1e-3 and abs(fit.intercept - a) < 1e-3
    ref = sps.norm.sf(abs(fit.slope / fit.se_slope)) * 2
    assert fit.pvalue == pytest.approx(ref, rel=1e-9)


def test_logistic_errors():
    with pytest.raises(ValueError):
        S.logistic_with_fallback([1, 2, 3], [1, 1, 1])
    with pytest.raises(ValueError):
        S.logistic_with_fallback([2, 2, 2, 2], [0, 1, 0, 1])
    with pytest.raises(ValueError):
        S.log_ratio([0.1], [0.2], eps=0.0)


# reference set -----------------------------------------------------------------------

def test_planted_pairs_recovered():
    table = data.planted_abundance_table(seed=0)
    ref = S.build_reference(table, 0.05)
    assert ref.e_gt == {(0, 1), (2, 3), (4, 5)}
    assert ref.e_gt <= ref.e_spear and ref.e_gt <= ref.e_ratio
    assert ref.e_gt == ref.e_spear & ref.e_ratio


def test_planted_recovery_rate_across_seeds():
    hits = sum(S.build_reference(data.planted_abundance_table(seed=s), 0.05).e_gt == {(0, 1), (2, 3), (4, 5)}
               for s in range(10))
    assert hits >= 9


def test_vacuous_threshold_keeps_everything():
    table = data.planted_abundance_table(n=40, n_taxa=6, pairs=((0, 1),), seed=2)
    ref = S.build_reference(table, 1.0)
    assert ref.e_gt == set(itertools.combinations(range(6), 2))
    assert ref.counts() == {"E_spear": 15, "E_ratio": 15, "E_GT": 15}


def test_disjoint_families_give_empty_intersection():
    ref = S.ReferenceEdgeSet([], [], {(0, 1)}, {(2, 3)}, {(0, 1)} & {(2, 3)})
    assert ref.e_gt == set()


def test_build_reference_validation():
    table = data.planted_abundance_table(n=20, n_taxa=4, pairs=((0, 1),), seed=0)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            S.build_reference(table, bad)
    with pytest.raises(ValueError):
        _table([[0.5, 0.5], [-0.1, 1.1]])
    with pytest.raises(ValueError):
        _table([[1.0]], [0])


def test_pair_results_carry_valid_q():
    ref = S.build_reference(data.planted_abundance_table(seed=1), 0.05)
    for r in ref.spearman + ref.ratio:
        assert 0 <= r.pvalue <= r.qvalue <= 1
