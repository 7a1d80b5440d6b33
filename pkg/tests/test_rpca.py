import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasinormal.rpca import AlmParams, default_lambda, rpca, shrink, svt


def planted(seed, m=100, n=100, rank=5, frac=0.05):
    rng = np.random.default_rng(seed)
    L0 = rng.normal(size=(m, rank)) @ rng.normal(size=(rank, n))
    S0 = np.zeros((m, n))
    idx = rng.choice(m * n, int(frac * m * n), replace=False)
    S0.flat[idx] = rng.choice([-1.0, 1.0], idx.size)
    return L0, S0


def nuclear(x):
    return np.linalg.svd(x, compute_uv=False).sum()


def test_shrink_examples():
    x = np.array([[2.5, -0.5], [0.0, -3.0]])
    assert np.array_equal(shrink(x, 0.0), x)
    assert shrink(np.array([2.5]), 1.0)[0] == 1.5
    assert shrink(np.array([-0.5]), 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        shrink(x, -1.0)


def test_svt_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 4))
    assert np.max(np.abs(svt(x, 0.0) - x)) <= 1e-10
    assert np.allclose(svt(np.diag([3.0, 1.0]), 2.0), np.diag([1.0, 0.0]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau=st.floats(0.0, 3.0))
def test_svt_shrinks_singular_values(seed, tau):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4)) @ np.diag([1.0, 1.0, 0.5, 0.0]) @ rng.normal(size=(4, 4))
    y = svt(x, tau)
    sx = np.linalg.svd(x, compute_uv=False)
    sy = np.linalg.svd(y, compute_uv=False)
    assert np.all(sy <= sx + 1e-10)
    assert np.linalg.matrix_rank(y, tol=1e-9) <= np.linalg.matrix_rank(x, tol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_shrink_prox_optimality(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 5))
    tau = 0.7
    y = shrink(x, tau)

    def obj(v):
        return tau * np.abs(v).sum() + 0.5 * np.sum((v - x) ** 2)

    best = obj(y)
    for _ in range(200):
        assert best <= obj(y + rng.normal(scale=0.1, size=y.shape))


@pytest.mark.parametrize("seed", range(3))
def test_svt_prox_optimality(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 6))
    tau = 1.0
    y = svt(x, tau)

    def obj(v):
        return tau * nuclear(v) + 0.5 * np.sum((v - x) ** 2)

    best = obj(y)
    for _ in range(200):
        assert best <= obj(y + rng.normal(scale=0.1, size=y.shape))


def test_rank_one_input_stays_low_rank():
    rng = np.random.default_rng(1)
    D = np.outer(rng.normal(size=40), rng.normal(size=30))
    res = rpca(D, default_lambda(D.shape))
    assert res.converged
    assert np.max(np.abs(res.sparse)) <= 1e-6
    assert np.linalg.norm(res.low_rank - D) <= 1e-6 * np.linalg.norm(D)


def test_zero_matrix():
    res = rpca(np.zeros((5, 4)), 0.5)
    assert res.iterations == 1 and res.converged
    assert not res.low_rank.any() and not res.sparse.any()


@pytest.mark.parametrize("seed", range(3))
def test_planted_recovery(seed):
    L0, S0 = planted(seed)
    res = rpca(L0 + S0, 0.1)
    assert res.converged
    assert np.linalg.norm(res.low_rank - L0) / np.linalg.norm(L0) <= 1e-4
    assert np.array_equal(res.sparse != 0, S0 != 0)
    assert res.rank_est == 5
    D = L0 + S0
    assert np.linalg.norm(D - res.low_rank - res.sparse) <= 1e-6 * np.linalg.norm(D)


def test_objective_certificate():
    rng = np.random.default_rng(5)
    L0 = rng.normal(size=(12, 2)) @ rng.normal(size=(2, 10))
    S0 = np.where(rng.random((12, 10)) < 0.1, 3.0, 0.0)
    D = L0 + S0
    lam = default_lambda(D.shape)
    res = rpca(D, lam)
    L = D - res.sparse  # exactly feasible split of the returned solution
    mine = nuclear(L) + lam * np.abs(res.sparse).sum()
    for _ in range(1000):
        Lp = L + rng.normal(scale=rng.choice([1e-3, 1e-2, 1e-1, 1.0]), size=D.shape)
        assert mine <= nuclear(Lp) + lam * np.abs(D - Lp).sum() + 1e-7


def test_residual_trend_and_peak_accounting():
    L0, S0 = planted(2)
    D = L0 + S0
    res = rpca(D, 0.1)
    trace = res.residual_trace
    assert trace[-1] < AlmParams().tol < trace[0]
    assert res.peak_bytes >= 6 * D.nbytes


@pytest.mark.xfail(strict=True, reason="inexact ALM residual is not monotone iteration to iteration")
def test_residual_monotone_per_iteration():
    for seed in range(5):
        trace = rpca(sum(planted(seed)), 0.1).residual_trace
        assert np.all(np.diff(trace) <= 1e-8)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        rpca(np.ones((3, 3)), 0.0)
    with pytest.raises(ValueError):
        rpca(np.ones(3), 1.0)
