import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from problems import small_rof_problem
from quasinormal.decomp import (
    DecompProblem,
    SolverParams,
    _Operators,
    abnormality_mask,
    decompose,
    decompose_rof,
    decompose_tvl1,
    iterative_regularize,
    rof_objective,
    with_gamma,
)
from quasinormal.errors import DimensionMismatch
from quasinormal.grid import Grid, tv_array
from quasinormal.pca import PcaBasis, build_basis
from quasinormal.synth import dice

cvxpy = pytest.importorskip("cvxpy")


def basis_8x8(seed=0, k=3, n=6):
    rng = np.random.default_rng(seed)
    return build_basis([Grid(rng.normal(size=(8, 8))) for _ in range(n)], k)


def empty_basis(dims):
    m = int(np.prod(dims))
    return PcaBasis(Grid(np.zeros(dims)), np.zeros((m, 0)), np.zeros(0), 0)


def test_in_span_gives_zero_abnormal():
    b = basis_8x8()
    img = b.mean.like(b.mean.data + b.mode(0).data)
    res = decompose_rof(DecompProblem(b, img, 1.0))
    assert np.max(np.abs(res.abnormal.data)) <= 1e-6
    assert np.allclose(res.alpha, [1.0, 0.0, 0.0], atol=1e-6)
    assert res.energy_trace[-1] <= 1e-10


def test_mean_image_gives_zero():
    b = basis_8x8()
    res = decompose_rof(DecompProblem(b, b.mean, 2.0))
    assert not res.abnormal.data.any()
    assert np.allclose(res.alpha, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_rof_matches_convex_solver(seed):
    prob = small_rof_problem(seed)
    res = decompose_rof(prob)
    f = prob.image.data - prob.basis.mean.data
    S = cvxpy.Variable((8, 8))
    a = cvxpy.Variable(prob.basis.k)
    modes = [prob.basis.mode(l).data for l in range(prob.basis.k)]
    gx = cvxpy.vstack([S[1:, :] - S[:-1, :], np.zeros((1, 8))])
    gy = cvxpy.hstack([S[:, 1:] - S[:, :-1], np.zeros((8, 1))])
    tv = cvxpy.sum(cvxpy.norm(cvxpy.vstack([cvxpy.vec(gx, order="F"),
                                            cvxpy.vec(gy, order="F")]), 2, axis=0))
    resid = f - S - sum(a[l] * modes[l] for l in range(len(modes)))
    obj = prob.gamma / 2 * cvxpy.sum_squares(resid) + tv
    ref = cvxpy.Problem(cvxpy.Minimize(obj)).solve(solver="CLARABEL")
    assert res.energy_trace[-1] == pytest.approx(ref, rel=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_trace_monotone_and_attained(seed):
    prob = small_rof_problem(seed)
    res = decompose_rof(prob)
    tr = res.energy_trace
    assert np.all(np.diff(tr[10:]) <= 1e-7)
    ops = _Operators(prob.basis)
    f = prob.image.data - prob.basis.mean.data
    direct = rof_objective(ops, f, res.abnormal.data, prob.gamma, prob.image.spacing)
    assert direct == pytest.approx(tr[-1], rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_conservation(seed):
    prob = small_rof_problem(seed)
    for steps in (0, 2):
        res = iterative_regularize(prob, steps)
        total = res.quasi_normal.data + res.abnormal.data
        assert np.max(np.abs(total - prob.image.data)) <= 1e-9


def test_steps_zero_is_bitwise_rof():
    prob = small_rof_problem(3)
    a = decompose_rof(prob)
    b = iterative_regularize(prob, 0)
    assert np.array_equal(a.abnormal.data, b.abnormal.data)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.energy_trace, b.energy_trace)


@pytest.mark.parametrize("steps", [0, 1, 2, 3])
def test_span_fixed_point_every_step(steps):
    b = basis_8x8(1)
    rng = np.random.default_rng(steps)
    alpha = rng.normal(size=b.k)
    img = b.mean.like(b.mean.data + (b.modes @ alpha).reshape(b.dims, order="F"))
    res = iterative_regularize(DecompProblem(b, img, 1.5), steps)
    assert np.max(np.abs(res.abnormal.data)) <= 1e-6
    for _, _, energy in res.inner:
        assert energy <= 1e-10


def test_scale_equivariance():
    prob = small_rof_problem(4, gamma=2.0, solver=SolverParams(max_iter=200000, tol=1e-10))
    c = 3.0
    f = prob.image.data - prob.basis.mean.data
    scaled = prob.image.like(prob.basis.mean.data + c * f)
    a = decompose_rof(prob)
    b = decompose_rof(DecompProblem(prob.basis, scaled, prob.gamma / c, solver=prob.solver))
    assert np.max(np.abs(b.abnormal.data - c * a.abnormal.data)) <= 1e-5 * c
    assert np.allclose(b.alpha, c * a.alpha, atol=1e-5 * c)


def test_large_gamma_absorbs_off_span_residual():
    prob = small_rof_problem(5, solver=SolverParams(max_iter=20000))
    res = decompose_rof(with_gamma(prob, 1e6))
    ops = _Operators(prob.basis)
    f = prob.image.data - prob.basis.mean.data
    off = ops.off_span(f - res.abnormal.data)
    assert np.linalg.norm(off) <= 1e-3 * np.linalg.norm(ops.off_span(f))


def test_small_gamma_flattens_abnormal():
    prob = small_rof_problem(6)
    res = decompose_rof(with_gamma(prob, 1e-3))
    assert tv_array(res.abnormal.data, (1.0, 1.0)) <= 1e-6
    assert np.ptp(res.abnormal.data) <= 1e-6


def test_tvl1_in_span():
    b = basis_8x8(2)
    img = b.mean.like(b.mean.data - 2.0 * b.mode(1).data)
    res = decompose_tvl1(DecompProblem(b, img, 1.0, "tvl1"))
    assert np.max(np.abs(res.abnormal.data)) <= 1e-6
    assert res.energy_trace[-1] <= 1e-5


def test_tvl1_without_basis_matches_convex_solver():
    rng = np.random.default_rng(7)
    dims = (8, 8)
    img = Grid(rng.normal(size=dims))
    gamma = 0.8
    solver = SolverParams(max_iter=50000, tol=1e-9)
    res = decompose_tvl1(DecompProblem(empty_basis(dims), img, gamma, "tvl1", solver))
    S = cvxpy.Variable(dims)
    gx = cvxpy.vstack([S[1:, :] - S[:-1, :], np.zeros((1, 8))])
    gy = cvxpy.hstack([S[:, 1:] - S[:, :-1], np.zeros((8, 1))])
    tv = cvxpy.sum(cvxpy.norm(cvxpy.vstack([cvxpy.vec(gx, order="F"),
                                            cvxpy.vec(gy, order="F")]), 2, axis=0))
    ref = cvxpy.Problem(cvxpy.Minimize(gamma * cvxpy.sum(cvxpy.abs(img.data - S)) + tv)).solve(
        solver="CLARABEL"
    )
    assert abs(res.energy_trace[-1] - ref) <= 1e-4 * max(1.0, abs(ref))


def test_tvl1_large_gamma_fits_everything():
    b = basis_8x8(3, k=2)
    rng = np.random.default_rng(8)
    img = Grid(rng.normal(size=(8, 8)))
    res = decompose_tvl1(DecompProblem(b, img, 1e6, "tvl1", SolverParams(max_iter=5000)))
    f = img.data - b.mean.data
    r = f - res.abnormal.data - (b.modes @ res.alpha).reshape((8, 8), order="F")
    assert np.sum(np.abs(r)) <= 1e-3


def test_decompose_dispatch_and_validation():
    prob = small_rof_problem(0)
    with pytest.raises(ValueError):
        decompose(DecompProblem(prob.basis, prob.image, 1.0, "tvl1"), steps=1)
    with pytest.raises(ValueError):
        DecompProblem(prob.basis, prob.image, 0.0)
    with pytest.raises(DimensionMismatch):
        DecompProblem(prob.basis, Grid(np.zeros((4, 4))), 1.0)
    with pytest.raises(ValueError):
        SolverParams(tau=1.0, sigma=1.0).steps(2, (1.0, 1.0))


def test_abnormality_mask_examples():
    prob = small_rof_problem(0)
    res = decompose_rof(prob)
    res.abnormal = prob.image.like(np.zeros((8, 8)))
    assert not abnormality_mask(res, 0.0).data.any()
    s = np.zeros((8, 8))
    s[2, 5] = -0.3
    res.abnormal = prob.image.like(s)
    m = abnormality_mask(res, 0.0).data
    assert m.sum() == 1 and m[2, 5] == 1
    with pytest.raises(ValueError):
        abnormality_mask(res, -1.0)


def test_disk_anomaly_mask_dice():
    """A disk added to a basis-spanned background is found by the mask."""
    rng = np.random.default_rng(11)
    dims = (32, 32)
    pop = [Grid(rng.normal(scale=0.2, size=dims)) for _ in range(20)]
    b = build_basis(pop, 10)
    bg = b.mean.data + (b.modes @ rng.normal(scale=0.5, size=10)).reshape(dims, order="F")
    yy, xx = np.meshgrid(np.arange(32), np.arange(32))
    disk = ((xx - 15) ** 2 + (yy - 17) ** 2 <= 25).astype(float)
    img = Grid(bg + 0.5 * disk)
    # gamma picked on a holdout disk elsewhere in the image
    hold = ((xx - 8) ** 2 + (yy - 22) ** 2 <= 25).astype(float)
    scores = {}
    for g in (0.5, 1.0, 1.5, 2.0, 2.5, 3.0):
        r = decompose_rof(DecompProblem(b, Grid(bg + 0.5 * hold), g))
        thr = 0.1 * np.abs(r.abnormal.data).max()
        scores[g] = dice(abnormality_mask(r, thr), Grid(hold))
    gamma = max(scores, key=scores.get)
    res = decompose_rof(DecompProblem(b, img, gamma))
    mask = abnormality_mask(res, 0.1 * np.abs(res.abnormal.data).max())
    assert dice(mask, Grid(disk)) >= 0.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(0.2, 5.0))
def test_conservation_property(seed, gamma):
    prob = small_rof_problem(seed % 1000, gamma=gamma, solver=SolverParams(max_iter=200))
    res = decompose_rof(prob)
    assert np.max(np.abs(res.quasi_normal.data + res.abnormal.data - prob.image.data)) <= 1e-9
    assert np.all(np.diff(res.energy_trace) <= 0)


def test_step_history_matches_shorter_runs():
    prob = small_rof_problem(2)
    full = iterative_regularize(prob, 2)
    assert len(full.step_abnormal) == 3
    for steps in (0, 1):
        short = iterative_regularize(prob, steps)
        assert np.array_equal(full.step_abnormal[steps].data, short.abnormal.data)
    assert np.array_equal(full.step_abnormal[-1].data, full.abnormal.data)
