"""PCA + total-variation decomposition of a single pathological image.

The image minus the PCA mean is split into a quasi-normal part that stays
close to the span of the basis and an abnormal part with small total
variation. Because the basis is orthonormal the coefficients can be
eliminated: ``min_a ||x - B a||^2 = ||P x||^2`` with ``P = I - B B^T``, which
leaves a TV problem in the abnormal part alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, NonFinite
from .grid import Grid, div_array, grad_array, gradient_norm_bound
from .pca import PcaBasis

ROF = "rof"
TVL1 = "tvl1"

# gamma presets
GAMMA_GRID_2D = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
GAMMA_GRID_3D = (1.0, 1.5, 2.0, 2.5, 3.0)
GAMMA_NO_REG = 5.0
GAMMA_WITH_REG = 2.0

IRLS_ITERS = 20
IRLS_EPS = 1e-6
TVL1_ALPHA_EVERY = 50


@dataclass(frozen=True)
class SolverParams:
    max_iter: int = 2000
    tol: float = 1e-6
    tau: float | None = None
    sigma: float | None = None
    theta: float = 1.0
    warm_start: bool = False

    def steps(self, ndim, spacing):
        """Resolved ``(tau, sigma)``; defaults to ``1/L`` each."""
        lip2 = gradient_norm_bound(ndim, spacing)
        tau = self.tau if self.tau is not None else 1.0 / math.sqrt(lip2)
        sigma = self.sigma if self.sigma is not None else 1.0 / math.sqrt(lip2)
        if tau <= 0 or sigma <= 0:
            raise ValueError("tau and sigma must be positive")
        if tau * sigma * lip2 > 1.0 + 1e-12:
            raise ValueError(f"tau*sigma*L^2 = {tau * sigma * lip2:.4g} > 1")
        return tau, sigma

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class DecompProblem:
    basis: PcaBasis
    image: Grid
    gamma: float
    variant: str = ROF
    solver: SolverParams = field(default_factory=SolverParams)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.variant not in (ROF, TVL1):
            raise ValueError(f"unknown variant {self.variant!r}")
        self.basis.check_image(self.image)


@dataclass(eq=False)
class DecompResult:
    quasi_normal: Grid
    abnormal: Grid
    alpha: np.ndarray
    energy_trace: np.ndarray
    iterations: int
    converged: bool
    # one (iterations, converged, final energy) entry per inner solve
    inner: list = field(default_factory=list)
    peak_bytes: int = 0
    # abnormal part after each step (0..N) of iterative regularization
    step_abnormal: list = field(default_factory=list)


class _Operators:
    """Basis columns laid out to match a C-order ravel of the image array."""

    def __init__(self, basis: PcaBasis):
        self.shape = basis.dims
        k = basis.k
        m = int(np.prod(self.shape))
        self.B = np.ascontiguousarray(
            basis.modes.reshape(self.shape + (k,), order="F").reshape(m, k)
        )

    @property
    def nbytes(self):
        return self.B.nbytes

    def coeffs(self, x):
        return self.B.T @ x.reshape(-1)

    def span(self, alpha):
        return (self.B @ alpha).reshape(self.shape)

    def off_span(self, x):
        """``P x = x - B B^T x``."""
        if self.B.shape[1] == 0:
            return x.copy()
        return x - self.span(self.coeffs(x))


def _project_unit_balls(p):
    nrm = np.sqrt(np.sum(p * p, axis=0))
    np.maximum(nrm, 1.0, out=nrm)
    p /= nrm


def _tv_from_grad(g):
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))


def _pdhg(f, spacing, prox, energy, params: SolverParams, state=None, alpha_hook=None,
          resident=0):
    """Chambolle-Pock iterations for ``min_S G(S) + TV(S)``.

    ``prox(v, tau)`` returns ``(S, aux)`` and ``energy(S, grad_S, aux)`` the
    objective. ``alpha_hook(S, it)``, when given, may update the data term
    between iterations and returns True when its own state has settled.

    The raw PDHG objective oscillates slightly, so the lowest-energy iterate
    seen so far is what gets returned and what the trace records.
    ``resident`` counts bytes held outside the loop (the basis) for the
    peak working-set figure.
    Returns ``(S_best, (S, p), trace, iterations, converged, peak_bytes)``.
    """
    tau, sigma = params.steps(f.ndim, spacing)
    theta = params.theta
    if state is not None:
        S, p = state[0].copy(), state[1].copy()
    else:
        S = np.zeros_like(f)
        p = np.zeros((f.ndim,) + f.shape)
    gS = grad_array(S, spacing)
    gbar = gS
    scale = float(np.linalg.norm(f))
    trace = []
    converged = False
    best, best_e = S, math.inf
    energy_prev = None
    it = 0
    for it in range(1, params.max_iter + 1):
        p_old = p.copy()
        p += sigma * gbar
        _project_unit_balls(p)
        v = S + tau * div_array(p, spacing)
        S_new, aux = prox(v, tau)
        g_new = grad_array(S_new, spacing)
        if it == 1:
            live = (f, S, p, p_old, v, S_new, g_new, gS, gbar, best)
            peak = resident + sum(a.nbytes for a in live) + (aux.nbytes if aux is not None else 0)
        gbar = g_new + theta * (g_new - gS) if theta else g_new
        dS = float(np.linalg.norm(S_new - S))
        dp = float(np.linalg.norm(p - p_old))
        S, gS = S_new, g_new
        e = energy(S, gS, aux)
        if not math.isfinite(e) or not np.all(np.isfinite(S)):
            raise NonFinite(f"PDHG iterate diverged at iteration {it}")
        if e <= best_e:
            best, best_e = S, e
        trace.append(best_e)
        settled = True
        if alpha_hook is not None:
            settled = alpha_hook(S, it)
        small_step = (
            dS <= params.tol * max(float(np.linalg.norm(S)), scale)
            and dp <= params.tol * float(np.linalg.norm(p))
        )
        flat_energy = energy_prev is not None and abs(e - energy_prev) <= params.tol * (
            1.0 + abs(e)
        )
        energy_prev = e
        if settled and ((small_step and flat_energy) or (dS == 0.0 and dp == 0.0)):
            converged = True
            break
    return best, (S, p), np.asarray(trace), it, converged, peak


def _centered(problem: DecompProblem):
    b = problem.basis
    return problem.image.data - b.mean.data


def _finish(problem, S, alpha, trace, iters, converged, inner=None, peak=0, history=None):
    abnormal = problem.image.like(S)
    quasi = problem.image.like(problem.image.data - S)
    return DecompResult(
        quasi_normal=quasi,
        abnormal=abnormal,
        alpha=alpha,
        energy_trace=trace,
        iterations=iters,
        converged=converged,
        inner=inner if inner is not None else [(iters, converged, _last(trace))],
        peak_bytes=int(peak),
        step_abnormal=history if history is not None else [abnormal],
    )


def _last(trace):
    return float(trace[-1]) if len(trace) else float("nan")


def rof_objective(ops: _Operators, f, S, gamma, spacing):
    """``gamma/2 ||P(f - S)||^2 + TV(S)`` evaluated directly."""
    r = ops.off_span(f - S)
    return 0.5 * gamma * float(np.sum(r * r)) + _tv_from_grad(grad_array(S, spacing))


def _solve_rof(ops, f, gamma, spacing, params, state=None):
    def prox(v, tau):
        c = tau * gamma / (1.0 + tau * gamma)
        pw = ops.off_span(v - f)
        return v - c * pw, (1.0 - c) * pw

    def energy(S, gS, resid):
        # resid = P(S - f) by construction of the prox
        return 0.5 * gamma * float(np.sum(resid * resid)) + _tv_from_grad(gS)

    return _pdhg(f, spacing, prox, energy, params, state=state, resident=ops.nbytes)


def decompose_rof(problem: DecompProblem) -> DecompResult:
    """Minimize ``gamma/2 ||I_hat - S - B a||^2 + ||grad S||_{2,1}`` over ``(S, a)``."""
    if problem.variant != ROF:
        raise ValueError("decompose_rof needs variant='rof'")
    ops = _Operators(problem.basis)
    f = _centered(problem)
    S, _, trace, iters, conv, peak = _solve_rof(
        ops, f, problem.gamma, problem.image.spacing, problem.solver
    )
    alpha = ops.coeffs(f - S)
    return _finish(problem, S, alpha, trace, iters, conv, peak=peak)


def iterative_regularize(problem: DecompProblem, steps: int) -> DecompResult:
    """ROF decomposition followed by ``steps`` add-back-the-residual passes.

    Step k solves the ROF problem on ``I_hat + L_{k-1} - B a_{k-1}``; the
    returned quasi-normal image is ``image - S_N``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if problem.variant != ROF:
        raise ValueError("iterative regularization is defined for the ROF model")
    if steps == 0:
        return decompose_rof(problem)
    ops = _Operators(problem.basis)
    f = _centered(problem)
    spacing = problem.image.spacing
    params = problem.solver
    S, state, trace, iters, conv, peak = _solve_rof(ops, f, problem.gamma, spacing, params)
    inner = [(iters, conv, _last(trace))]
    history = [problem.image.like(S)]
    total = iters
    L_tilde = f - S
    for _ in range(steps):
        f_k = f + ops.off_span(L_tilde)
        start = state if params.warm_start else None
        S, state, trace, iters, c, pk = _solve_rof(ops, f_k, problem.gamma, spacing, params, start)
        peak = max(peak, pk + f_k.nbytes + L_tilde.nbytes)
        inner.append((iters, c, _last(trace)))
        history.append(problem.image.like(S))
        total += iters
        L_tilde = f_k - S
    alpha = ops.coeffs(L_tilde)
    return _finish(
        problem, S, alpha, trace, total, all(e[1] for e in inner), inner=inner, peak=peak,
        history=history,
    )


def _irls_l1(B, y, alpha0, iters=IRLS_ITERS, eps=IRLS_EPS):
    """Approximate ``argmin_a ||y - B a||_1`` by reweighted least squares."""
    alpha = alpha0.copy()
    for _ in range(iters):
        r = y - B @ alpha
        w = 1.0 / np.sqrt(r * r + eps * eps)
        BtW = B.T * w
        try:
            alpha = np.linalg.solve(BtW @ B, BtW @ y)
        except np.linalg.LinAlgError:
            alpha = np.linalg.lstsq(BtW @ B, BtW @ y, rcond=None)[0]
    return alpha


def tvl1_objective(ops, f, S, alpha, gamma, spacing):
    r = f - S - ops.span(alpha) if alpha.size else f - S
    return gamma * float(np.sum(np.abs(r))) + _tv_from_grad(grad_array(S, spacing))


def decompose_tvl1(problem: DecompProblem) -> DecompResult:
    """Approximate minimizer of ``gamma ||I_hat - S - B a||_1 + ||grad S||_{2,1}``.

    Experimental: PDHG in ``S`` with the L1 data prox, alternated every
    few dozen iterations with an IRLS refit of ``a``. No global optimality
    guarantee for the joint problem.
    """
    if problem.variant != TVL1:
        raise ValueError("decompose_tvl1 needs variant='tvl1'")
    ops = _Operators(problem.basis)
    f = _centered(problem)
    gamma = problem.gamma
    k = ops.B.shape[1]
    box = {"alpha": np.zeros(k), "target": f.copy(), "settled": k == 0}
    if k:
        box["alpha"] = _irls_l1(ops.B, f.reshape(-1), ops.coeffs(f))
        box["target"] = f - ops.span(box["alpha"])

    def prox(v, tau):
        t = box["target"]
        d = v - t
        S = t + np.sign(d) * np.maximum(np.abs(d) - tau * gamma, 0.0)
        return S, None

    def energy(S, gS, _):
        return gamma * float(np.sum(np.abs(box["target"] - S))) + _tv_from_grad(gS)

    def alpha_hook(S, it):
        if k == 0 or it % TVL1_ALPHA_EVERY:
            return box["settled"]
        old = box["alpha"]
        new = _irls_l1(ops.B, (f - S).reshape(-1), old)
        box["alpha"] = new
        box["target"] = f - ops.span(new)
        box["settled"] = float(np.linalg.norm(new - old)) <= problem.solver.tol * (
            1.0 + float(np.linalg.norm(new))
        )
        return box["settled"]

    S, _, trace, iters, conv, peak = _pdhg(
        f, problem.image.spacing, prox, energy, problem.solver, alpha_hook=alpha_hook,
        resident=ops.nbytes,
    )
    return _finish(problem, S, box["alpha"], trace, iters, conv, peak=peak)


def decompose(problem: DecompProblem, steps: int = 0) -> DecompResult:
    """Dispatch on the problem variant; ``steps`` applies to ROF only."""
    if problem.variant == TVL1:
        if steps:
            raise ValueError("regularization steps are only defined for the ROF model")
        return decompose_tvl1(problem)
    return iterative_regularize(problem, steps)


def abnormality_mask(result: DecompResult, threshold: float) -> Grid:
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    s = result.abnormal
    return s.like((np.abs(s.data) > threshold).astype(np.float64))


def with_gamma(problem: DecompProblem, gamma) -> DecompProblem:
    return replace(problem, gamma=gamma)
