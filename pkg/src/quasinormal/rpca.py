"""Low-rank + sparse decomposition by the inexact augmented Lagrangian method."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFinite, SvdFailure


@dataclass(frozen=True)
class AlmParams:
    mu0: float | None = None  # default 1.25 / sigma_1(D)
    rho: float = 1.5
    tol: float = 1e-7
    max_iter: int = 500
    mu_max_factor: float = 1e7


@dataclass(eq=False)
class RpcaResult:
    low_rank: np.ndarray
    sparse: np.ndarray
    rank_est: int
    iterations: int
    residual: float
    converged: bool
    residual_trace: np.ndarray
    peak_bytes: int


def default_lambda(shape):
    return 1.0 / math.sqrt(max(shape))


def shrink(x, tau):
    """Soft thresholding, the prox of ``tau * ||.||_1``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _svd(x):
    try:
        return np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from None


def svt(x, tau, _return_rank=False):
    """Singular value thresholding, the prox of ``tau * ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    U, s, Vt = _svd(x)
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    out = (U[:, :r] * s[:r]) @ Vt[:r]
    return (out, r, U.nbytes + s.nbytes + Vt.nbytes) if _return_rank else out


def rpca(d, lam=None, params: AlmParams = AlmParams()) -> RpcaResult:
    """Minimize ``||L||_* + lam ||S||_1`` subject to ``D = L + S``."""
    D = np.asarray(d, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] < 1:
        raise ValueError("D must be an m x n matrix with n >= 1")
    if not np.all(np.isfinite(D)):
        raise NonFinite("data matrix contains NaN or Inf")
    if lam is None:
        lam = default_lambda(D.shape)
    if not lam > 0:
        raise ValueError("lambda must be positive")

    norm_fro = float(np.linalg.norm(D))
    L = np.zeros_like(D)
    S = np.zeros_like(D)
    if norm_fro == 0.0:
        return RpcaResult(L, S, 0, 1, 0.0, True, np.zeros(1), 3 * D.nbytes)

    norm_two = float(_svd(D)[1][0])
    norm_inf = float(np.abs(D).max()) / lam
    Y = D / max(norm_two, norm_inf)
    mu = params.mu0 if params.mu0 is not None else 1.25 / norm_two
    mu_max = mu * params.mu_max_factor
    peak = 0
    rank = 0
    trace = []
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        T = D - S + Y / mu
        L, rank, svd_bytes = svt(T, 1.0 / mu, _return_rank=True)
        S = shrink(D - L + Y / mu, lam / mu)
        Z = D - L - S
        Y += mu * Z
        mu = min(mu * params.rho, mu_max)
        # D, L, S, Y, Z, T and the SVD factors are live together here
        peak = max(peak, 6 * D.nbytes + svd_bytes)
        res = float(np.linalg.norm(Z)) / norm_fro
        trace.append(res)
        if not math.isfinite(res):
            raise NonFinite(f"ALM diverged at iteration {it}")
        if res < params.tol:
            converged = True
            break
    return RpcaResult(L, S, rank, it, trace[-1], converged, np.asarray(trace), peak)
