"""Matrix-free Krylov solvers: CG, preconditioned CG, MINRES, and a Lanczos
extreme-eigenvalue estimator with full reorthogonalization.

All solvers take the system as a callable ``mv(v) -> M v`` acting on arrays of
any fixed shape. Convergence is always measured on the unpreconditioned
residual relative to |b|, and the reported final residual is recomputed
explicitly from the returned solution rather than from the recurrence.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import DivergenceError

__all__ = [
    "SolveConfig",
    "SolveReport",
    "LanczosReport",
    "cg_solve",
    "minres_solve",
    "lanczos_extreme_eigs",
]


@dataclass
class SolveConfig:
    max_iterations: int = 100
    relative_tolerance: float = 1e-6
    preconditioner: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.relative_tolerance <= 0:
            raise ValueError("relative_tolerance must be positive")


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: int
    final_relative_residual: float
    converged: bool


@dataclass
class LanczosReport:
    lambda_min: float
    lambda_max: float
    iterations: int
    breakdown: bool = field(default=False)


def _check_finite(arr, iteration, solver):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{solver}: NaN/Inf iterate at iteration {iteration}", iteration)


def _finish(mv, b, x, iterations, tol):
    residual = b - mv(x)
    b_norm = np.linalg.norm(b)
    rel = float(np.linalg.norm(residual) / b_norm) if b_norm > 0 else 0.0
    return SolveReport(x, iterations, rel, rel <= tol)


def cg_solve(mv, b, x0=None, cfg=SolveConfig()):
    """Conjugate gradients for symmetric positive definite systems.

    A preconditioner in ``cfg`` must be an approximation of the system
    inverse (SPD). The stopping test uses the plain residual |b - M x| / |b|
    even when preconditioned.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return SolveReport(np.zeros_like(b), 0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    precond = cfg.preconditioner or (lambda r: r)
    r = b - mv(x)
    z = precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    iterations = 0
    for k in range(cfg.max_iterations):
        if np.linalg.norm(r) <= cfg.relative_tolerance * b_norm:
            break
        ap = mv(p)
        denom = float(np.vdot(p, ap))
        if denom <= 0 or not math.isfinite(denom):
            raise DivergenceError(f"cg: non-positive curvature at iteration {k}", k)
        alpha = rz / denom
        x = x + alpha * p
        r = r - alpha * ap
        iterations = k + 1
        _check_finite(x, iterations, "cg")
        z = precond(r)
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return _finish(mv, b, x, iterations, cfg.relative_tolerance)


def minres_solve(mv, b, x0=None, cfg=SolveConfig()):
    """MINRES for symmetric (possibly indefinite) systems.

    Unpreconditioned; the residual norm is non-increasing by construction.
    """
    if cfg.preconditioner is not None:
        raise ValueError("minres_solve does not support preconditioning")
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return SolveReport(np.zeros_like(b), 0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - mv(x)
    beta = float(np.linalg.norm(r))
    if beta == 0.0:
        return SolveReport(x, 0, 0.0, True)
    v = r / beta
    v_old = np.zeros_like(b)
    w = np.zeros_like(b)
    w_old = np.zeros_like(b)
    cos, cos_old = 1.0, 1.0
    sin, sin_old = 0.0, 0.0
    eta = beta
    rnorm = beta
    iterations = 0
    for k in range(cfg.max_iterations):
        p = mv(v)
        alpha = float(np.vdot(v, p))
        p = p - alpha * v - beta * v_old
        beta_new = float(np.linalg.norm(p))
        # previous Givens rotations applied to the new tridiagonal column
        rho1 = cos * alpha - cos_old * sin * beta
        rho2 = sin * alpha + cos_old * cos * beta
        rho3 = sin_old * beta
        rho1_hat = math.hypot(rho1, beta_new)
        if rho1_hat == 0.0:
            break
        cos_old, sin_old = cos, sin
        cos = rho1 / rho1_hat
        sin = beta_new / rho1_hat
        w_new = (v - rho3 * w_old - rho2 * w) / rho1_hat
        x = x + (cos * eta) * w_new
        iterations = k + 1
        _check_finite(x, iterations, "minres")
        eta = -sin * eta
        rnorm = abs(sin) * rnorm
        w_old, w = w, w_new
        v_old = v
        if beta_new == 0.0:
            break
        v = p / beta_new
        beta = beta_new
        if rnorm <= cfg.relative_tolerance * b_norm:
            break
    return _finish(mv, b, x, iterations, cfg.relative_tolerance)


def lanczos_extreme_eigs(mv, dim, iterations, seed=0):
    """Estimate the extreme eigenvalues of a symmetric operator.

    Runs Lanczos with full (twice-applied) reorthogonalization from a seeded
    Gaussian start vector and returns the extreme Ritz values of the
    tridiagonal matrix. A breakdown (vanishing off-diagonal) ends the
    iteration early with the current estimates and sets the breakdown flag.
    """
    if iterations > dim:
        raise ValueError(f"iterations ({iterations}) must be <= dim ({dim})")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    basis = np.empty((iterations, dim))
    basis[0] = q
    alphas = []
    betas = []
    breakdown = False
    scale = 0.0
    for k in range(iterations):
        w = np.asarray(mv(basis[k]), dtype=np.float64)
        alpha = float(basis[k] @ w)
        alphas.append(alpha)
        w = w - alpha * basis[k]
        if k > 0:
            w = w - betas[-1] * basis[k - 1]
        for _ in range(2):  # full reorthogonalization, applied twice
            w = w - basis[: k + 1].T @ (basis[: k + 1] @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if k == iterations - 1:
            break
        if beta <= 1e-14 * max(scale, 1.0):
            breakdown = True
            break
        betas.append(beta)
        basis[k + 1] = w / beta
    if len(alphas) == 1:
        eigs = np.array([alphas[0]])
    else:
        eigs = eigh_tridiagonal(np.array(alphas), np.array(betas), eigvals_only=True)
    return LanczosReport(float(eigs[0]), float(eigs[-1]), len(alphas), breakdown)
