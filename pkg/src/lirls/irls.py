"""The reweighted-least-squares outer loop for inverse imaging.

One step majorizes the objective

    J(x) = 1/(2 sigma^2) |y - A x|^2 + sum_i penalty(group_i(G x))

at the current iterate by freezing the per-group majorizer weights, then
minimizes the resulting quadratic by solving

    (A'A + p sigma^2 sum_i G_i' W_i G_i + alpha I) x = A'y + alpha x^k

with warm-started preconditioned CG, which guarantees monotone descent of J.
The loop stops once the stationarity residual |S x - A'y| / |A'y| stays below
threshold for a fixed number of consecutive steps, or at the step cap.
"""

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import cv2
import numpy as np

from .errors import (
    DimensionError,
    MajorizerViolationError,
    NonConvergenceError,
    StepError,
)
from .operators import (
    BlurOperator,
    CfaOperator,
    FilterBank,
    IdentityOperator,
    LinearOperator,
    SrOperator,
    spectral_norm_sq,
)
from .priors import GroupWeights, PriorSpec, lowrank_majorizer_weights_batch
from .solvers import SolveConfig, cg_solve, lanczos_extreme_eigs

__all__ = [
    "Problem",
    "IrlsLimits",
    "IrlsState",
    "RateBoundReport",
    "training_limits",
    "inference_limits",
    "objective",
    "objective_gradient",
    "build_weights",
    "build_preconditioner",
    "system_apply",
    "residual_ratio",
    "majorizer_value",
    "majorizer_taylor_value",
    "irls_step",
    "irls_solve",
    "rate_bound",
    "format_rate_report",
    "wiener_init",
    "bilinear_demosaick",
    "export_trace_csv",
]


@dataclass
class Problem:
    """A reconstruction instance: degradation, observation, prior, start."""

    forward: LinearOperator
    observation: np.ndarray
    sigma_n: float
    bank: Optional[FilterBank]
    prior: Optional[PriorSpec]
    x0: np.ndarray
    delta: float = 8e-4
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.sigma_n <= 0:
            raise ValueError("sigma_n must be positive")
        if self.alpha is None:
            self.alpha = self.delta * self.sigma_n**2
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.observation.shape != self.forward.out_shape:
            raise DimensionError(
                f"observation shape {self.observation.shape} != operator output {self.forward.out_shape}"
            )
        if self.x0.shape != self.forward.in_shape:
            raise DimensionError(
                f"x0 shape {self.x0.shape} != operator input {self.forward.in_shape}"
            )
        if (self.bank is None) != (self.prior is None):
            raise ValueError("bank and prior must be given together")
        if self.bank is not None:
            if self.bank.in_shape != self.forward.in_shape:
                raise DimensionError("filter bank input shape differs from the image shape")
            expected = self.bank.num_filters if self.prior.family == "sparse" else self.forward.in_shape[0]
            if self.prior.weights.shape[0] != expected:
                raise DimensionError(
                    f"prior needs {expected} weights for this bank, got {self.prior.weights.shape[0]}"
                )
            if self.prior.family == "low_rank" and self.bank.mode != "low_rank":
                raise ValueError("low_rank prior needs a low_rank filter bank")
            if self.prior.family == "sparse" and self.bank.mode != "sparse":
                raise ValueError("sparse prior needs a sparse filter bank")
            if self.prior.weight_map is not None and self.prior.weight_map.shape[1:] != self.bank.grid:
                raise DimensionError(
                    f"weight map grid {self.prior.weight_map.shape[1:]} != bank grid {self.bank.grid}"
                )
        self.rhs_base = self.forward.adjoint(self.observation)
        self.rhs_norm = float(np.linalg.norm(self.rhs_base))
        self._symbol_cache = {}


@dataclass
class IrlsLimits:
    max_steps: int = 400
    inner_max: int = 150
    inner_tol: float = 1e-6
    criterion: float = 1e-4
    consecutive: int = 3
    descent_slack: float = 1e-10
    strict_resolve: bool = True
    debug_majorizer: bool = False

    def __post_init__(self):
        if self.max_steps < 1 or self.inner_max < 1 or self.consecutive < 1:
            raise ValueError("limits must be positive")
        if self.inner_tol <= 0 or self.criterion <= 0:
            raise ValueError("tolerances must be positive")


def training_limits(**overrides):
    return replace(IrlsLimits(max_steps=400, inner_max=150), **overrides) if overrides else IrlsLimits()


def inference_limits(extended=False, **overrides):
    base = IrlsLimits(max_steps=30 if extended else 15, inner_max=50)
    return replace(base, **overrides) if overrides else base


@dataclass
class IrlsState:
    x: np.ndarray
    k: int = 0
    objective_trace: List[float] = field(default_factory=list)
    residual_trace: List[float] = field(default_factory=list)
    inner_iterations: List[int] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)
    consecutive_converged: int = 0
    weights: Optional[GroupWeights] = None
    converged: bool = False


# ---------------------------------------------------------------------------
# Objective, gradient, system operator.
# ---------------------------------------------------------------------------


def _effective_weights(problem):
    """Per-position weights: the shared vector or the loaded per-position map."""
    prior = problem.prior
    if prior.weight_map is not None:
        return prior.weight_map
    return prior.weights


def _features_as_groups(bank, feats):
    """Low-rank features (c, q, Hv, Wv) stacked as (N, c, q) matrices."""
    c, q = feats.shape[0], feats.shape[1]
    return feats.reshape(c, q, -1).transpose(2, 0, 1)


def _groups_as_features(bank, groups):
    c, q = groups.shape[1], groups.shape[2]
    hv, wv = bank.grid
    return groups.transpose(1, 2, 0).reshape(c, q, hv, wv)


def regularizer(problem, x):
    """Total prior penalty over all spatial groups."""
    if problem.bank is None:
        return 0.0
    prior = problem.prior
    feats = problem.bank.apply(x)
    if prior.family == "sparse":
        w = _effective_weights(problem)
        if w.ndim == 1:
            w = w[:, None, None]
        return float(np.sum(w * (feats**2 + prior.gamma) ** (prior.p / 2.0)))
    groups = _features_as_groups(problem.bank, feats)
    sig_sq = np.linalg.svd(groups, compute_uv=False) ** 2
    w = _effective_weights(problem)
    if w.ndim == 1:
        wn = w[None, :]
    else:
        wn = w.reshape(w.shape[0], -1).T
    return float(np.sum(wn * (sig_sq + prior.gamma) ** (prior.p / 2.0)))


def objective(problem, x):
    residual = problem.observation - problem.forward.apply(x)
    data = float(np.vdot(residual, residual)) / (2.0 * problem.sigma_n**2)
    return data + regularizer(problem, x)


def build_weights(problem, x):
    """Majorizer weights for every group, anchored at x."""
    if problem.bank is None:
        return None
    prior = problem.prior
    feats = problem.bank.apply(x)
    if prior.family == "sparse":
        w = _effective_weights(problem)
        if w.ndim == 1:
            w = w[:, None, None]
        data = w * (feats**2 + prior.gamma) ** ((prior.p - 2.0) / 2.0)
        return GroupWeights("sparse", problem.bank.grid, data)
    groups = _features_as_groups(problem.bank, feats)
    w = _effective_weights(problem)
    if w.ndim != 1:
        w = w.reshape(w.shape[0], -1).T  # (N, c)
    mats, scales, basis = lowrank_majorizer_weights_batch(groups, w, prior.p, prior.gamma)
    return GroupWeights("low_rank", problem.bank.grid, mats, scales=scales, basis=basis)


def _prior_quad_apply(problem, weights, v):
    """sum_i G_i' W_i G_i v (no p or sigma factors)."""
    bank = problem.bank
    feats = bank.apply(v)
    if weights.family == "sparse":
        return bank.adjoint(weights.data * feats)
    groups = _features_as_groups(bank, feats)
    weighted = weights.data @ groups
    return bank.adjoint(_groups_as_features(bank, weighted))


def stationarity_map(problem, weights, x):
    """S(x) x - A'y where S excludes the alpha augmentation."""
    out = problem.forward.adjoint(problem.forward.apply(x)) - problem.rhs_base
    if problem.bank is not None:
        out = out + problem.prior.p * problem.sigma_n**2 * _prior_quad_apply(problem, weights, x)
    return out


def residual_ratio(problem, weights, x):
    return float(np.linalg.norm(stationarity_map(problem, weights, x)) / problem.rhs_norm)


def system_apply(problem, weights, v):
    """(A'A + p sigma^2 sum_i G_i' W_i G_i + alpha I) v; symmetric positive definite."""
    out = problem.forward.adjoint(problem.forward.apply(v)) + problem.alpha * v
    if problem.bank is not None:
        out = out + problem.prior.p * problem.sigma_n**2 * _prior_quad_apply(problem, weights, v)
    return out


def objective_gradient(problem, x):
    """Exact gradient of the objective (the weight dependence on x cancels
    into the same reweighted form): A'(Ax - y)/sigma^2 + p sum G_i' W_i(x) G_i x."""
    weights = build_weights(problem, x)
    grad = problem.forward.adjoint(problem.forward.apply(x) - problem.observation) / problem.sigma_n**2
    if problem.bank is not None:
        grad = grad + problem.prior.p * _prior_quad_apply(problem, weights, x)
    return grad


# ---------------------------------------------------------------------------
# Majorizer evaluations (debug diagnostics).
# ---------------------------------------------------------------------------


def majorizer_value(problem, x, anchor, weights=None):
    """Augmented quadratic majorizer anchored at `anchor`, evaluated at x."""
    if weights is None:
        weights = build_weights(problem, anchor)
    residual = problem.observation - problem.forward.apply(x)
    value = float(np.vdot(residual, residual)) / (2.0 * problem.sigma_n**2)
    if problem.bank is not None:
        p = problem.prior.p

        def quad(v):
            feats = problem.bank.apply(v)
            if weights.family == "sparse":
                return float(np.sum(weights.data * feats**2))
            groups = _features_as_groups(problem.bank, feats)
            return float(np.sum(groups * (weights.data @ groups)))

        value += regularizer(problem, anchor) + 0.5 * p * (quad(x) - quad(anchor))
    diff = x - anchor
    value += 0.5 * problem.delta * float(np.vdot(diff, diff))
    return value


def majorizer_taylor_value(problem, x, anchor, weights=None):
    """The same majorizer written as an expansion around the anchor."""
    if weights is None:
        weights = build_weights(problem, anchor)
    diff = x - anchor
    value = objective(problem, anchor) + float(np.vdot(diff, objective_gradient(problem, anchor)))
    value += 0.5 / problem.sigma_n**2 * float(np.vdot(diff, system_apply(problem, weights, diff)))
    return value


# ---------------------------------------------------------------------------
# Circulant preconditioner for the inner solves.
# ---------------------------------------------------------------------------


def _kernel_power_spectrum(problem, kernel):
    key = ("kernel", kernel.tobytes())
    cached = problem._symbol_cache.get(key)
    if cached is None:
        h, w = problem.forward.in_shape[1:]
        padded = np.zeros((h, w))
        padded[: kernel.shape[0], : kernel.shape[1]] = kernel
        cached = np.abs(np.fft.rfft2(padded)) ** 2
        problem._symbol_cache[key] = cached
    return cached


def _forward_symbol(problem):
    """Per-channel circulant model of A'A on the full image grid."""
    op = problem.forward
    c, h, w = op.in_shape
    key = "forward"
    cached = problem._symbol_cache.get(key)
    if cached is not None:
        return cached
    if isinstance(op, SrOperator):
        sym = _kernel_power_spectrum(problem, op.blur.kernel)[None] / op.scale**2
        sym = np.broadcast_to(sym, (c, h, w // 2 + 1))
    elif isinstance(op, BlurOperator):
        sym = np.broadcast_to(_kernel_power_spectrum(problem, op.kernel)[None], (c, h, w // 2 + 1))
    elif isinstance(op, CfaOperator):
        fractions = np.array([np.mean(op.channel_map == ch) for ch in range(c)])
        sym = np.broadcast_to(fractions[:, None, None], (c, h, w // 2 + 1))
    elif isinstance(op, IdentityOperator):
        sym = np.ones((c, h, w // 2 + 1))
    else:
        # generic fallback: scalar diagonal estimate of A'A from seeded probes
        rng = np.random.default_rng(0)
        acc = 0.0
        for _ in range(3):
            v = rng.standard_normal(op.in_shape)
            av = op.apply(v)
            acc += float(np.vdot(av, av) / np.vdot(v, v))
        sym = np.full((c, h, w // 2 + 1), acc / 3.0)
    problem._symbol_cache[key] = sym
    return sym


def _bank_symbols(problem):
    """|FFT(filter slice)|^2 per (filter, channel) on the full grid."""
    key = "bank"
    cached = problem._symbol_cache.get(key)
    if cached is not None:
        return cached
    bank = problem.bank
    c, h, w = bank.in_shape
    nf = bank.num_filters
    sym = np.zeros((nf, c, h, w // 2 + 1))
    for f in range(nf):
        for ch in range(c):
            slice_ = bank.filters[f, 0] if bank.mode == "low_rank" else bank.filters[f, ch]
            padded = np.zeros((h, w))
            padded[: slice_.shape[0], : slice_.shape[1]] = slice_
            sym[f, ch] = np.abs(np.fft.rfft2(padded)) ** 2
    problem._symbol_cache[key] = sym
    return sym


def build_preconditioner(problem, weights):
    """Circulant approximation of the system operator, inverted per FFT bin.

    Uses the kernel autocorrelation spectrum for A'A, the spatial mean of the
    current majorizer weights for the prior term, and the alpha shift.
    """
    c, h, w = problem.forward.in_shape
    symbol = _forward_symbol(problem).copy()
    if problem.bank is not None:
        bank_sym = _bank_symbols(problem)
        p = problem.prior.p
        if weights.family == "sparse":
            mean_w = weights.data.reshape(weights.data.shape[0], -1).mean(axis=1)
            prior_sym = np.einsum("f,fchw->chw", mean_w, bank_sym, optimize=True)
        else:
            mean_diag = np.einsum("ncc->c", weights.data, optimize=True) / weights.data.shape[0]
            prior_sym = mean_diag[:, None, None] * bank_sym.sum(axis=0)
        symbol = symbol + p * problem.sigma_n**2 * prior_sym
    symbol = symbol + problem.alpha

    def precond(r):
        return np.fft.irfft2(np.fft.rfft2(r, axes=(1, 2)) / symbol, s=(h, w), axes=(1, 2))

    return precond


# ---------------------------------------------------------------------------
# The outer loop.
# ---------------------------------------------------------------------------


def irls_step(problem, state, limits=None, use_preconditioner=True):
    """One majorize-then-solve step; returns the advanced state.

    The inner CG is warm-started at the current iterate, which makes the
    majorizer (hence the objective) non-increasing regardless of the inner
    iteration budget.
    """
    limits = limits or IrlsLimits()
    t0 = time.perf_counter()
    x = state.x
    weights = build_weights(problem, x)
    rhs = problem.rhs_base + problem.alpha * x
    mv = lambda v: system_apply(problem, weights, v)
    precond = build_preconditioner(problem, weights) if use_preconditioner else None
    cfg = SolveConfig(
        max_iterations=limits.inner_max,
        relative_tolerance=limits.inner_tol,
        preconditioner=precond,
    )
    report = cg_solve(mv, rhs, x0=x, cfg=cfg)
    if not np.all(np.isfinite(report.solution)):
        raise StepError("inner PCG diverged", report)
    x_new = report.solution
    j_old = state.objective_trace[-1] if state.objective_trace else objective(problem, x)
    j_new = objective(problem, x_new)
    if j_new > j_old + limits.descent_slack:
        if limits.strict_resolve:
            strict_cfg = SolveConfig(
                max_iterations=max(limits.inner_max, 1000),
                relative_tolerance=1e-12,
                preconditioner=precond,
            )
            report = cg_solve(mv, rhs, x0=x, cfg=strict_cfg)
            x_new = report.solution
            j_new = objective(problem, x_new)
        if j_new > j_old + limits.descent_slack:
            raise MajorizerViolationError(
                f"objective rose from {j_old!r} to {j_new!r} at step {state.k + 1}"
            )
    if limits.debug_majorizer:
        anchor_val = majorizer_value(problem, x, x, weights)
        if abs(anchor_val - j_old) > 1e-10 * max(1.0, abs(j_old)):
            raise MajorizerViolationError("majorizer does not touch the objective at the anchor")
        bound_val = majorizer_value(problem, x_new, x, weights)
        if bound_val < j_new - 1e-10 * max(1.0, abs(j_new)):
            raise MajorizerViolationError("majorizer fell below the objective")
    wall = (time.perf_counter() - t0) * 1e3
    new_state = IrlsState(
        x=x_new,
        k=state.k + 1,
        objective_trace=state.objective_trace + [j_new],
        residual_trace=list(state.residual_trace),
        inner_iterations=state.inner_iterations + [report.iterations],
        wall_ms=state.wall_ms + [wall],
        consecutive_converged=state.consecutive_converged,
        weights=weights,
        converged=state.converged,
    )
    return new_state


def irls_solve(problem, limits=None, use_preconditioner=True):
    """Run the outer loop until the stationarity criterion holds for
    `limits.consecutive` steps in a row, or the step cap is reached.

    Returns (solution, final state). The returned iterate is the first one at
    which the criterion streak completed; on cap exit converged is False.
    """
    limits = limits or IrlsLimits()
    state = IrlsState(
        x=problem.x0.copy(),
        objective_trace=[objective(problem, problem.x0)],
        inner_iterations=[0],
        wall_ms=[0.0],
    )
    weights = build_weights(problem, state.x)
    state.weights = weights
    state.residual_trace.append(_criterion_value(problem, weights, state.x))
    _update_streak(state, limits)
    while not state.converged and state.k < limits.max_steps:
        state = irls_step(problem, state, limits, use_preconditioner)
        state.weights = build_weights(problem, state.x)
        state.residual_trace.append(_criterion_value(problem, state.weights, state.x))
        _update_streak(state, limits)
    return state.x, state


def _criterion_value(problem, weights, x):
    if problem.rhs_norm == 0.0:
        return 0.0
    return residual_ratio(problem, weights, x)


def _update_streak(state, limits):
    if state.residual_trace[-1] < limits.criterion:
        state.consecutive_converged += 1
    else:
        state.consecutive_converged = 0
    if state.consecutive_converged >= limits.consecutive:
        state.converged = True


# ---------------------------------------------------------------------------
# Convergence-rate diagnostic.
# ---------------------------------------------------------------------------


@dataclass
class RateBoundReport:
    nu_ub: float
    lambda_min_hessian: float
    norm_forward_sq: float
    group_norm_sq: float
    max_weight_per_group: np.ndarray
    alpha: float
    observed_ratio: float


def hessian_vector_product(problem, x, v, step_scale=1e-5):
    """Central finite-difference Hessian action of the objective at x."""
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(v)
    h = step_scale * max(float(np.linalg.norm(x)), 1.0) / v_norm
    up = objective_gradient(problem, x + h * v)
    dn = objective_gradient(problem, x - h * v)
    return (up - dn) / (2.0 * h)


def rate_bound(problem, state, limits=None, lanczos_iterations=None, reference_extra_factor=2):
    """Assemble the linear-contraction upper bound at a converged iterate and
    compare it with the contraction observed in the objective trace tail.

    The limit value of the objective is taken from an extended reference run
    (the step cap scaled by `reference_extra_factor`, early exit disabled).
    """
    if not state.converged:
        raise NonConvergenceError("rate bound requires a converged solve")
    limits = limits or IrlsLimits()
    x_star = state.x
    weights = build_weights(problem, x_star)
    sigma_sq = problem.sigma_n**2
    norm_a_sq = spectral_norm_sq(problem.forward, seed=0)
    if problem.bank is not None:
        group_norm_sq = problem.bank.stencil_norm_sq()
        max_w = weights.max_per_group()
        prior_term = problem.prior.p * sigma_sq * group_norm_sq * float(max_w.sum())
    else:
        group_norm_sq = 0.0
        max_w = np.zeros(0)
        prior_term = 0.0
    denominator = norm_a_sq + prior_term + problem.alpha

    dim = int(np.prod(problem.forward.in_shape))
    iters = lanczos_iterations or min(dim, 200)
    shape = problem.forward.in_shape

    def hvp_flat(v):
        return hessian_vector_product(problem, x_star, v.reshape(shape)).ravel()

    lanczos = lanczos_extreme_eigs(hvp_flat, dim, iters, seed=0)
    lam_min = lanczos.lambda_min
    nu_ub = 1.0 - sigma_sq * lam_min / denominator

    ref_limits = replace(
        limits,
        max_steps=limits.max_steps * reference_extra_factor,
        criterion=1e-300,
        consecutive=limits.max_steps * reference_extra_factor + 1,
    )
    _, ref_state = irls_solve(problem, ref_limits)
    j_ref = min(ref_state.objective_trace[-1], min(state.objective_trace))
    observed = _observed_contraction(state.objective_trace, j_ref)
    return RateBoundReport(
        nu_ub=nu_ub,
        lambda_min_hessian=lam_min,
        norm_forward_sq=norm_a_sq,
        group_norm_sq=group_norm_sq,
        max_weight_per_group=max_w,
        alpha=problem.alpha,
        observed_ratio=observed,
    )


def _observed_contraction(trace, j_ref, window=10):
    """Geometric mean of per-step ratios of J(x^k) - J* over the trace tail.

    Steps whose gap is at the numerical floor carry no contraction
    information and are skipped.
    """
    gaps = np.array(trace, dtype=np.float64) - j_ref
    floor = 1e-12 * max(1.0, abs(j_ref))
    tail = gaps[-(window + 1):]
    ratios = []
    for a, b in zip(tail, tail[1:]):
        if a > floor and b > 0:
            ratios.append(b / a)
    if not ratios:
        return 0.0
    return float(np.exp(np.mean(np.log(ratios))))


def format_rate_report(report):
    lines = [
        f"nu_ub                {report.nu_ub:.12g}",
        f"lambda_min_hessian   {report.lambda_min_hessian:.12g}",
        f"norm_forward_sq      {report.norm_forward_sq:.12g}",
        f"group_norm_sq        {report.group_norm_sq:.12g}",
        f"sum_max_weight       {float(report.max_weight_per_group.sum()):.12g}",
        f"alpha                {report.alpha:.12g}",
        f"observed_ratio       {report.observed_ratio:.12g}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Initializers.
# ---------------------------------------------------------------------------


def _replicate_pad(y, kh, kw):
    top = (kh - 1) // 2
    bottom = kh - 1 - top
    left = (kw - 1) // 2
    right = kw - 1 - left
    return np.pad(y, ((0, 0), (top, bottom), (left, right)), mode="edge")


def _wiener_filter(y_full, kernel, sigma_n):
    # symmetric extension before the circular FFT kills wrap-around ringing
    c, h, w = y_full.shape
    ext = np.concatenate([y_full, y_full[:, ::-1, :]], axis=1)
    ext = np.concatenate([ext, ext[:, :, ::-1]], axis=2)
    h2, w2 = 2 * h, 2 * w
    padded = np.zeros((h2, w2))
    padded[: kernel.shape[0], : kernel.shape[1]] = kernel
    shift = ((kernel.shape[0] - 1) // 2, (kernel.shape[1] - 1) // 2)
    otf = np.fft.rfft2(np.roll(padded, (-shift[0], -shift[1]), axis=(0, 1)))
    signal_var = max(float(np.var(y_full)) - sigma_n**2, 1e-6)
    reg = max(sigma_n**2 / signal_var, 1e-12)
    spec = np.fft.rfft2(ext, axes=(1, 2))
    restored = np.conj(otf)[None] * spec / (np.abs(otf)[None] ** 2 + reg)
    return np.fft.irfft2(restored, s=(h2, w2), axes=(1, 2))[:, :h, :w]


def _bicubic_resize(y, out_hw):
    moved = np.moveaxis(y, 0, -1)
    resized = cv2.resize(moved, (out_hw[1], out_hw[0]), interpolation=cv2.INTER_CUBIC)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return np.moveaxis(resized, -1, 0).astype(np.float64)


def wiener_init(problem):
    """Fast frequency-domain start: circular Wiener deconvolution for blur and
    super-resolution (after bicubic upsampling), bilinear interpolation for
    mosaicked observations."""
    op = problem.forward
    y = problem.observation
    if isinstance(op, CfaOperator):
        return bilinear_demosaick(y, op)
    if isinstance(op, SrOperator):
        up = _bicubic_resize(y, op.blur.out_shape[1:])
        kh, kw = op.blur.kernel.shape
        return _wiener_filter(_replicate_pad(up, kh, kw), op.blur.kernel, problem.sigma_n)
    if isinstance(op, IdentityOperator):
        return y.copy()
    if isinstance(op, BlurOperator):
        kh, kw = op.kernel.shape
        return _wiener_filter(_replicate_pad(y, kh, kw), op.kernel, problem.sigma_n)
    raise TypeError(f"no initializer for operator type {type(op).__name__}")


_BILINEAR_CROSS = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
_BILINEAR_FULL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


def _same_corr(plane, kernel):
    padded = np.pad(plane, ((1, 1), (1, 1)))
    from numpy.lib.stride_tricks import sliding_window_view

    return np.einsum("hwab,ab->hw", sliding_window_view(padded, kernel.shape), kernel, optimize=True)


def bilinear_demosaick(y, cfa):
    """Fill each color plane by averaging its available neighbors
    (normalized convolution with the bilinear kernels)."""
    h, w = y.shape[1:]
    out = np.zeros((3, h, w))
    for ch in range(3):
        mask = (cfa.channel_map == ch).astype(np.float64)
        samples = y[0] * mask
        kernel = _BILINEAR_CROSS if (cfa.channel_map == ch).mean() > 0.3 else _BILINEAR_FULL
        norm = _same_corr(mask, kernel)
        out[ch] = _same_corr(samples, kernel) / np.maximum(norm, 1e-12)
    return out


# ---------------------------------------------------------------------------
# Trace export.
# ---------------------------------------------------------------------------


def export_trace_csv(state, path):
    """CSV with one row per iterate: k, objective, residual, inner_iterations, wall_ms."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "objective", "residual", "inner_iterations", "wall_ms"])
        n = len(state.objective_trace)
        for k in range(n):
            res = state.residual_trace[k] if k < len(state.residual_trace) else math.nan
            inner = state.inner_iterations[k] if k < len(state.inner_iterations) else 0
            wall = state.wall_ms[k] if k < len(state.wall_ms) else 0.0
            writer.writerow([k, repr(state.objective_trace[k]), repr(res), inner, f"{wall:.3f}"])
