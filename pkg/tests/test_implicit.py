import numpy as np
import pytest
from util import gradient_filters, make_problem, smooth_image

from lirls.errors import NonConvergenceError
from lirls.implicit import (
    adjoint_solve,
    fixed_point_residual,
    implicit_loss_grad,
    jacobian_x_apply,
    neg_psnr_loss,
    vjp_params,
)
from lirls.irls import (
    Problem,
    build_weights,
    irls_solve,
    objective_gradient,
    stationarity_map,
    training_limits,
)
from lirls.operators import FilterBank, IdentityOperator
from lirls.priors import PriorSpec
from lirls.solvers import SolveConfig


def converged_residual(seed, family="sparse", p=0.7, shape=(3, 12, 12), provider="learned", weights=None, **kw):
    prob, gt = make_problem(seed, shape=shape, family=family, p=p, **kw)
    if weights is None and family == "low_rank":
        weights = np.array([0.5, 1.0, 1.5])  # strictly ascending so FD probes stay valid
    if weights is not None:
        prob.prior = PriorSpec(family, p, prob.prior.gamma, weights, provider=provider)
    else:
        prob.prior.provider = provider
    x_star, state = irls_solve(prob, training_limits(max_steps=300))
    assert state.converged
    return prob, gt, fixed_point_residual(prob, x_star)


def vg_value(problem, x_star, v, filters=None, weights=None, p=None):
    """v' g(x*, params) with selected parameters replaced (FD oracle helper)."""
    prior = problem.prior
    bank = problem.bank
    if filters is not None:
        bank = FilterBank(filters, problem.bank.in_shape, mode=problem.bank.mode)
    new_prior = PriorSpec(
        prior.family,
        prior.p if p is None else p,
        prior.gamma,
        prior.weights if weights is None else weights,
        weight_map=prior.weight_map,
        provider=prior.provider,
    )
    prob2 = Problem(
        problem.forward, problem.observation, problem.sigma_n, bank, new_prior, problem.x0
    )
    w = build_weights(prob2, x_star)
    return float(np.vdot(v, stationarity_map(prob2, w, x_star)))


# --- residual construction ----------------------------------------------------


def test_residual_requires_convergence():
    prob, _ = make_problem(1, shape=(3, 10, 10))
    with pytest.raises(NonConvergenceError):
        fixed_point_residual(prob, prob.x0)


def test_residual_value_is_sigma_sq_times_gradient():
    prob, _, residual = converged_residual(2)
    grad = objective_gradient(prob, residual.x_star)
    assert np.allclose(residual.value, prob.sigma_n**2 * grad, atol=1e-12)


# --- Jacobian action -----------------------------------------------------------


def test_jacobian_no_filters_identity():
    shape = (1, 6, 6)
    y = smooth_image(shape, 3)
    prob = Problem(IdentityOperator(shape), y, 1.0, None, None, y.copy())
    residual = fixed_point_residual(prob, y.copy())
    v = smooth_image(shape, 4)
    assert np.allclose(jacobian_x_apply(residual, v), v, atol=1e-13)
    sol, report = adjoint_solve(residual, v)
    assert report.converged
    assert np.allclose(sol, v, atol=1e-8)


@pytest.mark.parametrize("family,p", [("sparse", 1.0), ("sparse", 0.6), ("low_rank", 0.7), ("low_rank", 1.0)])
def test_jacobian_matches_directional_fd(family, p):
    prob, _, residual = converged_residual(5, family=family, p=p, gamma=1e-3)
    rng = np.random.default_rng(6)
    x_star = residual.x_star
    sigma_sq = prob.sigma_n**2
    for _ in range(20):
        u = rng.standard_normal(x_star.shape)
        u /= np.linalg.norm(u)
        analytic = jacobian_x_apply(residual, u)
        h = 1e-5
        fd = sigma_sq * (
            objective_gradient(prob, x_star + h * u) - objective_gradient(prob, x_star - h * u)
        ) / (2 * h)
        err = np.linalg.norm(analytic - fd) / max(1.0, np.linalg.norm(analytic))
        assert err <= 1e-5


def test_jacobian_fd_error_decays_second_order():
    prob, _, residual = converged_residual(7, family="sparse", p=0.8, gamma=1e-2)
    rng = np.random.default_rng(8)
    u = rng.standard_normal(residual.x_star.shape)
    u /= np.linalg.norm(u)
    analytic = jacobian_x_apply(residual, u)
    errs = []
    for h in (1e-3, 1e-4):
        fd = prob.sigma_n**2 * (
            objective_gradient(prob, residual.x_star + h * u)
            - objective_gradient(prob, residual.x_star - h * u)
        ) / (2 * h)
        errs.append(np.linalg.norm(analytic - fd))
    assert errs[1] <= errs[0] * 0.05  # roughly h^2 decay


@pytest.mark.parametrize("family", ["sparse", "low_rank"])
def test_jacobian_symmetry(family):
    prob, _, residual = converged_residual(9, family=family, p=0.65)
    rng = np.random.default_rng(10)
    for _ in range(10):
        u = rng.standard_normal(residual.x_star.shape)
        v = rng.standard_normal(residual.x_star.shape)
        lhs = float(np.vdot(u, jacobian_x_apply(residual, v)))
        rhs = float(np.vdot(jacobian_x_apply(residual, u), v))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_jacobian_finite_on_degenerate_spectrum():
    # constant image: all groups share identical (degenerate) spectra
    shape = (3, 10, 10)
    flat = np.full(shape, 0.5)
    bank = FilterBank(gradient_filters(3, mode="low_rank"), shape, mode="low_rank")
    prior = PriorSpec("low_rank", 0.7, 1e-4, np.array([0.5, 1.0, 1.5]))
    prob = Problem(IdentityOperator(shape), flat.copy(), 0.1, bank, prior, flat.copy())
    x_star, state = irls_solve(prob, training_limits(max_steps=100))
    assert state.converged
    residual = fixed_point_residual(prob, x_star)
    rng = np.random.default_rng(11)
    out = jacobian_x_apply(residual, rng.standard_normal(shape))
    assert np.all(np.isfinite(out))


# --- adjoint solve --------------------------------------------------------------


def test_adjoint_zero_loss_grad_gives_zero():
    prob, _, residual = converged_residual(12)
    v, report = adjoint_solve(residual, np.zeros_like(residual.x_star))
    assert np.all(v == 0.0) and report.converged


@pytest.mark.parametrize("family,p", [("sparse", 1.0), ("sparse", 0.7), ("low_rank", 0.6)])
def test_adjoint_solves_the_jacobian_system(family, p):
    prob, gt, residual = converged_residual(13, family=family, p=p)
    _, rho = neg_psnr_loss(residual.x_star, gt)
    v, report = adjoint_solve(residual, rho, SolveConfig(max_iterations=4000, relative_tolerance=1e-7))
    assert report.converged
    back = jacobian_x_apply(residual, v)
    assert np.linalg.norm(back - rho) <= 1e-6 * np.linalg.norm(rho)


# --- parameter VJPs --------------------------------------------------------------


def test_vjp_zero_vector_gives_zero_bundle():
    prob, _, residual = converged_residual(14)
    bundle = vjp_params(residual, np.zeros_like(residual.x_star))
    assert np.all(bundle.d_filters == 0.0) and np.all(bundle.d_weights == 0.0) and bundle.d_p == 0.0


def test_vjp_weight_gradient_hand_formula_single_group():
    shape = (1, 2, 2)
    filt = np.ones((1, 1, 2, 2))  # one filter, one valid position: one group
    bank = FilterBank(filt, shape, mode="sparse")
    prior = PriorSpec("sparse", 0.7, 1e-3, np.array([0.8]), provider="learned")
    y = np.array([[[0.2, 0.4], [0.6, 0.8]]])
    prob = Problem(IdentityOperator(shape), y, 0.5, bank, prior, y.copy())
    x_star, state = irls_solve(prob, training_limits(max_steps=200))
    assert state.converged
    residual = fixed_point_residual(prob, x_star)
    rng = np.random.default_rng(15)
    v = rng.standard_normal(shape)
    bundle = vjp_params(residual, v)
    z = float(bank.apply(x_star)[0, 0, 0])
    gv = float(bank.apply(v)[0, 0, 0])
    expected = prior.p * prob.sigma_n**2 * gv * z * (z**2 + prior.gamma) ** ((prior.p - 2) / 2)
    assert bundle.d_weights[0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("family,p", [("sparse", 0.75), ("low_rank", 0.6), ("low_rank", 1.0)])
def test_vjp_matches_fd_sweep(family, p):
    prob, _, residual = converged_residual(16, family=family, p=p, shape=(3, 12, 12), gamma=1e-3)
    rng = np.random.default_rng(17)
    v = rng.standard_normal(residual.x_star.shape)
    bundle = vjp_params(residual, v)
    x_star = residual.x_star

    # filter coefficients (sample up to 50 coordinates)
    filters = prob.bank.filters
    coords = [tuple(rng.integers(0, s) for s in filters.shape) for _ in range(min(50, filters.size))]
    for idx in coords:
        h = 1e-6 * max(1.0, abs(filters[idx]))
        fp = filters.copy()
        fp[idx] += h
        fm = filters.copy()
        fm[idx] -= h
        fd = (vg_value(prob, x_star, v, filters=fp) - vg_value(prob, x_star, v, filters=fm)) / (2 * h)
        scale = max(abs(fd), abs(bundle.d_filters[idx]), 1e-8)
        assert abs(bundle.d_filters[idx] - fd) / scale <= 1e-5

    # weights
    w = prob.prior.weights
    for j in range(w.shape[0]):
        h = 1e-6 * max(1.0, abs(w[j]))
        wp = w.copy()
        wp[j] += h
        wm = w.copy()
        wm[j] -= h
        fd = (vg_value(prob, x_star, v, weights=wp) - vg_value(prob, x_star, v, weights=wm)) / (2 * h)
        scale = max(abs(fd), abs(bundle.d_weights[j]), 1e-8)
        assert abs(bundle.d_weights[j] - fd) / scale <= 1e-5

    # exponent (central differences need interior p; p = 1 is the domain edge)
    if p < 1.0:
        h = 1e-6
        fd = (vg_value(prob, x_star, v, p=p + h) - vg_value(prob, x_star, v, p=p - h)) / (2 * h)
        assert abs(bundle.d_p - fd) / max(abs(fd), 1e-8) <= 1e-5


# --- end-to-end bundle ------------------------------------------------------------


def test_implicit_grad_zero_when_loss_grad_zero():
    prob, _, residual = converged_residual(18)

    def loss_grad_fn(x):
        return neg_psnr_loss(x, x.copy())[1]  # target equals the iterate

    bundle = implicit_loss_grad(prob, residual.x_star, loss_grad_fn)
    assert np.all(bundle.d_filters == 0.0)
    assert np.all(bundle.d_weights == 0.0)
    assert bundle.d_p == 0.0


def test_implicit_grad_frozen_subsets():
    prob, gt, residual = converged_residual(19)
    bundle = implicit_loss_grad(
        prob, residual.x_star, lambda x: neg_psnr_loss(x, gt)[1], trainable=("weights",)
    )
    assert np.all(bundle.d_filters == 0.0)
    assert bundle.d_p == 0.0
    assert np.any(bundle.d_weights != 0.0)


def test_implicit_grad_refuses_stale_iterate():
    prob, gt, _ = converged_residual(20)
    with pytest.raises(NonConvergenceError):
        implicit_loss_grad(prob, prob.x0, lambda x: neg_psnr_loss(x, gt)[1])


def test_neg_psnr_gradient_matches_fd():
    rng = np.random.default_rng(21)
    x = rng.random((3, 8, 8))
    gt = rng.random((3, 8, 8))
    _, grad = neg_psnr_loss(x, gt)
    h = 1e-7
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fd = (neg_psnr_loss(xp, gt)[0] - neg_psnr_loss(xm, gt)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)
