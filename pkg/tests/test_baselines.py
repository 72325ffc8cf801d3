import math

import numpy as np
import pytest

from civi import baselines as bl
from civi.diffcore import central_difference
from civi.fixtures import LognormalProblem, deterministic_problem, quadratic_problem


def test_config_validation():
    with pytest.raises(ValueError):
        bl.NmcConfig(N=0)
    with pytest.raises(ValueError):
        bl.NmcConfig(M=0)
    with pytest.raises(ValueError):
        bl.NmcConfig(optimizer="lbfgs")
    assert bl.NmcConfig(lr=0.1, lr_decay=0.5).lr_at(4) == pytest.approx(0.05)


def test_deterministic_single_draw_loss(rng):
    prob = quadratic_problem()
    theta = rng.normal(size=3)
    cfg = bl.NmcConfig(N=7, M=1)
    loss, _ = bl.nmc_loss_grad(prob, theta, cfg, np.random.default_rng(3))
    nu = np.random.default_rng(3).integers(0, prob.n, size=7)
    exact = prob.log_mean(theta, np.zeros((1, 1)))
    assert loss == pytest.approx(float(np.mean(exact[nu])), rel=1e-13)


@pytest.mark.parametrize("N,M", [(1, 1), (5, 3), (20, 50)])
def test_constant_g_gives_log_c(N, M):
    c = 3.7
    prob = deterministic_problem(lambda th: th * 0.0 + np.full(3, math.log(c)), 3, 3)
    loss, grad = bl.nmc_loss_grad(prob, np.ones(3), bl.NmcConfig(N=N, M=M), np.random.default_rng(0))
    assert loss == pytest.approx(math.log(c), rel=1e-15)
    assert np.all(grad == 0)


def test_reciprocal_value_two_components():
    prob = deterministic_problem(lambda th: th * 0.0 + np.log([2.0, 4.0]), 2, 1)
    val = bl.nmc_reciprocal_value(prob, np.zeros(1), 1, 1, np.random.default_rng(0), exact_outer=True)
    assert val == pytest.approx(0.375, rel=1e-15)


def test_gradient_differentiates_plugin(rng):
    lp = LognormalProblem.random(n=4, p=2, seed=1)
    prob = lp.problem()
    theta = rng.normal(size=2) * 0.3
    cfg = bl.NmcConfig(N=6, M=5)
    _, grad = bl.nmc_loss_grad(prob, theta, cfg, np.random.default_rng(11))

    def plug(th):
        r = np.random.default_rng(11)
        return bl.nmc_loss_grad(prob, th, cfg, r)[0]

    np.testing.assert_allclose(grad, central_difference(plug, theta.copy()), rtol=1e-6)


def test_bias_shrinks_with_M():
    lp = LognormalProblem.random(n=4, p=2, noise=1.0, seed=0)
    prob = lp.problem()
    theta = np.zeros(2)
    truth = lp.loss(theta)
    rng = np.random.default_rng(5)
    bias = [abs(bl.expected_plugin_loss(prob, theta, M, 10_000, rng) - truth) for M in (1, 10, 100)]
    assert bias[0] > bias[1] > bias[2]


# ---------------------------------------------------------------- steppers


def test_sgd_scalar():
    assert bl.step_sgd(np.array([1.0]), np.array([1.0]), bl.StepperState(), 0.1)[0] == pytest.approx(0.9)


def test_adam_first_step():
    lr, eps = 0.01, 1e-8
    th = bl.step_adam(np.array([0.0]), np.array([1.0]), bl.StepperState(), lr, eps=eps)
    assert th[0] == pytest.approx(-lr / (1 + eps), rel=1e-12)


def test_rmsprop_three_step_unroll():
    gs, lr, rho, eps = [0.5, -1.0, 2.0], 0.01, 0.9, 1e-8
    th, v = 1.0, 0.0
    for g in gs:
        v = rho * v + (1 - rho) * g * g
        th = th - lr * g / (math.sqrt(v) + eps)
    state = bl.StepperState()
    x = np.array([1.0])
    for g in gs:
        x = bl.step_rmsprop(x, np.array([g]), state, lr)
    assert x[0] == pytest.approx(th, rel=1e-14)


@pytest.mark.parametrize("name", sorted(bl.STEPPERS))
def test_non_finite_gradient_rejected(name):
    with pytest.raises(FloatingPointError):
        bl.STEPPERS[name](np.zeros(2), np.array([np.inf, 0.0]), bl.StepperState(), 0.1)


@pytest.mark.parametrize("name", sorted(bl.STEPPERS))
def test_steppers_descend_quadratic(name):
    c = np.array([3.0, -2.0, 0.5])
    theta = np.zeros(3)
    state = bl.StepperState()
    losses = [0.5 * np.sum((theta - c) ** 2)]
    for _ in range(200):
        theta = bl.STEPPERS[name](theta, theta - c, state, 1e-3)
        losses.append(0.5 * np.sum((theta - c) ** 2))
    assert np.all(np.diff(losses) < 0)


# --------------------------------------------------------------------- run


def test_run_nmc_counts_evals_and_stops():
    prob = LognormalProblem.random(n=4, p=2, seed=0).problem()
    cfg = bl.NmcConfig(N=3, M=7, lr=0.01, T=50)
    res = bl.run_nmc(prob, np.zeros(2), cfg, seed=1, callback=lambda t, th, rec: t == 12)
    assert len(res.trajectory) == 12
    assert res.trajectory[-1]["g_evals"] == 12 * 7


def test_run_nmc_reproducible_and_descends():
    lp = LognormalProblem.random(n=4, p=2, seed=0)
    cfg = bl.NmcConfig(N=4, M=20, lr=0.05, T=300)
    a = bl.run_nmc(lp.problem(), np.full(2, 2.0), cfg, seed=2)
    b = bl.run_nmc(lp.problem(), np.full(2, 2.0), cfg, seed=2)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert lp.loss(a.theta) < lp.loss(np.full(2, 2.0))
