import numpy as np
import pytest

from civi import diffcore as dc
from civi.fixtures import LognormalProblem, quadratic_problem


@pytest.fixture
def lp():
    return LognormalProblem.random(n=5, p=3, kappa=0.5, noise=0.4, coupled=0.3, seed=11)


def test_exact_gradient_matches_fd(lp, rng):
    theta = rng.normal(size=3)
    fd = dc.central_difference(lp.loss, theta.copy())
    np.testing.assert_allclose(lp.grad(theta), fd, rtol=1e-6)


def test_minimizer_is_stationary(lp):
    assert np.linalg.norm(lp.grad(lp.minimizer())) < 1e-10


def test_analytic_and_tape_paths_agree(lp, rng):
    theta = rng.normal(size=3)
    draws = rng.standard_normal((40, 5))
    cols = np.array([0, 2, 3])
    coeffs = np.array([0.2, 0.5, 0.3])
    a = lp.problem(analytic=True).grad_log_mean(theta, draws, cols, coeffs)
    b = lp.problem(analytic=False).grad_log_mean(theta, draws, cols, coeffs)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_monte_carlo_mean_matches_closed_form(lp, rng):
    theta = rng.normal(size=3) * 0.3
    draws = rng.standard_normal((200_000, 5))
    est = lp.problem().log_mean(theta, draws)
    np.testing.assert_allclose(est, lp.log_inner_mean(theta), atol=0.02)


def test_quadratic_problem_is_deterministic(rng):
    prob = quadratic_problem()
    a = prob.log_values(np.ones(3), rng.normal(size=(3, 1)))
    assert np.all(a == a[0])
