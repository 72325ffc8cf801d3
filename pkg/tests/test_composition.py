import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from civi import composition as comp
from civi import diffcore as dc
from civi.fixtures import LognormalProblem, deterministic_problem, quadratic_problem


def exp_linear_problem(A, sigma):
    """g_eps(theta) = exp(A theta + sigma * eps), one eps per component."""
    n, p = A.shape

    def log_g(theta, draws, cols):
        cols = np.arange(n) if cols is None else np.asarray(cols)
        return dc.expand_dims(dc.matmul(A[cols], theta), 0) + sigma * draws[:, cols]

    return comp.CompositionalProblem(n, p, log_g, lambda rng, K: rng.standard_normal((K, n)))


# -------------------------------------------------------------------- streams


def test_rng_streams_are_reproducible_and_distinct():
    a = comp.rng_stream(3, 10, comp.ORACLE_G).random(4)
    b = comp.rng_stream(3, 10, comp.ORACLE_G).random(4)
    c = comp.rng_stream(3, 11, comp.ORACLE_G).random(4)
    d = comp.rng_stream(3, 10, comp.ORACLE_F).random(4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_stream_range_checks():
    with pytest.raises(ValueError):
        comp.rng_stream(-1, 0, 0)
    with pytest.raises(ValueError):
        comp.rng_stream(0, 0, 2**16)


# -------------------------------------------------------------------- oracle_f


def test_oracle_f_forced_index_gradient():
    log_y = np.log([1.0, 2.0, 4.0])
    fb = comp.oracle_f(log_y, 1, comp.rng_stream(0, 1, 0), support=[2])
    np.testing.assert_allclose(fb.dense()[0], [0.0, 0.0, 0.25])


def test_oracle_f_unit_y_gives_basis_vectors(rng):
    fb = comp.oracle_f(np.zeros(6), 20, rng)
    D = fb.dense()
    assert np.all(D.sum(axis=1) == 1.0)
    assert np.all((D == 0) | (D == 1))
    np.testing.assert_array_equal(np.argmax(D, axis=1), fb.indices)


def test_oracle_f_histogram_is_uniform(rng):
    n, K = 5, 100_000
    counts = comp.oracle_f(np.zeros(n), K, rng).counts()
    sd = math.sqrt(K * 0.2 * 0.8)
    assert np.all(np.abs(counts - K * 0.2) < 3 * sd)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_euler_identity_for_log(log_y, seed):
    log_y = np.array(log_y)
    fb = comp.oracle_f(log_y, 5, np.random.default_rng(seed))
    y_at = np.exp(log_y[fb.indices])
    np.testing.assert_allclose(fb.grads * y_at, 1.0, rtol=1e-15)


def test_oracle_f_rejects_bad_input():
    with pytest.raises(ValueError):
        comp.oracle_f(np.zeros(3), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        comp.oracle_f(np.full(3, np.nan), 2, np.random.default_rng(0))


def test_oracle_draws_reproducible():
    prob = LognormalProblem.random(seed=1).problem()
    a = comp.oracle_g(prob, np.zeros(4), 5, comp.rng_stream(9, 2, comp.ORACLE_G))
    b = comp.oracle_g(prob, np.zeros(4), 5, comp.rng_stream(9, 2, comp.ORACLE_G))
    assert a.log_values().tobytes() == b.log_values().tobytes()
    fa = comp.oracle_f(np.zeros(8), 7, comp.rng_stream(9, 2, comp.ORACLE_F))
    fb = comp.oracle_f(np.zeros(8), 7, comp.rng_stream(9, 2, comp.ORACLE_F))
    assert np.array_equal(fa.indices, fb.indices)


# -------------------------------------------------------------------- oracle_g


def test_deterministic_g_values_identical(rng):
    prob = quadratic_problem()
    gb = comp.oracle_g(prob, rng.normal(size=3), 6, rng)
    vals = gb.log_values()
    assert np.all(vals == vals[0])


def test_single_draw_mean_equals_draw(rng):
    prob = LognormalProblem.random(seed=2).problem()
    gb = comp.oracle_g(prob, rng.normal(size=4), 1, rng)
    np.testing.assert_allclose(gb.log_mean(), gb.log_values()[0], rtol=0, atol=1e-15)


def test_lognormal_mean_identity(rng):
    A = rng.normal(size=(3, 2))
    sigma = 0.4
    prob = exp_linear_problem(A, sigma)
    theta = np.array([0.3, -0.5])
    gb = comp.oracle_g(prob, theta, 100_000, rng)
    np.testing.assert_allclose(gb.mean(), np.exp(A @ theta + sigma**2 / 2), rtol=0.01)


def test_model_failure_reports_draw_index():
    def log_g(theta, draws, cols):
        out = np.zeros((len(draws), 2))
        out[1, 1] = np.inf
        return out

    prob = comp.CompositionalProblem(2, 1, log_g, lambda rng, K: np.zeros((K, 1)))
    with pytest.raises(comp.ModelEvaluationError) as exc:
        comp.oracle_g(prob, np.zeros(1), 3, np.random.default_rng(0)).log_values()
    assert exc.value.draw_index == 1
    assert exc.value.pool_index == 1


def test_log_g_shape_is_checked():
    prob = comp.CompositionalProblem(3, 1, lambda th, d, c: np.zeros((len(d), 2)), lambda rng, K: np.zeros((K, 1)))
    with pytest.raises(dc.ShapeError):
        prob.log_values(np.zeros(1), np.zeros((2, 1)))


def test_jacobian_columns_match_fd(rng):
    prob = LognormalProblem.random(n=3, p=2, seed=4).problem(analytic=False)
    theta = rng.normal(size=2) * 0.3
    gb = comp.oracle_g(prob, theta, 50, rng)
    jac = gb.jacobian()
    for j in range(3):
        fd = dc.central_difference(lambda th: float(np.exp(prob.log_mean(th, gb.draws, [j]))[0]), theta.copy())
        np.testing.assert_allclose(jac[j], fd, rtol=1e-6)


def test_contract_log_records_touched_columns(rng):
    prob = LognormalProblem.random(n=6, seed=0).problem()
    gb = comp.oracle_g(prob, np.zeros(4), 4, rng)
    gb.contract_log([1, 4, 4], [1.0, 0.5, 0.5])
    assert sorted(gb.touched) == [1, 4]


def test_log_mean_exp_is_stable():
    vals = np.array([[1000.0, -1000.0], [1000.0, -1001.0]])
    out = comp.log_mean_exp(vals)
    assert out[0] == pytest.approx(1000.0)
    assert out[1] == pytest.approx(-1000.0 + math.log((1 + math.exp(-1)) / 2))


# ---------------------------------------------------------- reference gradient


def test_reference_gradient_deterministic_matches_fd(rng):
    prob = quadratic_problem(n=5, p=3, seed=2)
    theta = rng.normal(size=3)
    ref = comp.reference_gradient(prob, theta, 1000, rng)
    fd = dc.central_difference(lambda th: prob.loss_estimate(th, np.zeros((1, 1))), theta.copy())
    np.testing.assert_allclose(ref, fd, rtol=1e-4)


def test_reference_gradient_exp_theta_is_one(rng):
    prob = deterministic_problem(lambda th: th, 1, 1)
    for x in (-3.0, 0.0, 2.5):
        assert comp.reference_gradient(prob, np.array([x]), 1000, rng)[0] == pytest.approx(1.0)


def test_reference_gradient_constant_g_is_zero(rng):
    prob = deterministic_problem(lambda th: dc.sum_(th) * 0.0 + np.array([1.0, 2.0]), 2, 3)
    np.testing.assert_array_equal(comp.reference_gradient(prob, np.ones(3), 1000, rng), np.zeros(3))


def test_reference_gradient_warns_on_small_batch(rng):
    prob = quadratic_problem()
    with pytest.warns(UserWarning):
        comp.reference_gradient(prob, np.zeros(3), 10, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        comp.reference_gradient(prob, np.zeros(3), 1000, rng)


def test_reference_gradient_close_to_exact_lognormal(rng):
    lp = LognormalProblem.random(n=5, p=3, noise=0.3, seed=7)
    theta = rng.normal(size=3) * 0.5
    ref = comp.reference_gradient(lp.problem(), theta, 200_000, rng)
    np.testing.assert_allclose(ref, lp.grad(theta), atol=2e-3)


def test_from_callback_slices_columns(rng):
    def log_g(theta, draws):
        return np.tile(np.arange(4.0), (len(draws), 1)) + theta[0]

    prob = comp.from_callback(4, 1, log_g)
    out = prob.log_values(np.array([1.0]), np.zeros((2, 1)), [3, 0])
    np.testing.assert_array_equal(out, [[4.0, 1.0], [4.0, 1.0]])


# ---------------------------------------------------------------- constants


def test_affine_g_has_zero_Lg(rng):
    c = rng.normal(size=(3, 2))

    def log_g(theta, draws, cols):
        cols = np.arange(3) if cols is None else np.asarray(cols)
        lin = dc.matmul(c[cols], theta) + 10.0
        return dc.matmul(np.ones((len(draws), 1)), dc.reshape(dc.log(lin), (1, -1)))

    prob = comp.CompositionalProblem(3, 2, log_g, lambda r, K: np.zeros((K, 1)))
    probes = [rng.normal(size=2) * 0.5 for _ in range(4)]
    consts = comp.estimate_constants(prob, probes, K=2)
    assert consts.L_g == pytest.approx(0.0, abs=1e-8)
    assert consts.M_g == pytest.approx(np.linalg.norm(c, 2), rel=1e-8)


def test_log_constants_from_y_range():
    # gbar = exp(theta) on a scalar problem with probes at log 2 and log 5
    prob = deterministic_problem(lambda th: th, 1, 1)
    consts = comp.estimate_constants(prob, [np.array([math.log(2.0)]), np.array([math.log(5.0)])], K=2)
    assert consts.M_f == pytest.approx(0.5)
    assert consts.L_f == pytest.approx(0.25)


def test_quadratic_scalar_Mg_matches_derivative():
    # g(theta) = theta^2 + 1 on probes theta in {0.5, 1.5, -2}: max |g'| = 4
    def log_g(theta, draws, cols):
        val = dc.log(dc.square(theta) + 1.0)
        return dc.matmul(np.ones((len(draws), 1)), dc.reshape(val, (1, 1)))

    prob = comp.CompositionalProblem(1, 1, log_g, lambda r, K: np.zeros((K, 1)))
    consts = comp.estimate_constants(prob, [np.array([v]) for v in (0.5, 1.5, -2.0)], K=2)
    assert consts.M_g == pytest.approx(4.0, rel=1e-10)
    assert consts.smoothness == pytest.approx(consts.M_g**2 * consts.L_f + consts.L_g * consts.M_f)


def test_constants_need_two_probes():
    with pytest.raises(ValueError):
        comp.estimate_constants(quadratic_problem(), [np.zeros(3)])


def test_assumption_constants_nonnegative():
    with pytest.raises(ValueError):
        comp.AssumptionConstants(1, 1, 1, -1, 1, 0, 0, 0)
