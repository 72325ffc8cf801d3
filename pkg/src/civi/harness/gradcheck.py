"""Tape gradients versus central finite differences over random fixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import diffcore as dc
from .. import sivi
from ..composition import OracleFBatch, OracleGBatch
from ..fixtures import LognormalProblem
from ..sketch import SketchPlan, sketch_gradient

STEP = 1e-5
FLOOR = 1e-6
_KINK = 1e-3  # relu fixtures keep pre-activations at least this far from 0


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_params: int


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def by_op(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_rel_err)
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "fixtures": len(self.results),
            "max_rel_err": self.max_rel_err,
            "per_op": self.by_op(),
        }


def check(name: str, fn: Callable, args: Sequence[np.ndarray], rng=None, step: float = STEP) -> CheckResult:
    """Compare tape and finite-difference gradients of ``fn(*args)``.

    Non-scalar outputs are reduced with a fixed random projection.
    """
    args = [np.array(a, dtype=np.float64) for a in args]
    n_params = sum(a.size for a in args)
    if n_params == 0:
        return CheckResult(name, 0.0, 0)
    rng = np.random.default_rng(0) if rng is None else rng
    out_shape = np.shape(dc.value_of(fn(*args)))
    w = rng.normal(size=out_shape)

    def scalar(*xs):
        out = fn(*xs)
        return dc.sum_(out * w) if out_shape else out

    tape = dc.Tape()
    leaves = [tape.leaf(a) for a in args]
    out = scalar(*leaves)
    if isinstance(out, dc.Node):
        adj = dc.backward(out)
        analytic = [dc.grad_of(adj, leaf) for leaf in leaves]
    else:
        analytic = [np.zeros_like(a) for a in args]
    worst = 0.0
    for i, a in enumerate(args):
        def partial(x, i=i):
            xs = list(args)
            xs[i] = x
            return float(dc.value_of(scalar(*xs)))

        fd = dc.central_difference(partial, a.copy(), step)
        if a.size:
            worst = max(worst, float(np.max(dc.relative_error(analytic[i], fd, FLOOR))))
    return CheckResult(name, worst, n_params)


# -------------------------------------------------------------- fixtures


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x) if margin else x


def _mlp_kink_free(spec: dc.MlpSpec, params, x) -> bool:
    if spec.activation != "relu":
        return True
    h = np.atleast_2d(x)
    layers = sivi._layer_views(spec, np.asarray(params))
    for i, (W, b) in enumerate(layers):
        pre = h @ W + b
        if i < len(layers) - 1:
            if np.min(np.abs(pre)) < _KINK:
                return False
            h = np.maximum(pre, 0.0)
    return True


def _sivi_fixture(rng, full_cov: bool, activation: str, kind: str):
    """Small model, pool and target whose relu units stay clear of their kinks."""
    for _ in range(50):
        model = sivi.SemiImplicitModel(
            z_dim=2, eps_dim=2, eps_var=1.0, hidden=(4, 3), activation=activation, full_cov=full_cov
        )
        theta = model.init(rng, log_std=-0.5)
        theta[model.n_mean :] += 0.1 * rng.normal(size=model.n_cov)
        pool = sivi.build_pool(model, 3, int(rng.integers(2**31)))
        eps_hat = model.sample_eps(rng, 8)
        if _mlp_kink_free(model.mlp, theta[: model.n_mean], np.vstack([pool.eps, eps_hat])):
            return model, theta, pool, eps_hat, sivi.toy_target(kind)
    raise RuntimeError("could not draw a kink-free fixture")


def _elementwise_checks(rng) -> list[CheckResult]:
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = np.exp(rng.normal(size=(3, 4)))
    return [
        check("add", lambda a, b: a + b, [x, y], rng),
        check("sub", lambda a, b: a - b, [x, y], rng),
        check("mul", lambda a, b: a * b, [x, y], rng),
        check("div", lambda a, b: a / b, [x, pos + 0.5], rng),
        check("neg", lambda a: -a, [x], rng),
        check("square", dc.square, [x], rng),
        check("exp", dc.exp, [x], rng),
        check("log", dc.log, [pos], rng),
        check("tanh", dc.tanh, [x], rng),
        check("relu", dc.relu, [_away_from_zero(rng, (3, 4))], rng),
        check("log_sigmoid", dc.log_sigmoid, [3.0 * x], rng),
        check("broadcast", lambda a, b: a * b, [x, rng.normal(size=(1, 4))], rng),
    ]


def _structural_checks(rng) -> list[CheckResult]:
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    v = rng.normal(size=4)
    L = np.tril(rng.normal(size=(3, 3)), -1) + np.diag(np.exp(rng.normal(size=3)) + 0.5)
    R = rng.normal(size=(5, 3))
    idx = rng.integers(0, 4, size=6)
    return [
        check("sum", lambda a: dc.sum_(a, axis=1), [A], rng),
        check("logsumexp", lambda a: dc.logsumexp(3.0 * a, axis=0), [A], rng),
        check("matmul", dc.matmul, [A, B], rng),
        check("matvec", dc.matmul, [A, v], rng),
        check("transpose", dc.transpose, [A], rng),
        check("reshape", lambda a: dc.reshape(a, (2, 6)), [A], rng),
        check("getitem", lambda a: dc.getitem(a, (slice(None), idx)), [A], rng),
        check("embed", lambda a: dc.embed(a, (4, 4), np.tril_indices(4)), [rng.normal(size=10)], rng),
        check("expand_dims", lambda a: dc.expand_dims(a, 1) * B[None, :, :1].T, [A], rng),
        check("tril_solve_rows", dc.tril_solve_rows, [L, R], rng),
        check("cholesky_from_raw", dc.cholesky_from_raw, [np.tril(rng.normal(size=(3, 3)))], rng),
    ]


def _model_checks(rng) -> list[CheckResult]:
    out = []
    for act in ("relu", "tanh"):
        spec = dc.MlpSpec(3, (5, 4), 2, act)
        for _ in range(50):
            params = spec.init(rng) + 0.1 * rng.normal(size=spec.n_params)
            x = rng.normal(size=(4, 3))
            if _mlp_kink_free(spec, params, x):
                break
        out.append(check(f"mlp_{act}", lambda p, xx, spec=spec: dc.mlp_forward(spec, p, xx), [params, x], rng))
    d = 3
    x = rng.normal(size=(4, d))
    mean = rng.normal(size=(4, d))
    log_sd = 0.3 * rng.normal(size=d)
    raw = np.tril(0.5 * rng.normal(size=(d, d)))
    out.append(check(
        "gaussian_logpdf_diag", lambda a, m, s: dc.gaussian_logpdf(a, dc.GaussianParams(m, s)), [x, mean, log_sd], rng
    ))
    out.append(check(
        "gaussian_logpdf_full",
        lambda a, m, s: dc.gaussian_logpdf(a, dc.GaussianParams(m, s, True)),
        [x, mean, raw],
        rng,
    ))
    u = rng.normal(size=(4, d))
    out.append(check("reparam_diag", lambda m, s: dc.reparam_sample(dc.GaussianParams(m, s), u), [mean, log_sd], rng))
    out.append(check(
        "reparam_full", lambda m, s: dc.reparam_sample(dc.GaussianParams(m, s, True), u), [mean, raw], rng
    ))
    z = rng.normal(size=(5, 2)) * 1.5
    for kind in sivi.TOY_KINDS:
        out.append(check(f"toy_{kind}", lambda zz, kind=kind: sivi.toy_log_density(kind, zz), [z], rng))
    data = sivi.synthetic_blr(20, 3, int(rng.integers(2**31)))
    out.append(check("blr_log_joint", lambda zz: sivi.blr_log_joint(data, zz), [rng.normal(size=(4, 3))], rng))
    return out


def _sivi_checks(rng, trial: int) -> list[CheckResult]:
    out = []
    full = bool(trial % 2)
    act = "relu" if trial % 4 < 2 else "tanh"
    kind = sivi.TOY_KINDS[trial % 3]
    model, theta, pool, eps_hat, target = _sivi_fixture(rng, full, act, kind)
    j = int(rng.integers(pool.n))
    out.append(check(
        "log_ratio_J", lambda th: sivi.log_ratio_J(model, th, pool, j, eps_hat[0], target), [theta], rng
    ))
    out.append(check(
        "log_ratio_matrix", lambda th: sivi.log_ratio_matrix(model, th, pool, target, eps_hat[:2]), [theta], rng
    ))
    # end-to-end estimator with d = n, exact y and a fixed inner batch
    problem = sivi.make_compositional(model, pool, target)
    out.append(_end_to_end("civi_sivi", problem, theta, eps_hat[2:], rng))
    lp = LognormalProblem.random(n=4, p=3, noise=0.3, coupled=0.2, seed=int(rng.integers(2**31)))
    for analytic in (True, False):
        prob = lp.problem(analytic=analytic)
        out.append(_end_to_end(
            f"civi_lognormal_{'analytic' if analytic else 'tape'}",
            prob,
            0.3 * rng.normal(size=3),
            prob.sample_inner(rng, 6),
            rng,
        ))
    return out


def _end_to_end(name, problem, theta, draws, rng) -> CheckResult:
    """sketch_gradient with d = n, every index sampled once and y = gbar."""
    n = problem.n

    def estimate(th):
        gb = OracleGBatch(problem, th, draws)
        idx = np.arange(n)
        fb = OracleFBatch(indices=idx, log_y_at=gb.log_mean(idx), n=n)
        return sketch_gradient(fb, gb, SketchPlan(n, n, "uniform"), rng)

    theta = np.asarray(theta, dtype=np.float64)
    grad = estimate(theta)
    fd = dc.central_difference(lambda th: problem.loss_estimate(th, draws), theta.copy())
    return CheckResult(name, float(np.max(dc.relative_error(grad, fd, FLOOR))), theta.size)


def run_gradcheck(trials: int = 100, seed: int = 0, tol: float = 1e-4, model_p: int | None = None) -> GradcheckReport:
    """Sweep every differentiable operation over ``trials`` random fixtures.

    ``model_p=0`` checks a model without parameters, which yields an empty
    report.
    """
    report = GradcheckReport(tol=tol)
    if model_p == 0:
        return report
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        report.results.extend(_elementwise_checks(rng))
        report.results.extend(_structural_checks(rng))
        report.results.extend(_model_checks(rng))
        report.results.extend(_sivi_checks(rng, trial))
    return report


def worst_ops(report: GradcheckReport, k: int = 5) -> list[tuple[str, float]]:
    ops = sorted(report.by_op().items(), key=lambda kv: -kv[1])
    return [(name, err) for name, err in ops[:k] if math.isfinite(err)]
