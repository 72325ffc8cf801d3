"""Nested-expectation objectives and their sampling oracles.

The objective is ``L(theta) = E_nu[ log( E_eps[g_eps(theta)] )_nu ]`` with
``nu`` uniform over ``n`` outer indices.  The outer function is fixed to
``f_nu(y) = log(y_nu)`` so only the inner map has to be supplied, and it is
always supplied in log-domain: ``log_g(theta, draws, cols)`` returns an array
of shape ``(K, len(cols))`` holding ``log g_eps(theta)`` restricted to the
requested columns.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc

ORACLE_F = 0
ORACLE_G = 1
ORACLE_G_SMOOTH = 2
SKETCH = 3
OUTPUT = 4
INIT = 5
NMC = 6


def rng_stream(seed: int, t: int, oracle_id: int) -> np.random.Generator:
    """Independent generator for one oracle at one iteration.

    Philox is counter-based, so distinct keys give non-overlapping streams.
    """
    if not (0 <= seed < 2**64 and 0 <= t < 2**48 and 0 <= oracle_id < 2**16):
        raise ValueError("seed, t or oracle id out of range for stream keying")
    key = np.array([int(seed), (int(t) << 16) | int(oracle_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class ModelEvaluationError(RuntimeError):
    def __init__(self, msg, draw_index=None, pool_index=None):
        super().__init__(msg)
        self.draw_index = draw_index
        self.pool_index = pool_index


def log_mean_exp(vals: np.ndarray, axis: int = 0) -> np.ndarray:
    """log(mean(exp(vals))) along ``axis`` with a max shift."""
    # reduce over a contiguous last axis; numpy is much slower on narrow axis-0 reductions
    x = np.ascontiguousarray(vals.T if vals.ndim == 2 and axis == 0 else np.moveaxis(vals, axis, -1))
    m = x.max(axis=-1)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.exp(x - m[..., None]).sum(axis=-1)) + m - math.log(x.shape[-1])


LogG = Callable[[object, np.ndarray, Optional[np.ndarray]], object]


@dataclass
class CompositionalProblem:
    """Outer size ``n``, parameter size ``p`` and the log-domain inner map.

    ``grad_log_mean_fn`` is an optional closed-form replacement for the tape
    path of :meth:`grad_log_mean`; it must have the same signature.
    """

    n: int
    p: int
    log_g: LogG
    sample_inner: Callable[[np.random.Generator, int], np.ndarray]
    grad_log_mean_fn: Optional[Callable] = None
    name: str = "problem"

    def all_cols(self) -> np.ndarray:
        return np.arange(self.n)

    def log_values(self, theta, draws, cols=None) -> np.ndarray:
        out = np.asarray(self.log_g(np.asarray(theta, dtype=np.float64), draws, cols), dtype=np.float64)
        expected = (len(draws), self.n if cols is None else len(cols))
        if out.shape != expected:
            raise dc.ShapeError(f"log_g returned shape {out.shape}, expected {expected}")
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            col = int(bad[1]) if cols is None else int(np.asarray(cols)[bad[1]])
            raise ModelEvaluationError(
                f"non-finite inner value at draw {bad[0]}, column {col}", draw_index=int(bad[0]), pool_index=col
            )
        return out

    def log_mean(self, theta, draws, cols=None) -> np.ndarray:
        return log_mean_exp(self.log_values(theta, draws, cols))

    def grad_log_mean(self, theta, draws, cols, coeffs) -> np.ndarray:
        """sum_i coeffs[i] * grad_theta log(mean_k g_k(theta))[cols[i]]."""
        cols = np.asarray(cols, dtype=np.int64)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if cols.size == 0:
            return np.zeros(self.p)
        if self.grad_log_mean_fn is not None:
            return np.asarray(self.grad_log_mean_fn(np.asarray(theta, dtype=np.float64), draws, cols, coeffs))
        uniq, inv = np.unique(cols, return_inverse=True)
        c = np.zeros(uniq.size)
        np.add.at(c, inv, coeffs)

        def scalar(th):
            lg = self.log_g(th, draws, uniq)
            return dc.sum_(dc.logsumexp(lg, axis=0) * c)

        _, grad = dc.value_and_grad(scalar, np.asarray(theta, dtype=np.float64))
        return grad

    def loss_estimate(self, theta, draws) -> float:
        """(1/n) sum_nu log gbar_nu with gbar over the given draws."""
        return float(np.mean(self.log_mean(theta, draws)))


def from_callback(n, p, log_g, sample_inner=None, name="callback") -> CompositionalProblem:
    """Wrap a user ``log_g(theta, draws) -> (K, n)`` callback (columns sliced afterwards)."""

    def sliced(theta, draws, cols):
        out = log_g(theta, draws)
        return out if cols is None else out[:, np.asarray(cols)]

    if sample_inner is None:
        sample_inner = lambda rng, K: np.zeros((K, 1))  # noqa: E731
    return CompositionalProblem(n=n, p=p, log_g=sliced, sample_inner=sample_inner, name=name)


# ---------------------------------------------------------------------- oracles


@dataclass
class OracleFBatch:
    """Sampled outer indices with the sparse gradients of log at ``y``."""

    indices: np.ndarray
    log_y_at: np.ndarray  # log y at each sampled index
    n: int

    @property
    def K(self) -> int:
        return len(self.indices)

    @property
    def grads(self) -> np.ndarray:
        """Nonzero entry 1/y_nu of each sampled gradient e_nu / y_nu."""
        return np.exp(-self.log_y_at)

    def counts(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.K, self.n))
        out[np.arange(self.K), self.indices] = self.grads
        return out

    def mean_grad(self) -> np.ndarray:
        return self.dense().mean(axis=0)


def oracle_f(log_y: np.ndarray, K1: int, rng: np.random.Generator, support=None) -> OracleFBatch:
    """Draw ``K1`` i.i.d. uniform outer indices (over ``support`` if given)."""
    if K1 < 1:
        raise ValueError("K1 must be at least 1")
    log_y = np.asarray(log_y, dtype=np.float64)
    n = log_y.size
    if support is None:
        idx = rng.integers(0, n, size=K1)
    else:
        support = np.asarray(support)
        idx = support[rng.integers(0, support.size, size=K1)]
    if not np.all(np.isfinite(log_y[idx])):
        raise ValueError("log y is non-finite at a sampled index")
    return OracleFBatch(indices=idx, log_y_at=log_y[idx], n=n)


@dataclass
class OracleGBatch:
    """Inner draws at a fixed point with lazily evaluated values and Jacobians.

    Values are kept in log-domain.  Jacobian columns are only produced on
    request; ``touched`` records which columns have been contracted.
    """

    problem: CompositionalProblem
    theta: np.ndarray
    draws: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)
    touched: list = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return len(self.draws)

    def log_values(self, cols=None) -> np.ndarray:
        key = None if cols is None else tuple(np.asarray(cols).tolist())
        if key not in self._cache:
            self._cache[key] = self.problem.log_values(self.theta, self.draws, cols)
        return self._cache[key]

    def log_mean(self, cols=None) -> np.ndarray:
        return log_mean_exp(self.log_values(cols))

    def mean(self, cols=None) -> np.ndarray:
        return np.exp(self.log_mean(cols))

    def contract_log(self, cols, coeffs) -> np.ndarray:
        """sum_i coeffs[i] * grad log gbar[cols[i]]; touches only ``cols``."""
        cols = np.asarray(cols, dtype=np.int64)
        self.touched.extend(np.unique(cols).tolist())
        return self.problem.grad_log_mean(self.theta, self.draws, cols, coeffs)

    def jacobian_column(self, j: int) -> np.ndarray:
        """Column j of the linear-domain Jacobian of gbar, shape (p,)."""
        gbar_j = self.mean([j])[0]
        return gbar_j * self.contract_log([j], [1.0])

    def draw_jacobian_column(self, k: int, j: int) -> np.ndarray:
        """Column j of grad g for the single draw k."""
        single = self.draws[k : k + 1]
        log_gkj = self.problem.log_values(self.theta, single, [j])[0, 0]
        self.touched.append(int(j))
        return math.exp(log_gkj) * self.problem.grad_log_mean(self.theta, single, [j], [1.0])

    def jacobian(self) -> np.ndarray:
        """Full (n, p) Jacobian of gbar; opt-in, one column at a time."""
        return np.stack([self.jacobian_column(j) for j in range(self.problem.n)])


def oracle_g(problem: CompositionalProblem, z, K2: int, rng: np.random.Generator) -> OracleGBatch:
    if K2 < 1:
        raise ValueError("K2 must be at least 1")
    draws = problem.sample_inner(rng, K2)
    return OracleGBatch(problem=problem, theta=np.asarray(z, dtype=np.float64), draws=draws)


def reference_gradient(problem: CompositionalProblem, theta, K_ref: int, rng: np.random.Generator) -> np.ndarray:
    """Plug-in gradient with the outer expectation summed exactly over all n."""
    if K_ref < 1000:
        warnings.warn(f"reference_gradient with K_ref={K_ref} < 1000 carries visible nested bias", stacklevel=2)
    draws = problem.sample_inner(rng, K_ref)
    cols = problem.all_cols()
    return problem.grad_log_mean(theta, draws, cols, np.full(problem.n, 1.0 / problem.n))


# ------------------------------------------------------------- assumption data


@dataclass
class AssumptionConstants:
    """Empirical (lower-bound) estimates of the smoothness/variance constants."""

    B_f: float
    M_f: float
    L_f: float
    M_g: float
    L_g: float
    sigma1: float
    sigma2: float
    sigma3: float

    def __post_init__(self):
        for name, val in vars(self).items():
            if not val >= 0:
                raise ValueError(f"{name} must be nonnegative, got {val}")

    @property
    def smoothness(self) -> float:
        """Lipschitz constant of grad L implied by the other constants."""
        return self.M_g**2 * self.L_f + self.L_g * self.M_f


def estimate_constants(problem: CompositionalProblem, probes, K: int = 256, rng=None) -> AssumptionConstants:
    """Sup-estimates over a set of probe points (at least two)."""
    probes = [np.asarray(p, dtype=np.float64) for p in probes]
    if len(probes) < 2:
        raise ValueError("need at least two probe points")
    rng = np.random.default_rng(0) if rng is None else rng
    draws = problem.sample_inner(rng, K)
    jacs, gbars, var2, var3 = [], [], [], []
    for th in probes:
        batch = OracleGBatch(problem, th, draws)
        jac = batch.jacobian()
        jacs.append(jac)
        gbar = batch.mean()
        gbars.append(gbar)
        g_draws = np.exp(batch.log_values())
        var3.append(np.mean(np.sum((g_draws - gbar) ** 2, axis=1)))
        # per-draw Jacobian spread, sampled on a few draws to stay cheap
        spreads = []
        for k in range(min(K, 8)):
            jk = np.stack([batch.draw_jacobian_column(k, j) for j in range(problem.n)])
            spreads.append(np.linalg.norm(jk - jac, 2) ** 2)
        var2.append(np.mean(spreads))
    M_g = max(np.linalg.norm(j, 2) for j in jacs)
    L_g = 0.0
    for a in range(len(probes)):
        for b in range(a + 1, len(probes)):
            dist = np.linalg.norm(probes[a] - probes[b])
            if dist > 0:
                L_g = max(L_g, np.linalg.norm(jacs[a] - jacs[b], 2) / dist)
    allg = np.concatenate(gbars)
    lo, hi = float(allg.min()), float(allg.max())
    n = problem.n
    # Var of e_nu / y_nu over uniform nu, evaluated at y = gbar
    sig1 = max(float(np.sum(1.0 / g**2) / n - np.sum((1.0 / g / n) ** 2)) for g in gbars)
    return AssumptionConstants(
        B_f=max(abs(math.log(lo)), abs(math.log(hi))),
        M_f=1.0 / lo,
        L_f=1.0 / lo**2,
        M_g=float(M_g),
        L_g=float(L_g),
        sigma1=math.sqrt(max(sig1, 0.0)),
        sigma2=math.sqrt(max(var2)),
        sigma3=math.sqrt(max(var3)),
    )
