"""Randomized column sketches of the Jacobian-vector product grad(gbar)^T grad(f).

With ``f_nu(y) = log y_nu`` the averaged outer gradient is sparse: it only
has mass on the sampled indices.  Both estimators below therefore reduce to
a weighted sum of ``grad log gbar_j`` over a small set of columns ``j``, with
the weights assembled in log-domain and exponentiated once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .composition import OracleFBatch, OracleGBatch


@dataclass(frozen=True)
class SketchPlan:
    d: int
    n: int
    mode: str = "sparse"  # "uniform" or "sparse"

    def __post_init__(self):
        if self.mode not in ("uniform", "sparse"):
            raise ValueError(f"unknown sketch mode {self.mode!r}")
        if not 1 <= self.d <= self.n:
            raise ValueError(f"sketch size d={self.d} must lie in [1, {self.n}]")

    @property
    def scale(self) -> float:
        """n/d for the uniform sketch (the sparse scale depends on the support)."""
        return self.n / self.d


@dataclass
class SparseOuterGrad:
    """Entries of k = exp(log gbar - log K1 - log y + log count) on the sampled support."""

    indices: np.ndarray  # distinct sampled outer indices
    counts: np.ndarray  # multiplicities
    log_weights: np.ndarray
    n: int

    @property
    def nnz(self) -> int:
        return self.indices.size

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.indices] = self.weights()
        return out


def log_scale_combine(log_gbar, log_y, counts, K1: int) -> SparseOuterGrad:
    """Build k from full-length ``log_gbar``, ``log_y`` and hit ``counts``.

    Entries of ``log_gbar``/``log_y`` off the support are never read, so they
    may hold anything (including nan).
    """
    counts = np.asarray(counts)
    idx = np.flatnonzero(counts)
    lg = np.asarray(log_gbar, dtype=np.float64)[idx]
    ly = np.asarray(log_y, dtype=np.float64)[idx]
    logw = lg - math.log(K1) - ly + np.log(counts[idx].astype(np.float64))
    return SparseOuterGrad(indices=idx, counts=counts[idx], log_weights=logw, n=counts.size)


def _support_logs(fb: OracleFBatch, gb: OracleGBatch, cols: np.ndarray):
    """Dense log gbar / log y arrays filled only at ``cols``."""
    n = fb.n
    log_gbar = np.full(n, np.nan)
    log_y = np.full(n, np.nan)
    if cols.size:
        log_gbar[cols] = gb.log_mean(cols)
        uniq, first = np.unique(fb.indices, return_index=True)
        log_y[uniq] = fb.log_y_at[first]
    return log_gbar, log_y


def outer_combine(fb: OracleFBatch, gb: OracleGBatch, counts=None) -> SparseOuterGrad:
    """k for the given batches; ``counts`` defaults to the raw hit counts."""
    counts = fb.counts() if counts is None else np.asarray(counts)
    cols = np.flatnonzero(counts)
    log_gbar, log_y = _support_logs(fb, gb, cols)
    return log_scale_combine(log_gbar, log_y, counts, fb.K)


def full_product(fb: OracleFBatch, gb: OracleGBatch) -> np.ndarray:
    """grad(gbar)^T (1/K1) sum_a grad f_{nu_a}(y), no sketching."""
    k = outer_combine(fb, gb)
    return gb.contract_log(k.indices, k.weights())


def sketch_gradient(
    fb: OracleFBatch,
    gb: OracleGBatch,
    plan: SketchPlan,
    rng: np.random.Generator,
    shared: bool = False,
    subsets=None,
) -> np.ndarray:
    """Uniform column sketch with scale n/d.

    By default every outer sample ``a`` draws its own subset S_a, so the
    sketch noise averages out over K1.  ``shared=True`` uses one subset for
    the whole batch; ``subsets`` pins the subsets explicitly (one array, or
    one per outer sample).
    """
    n, d = plan.n, plan.d
    if subsets is not None:
        subsets = [np.asarray(s) for s in (subsets if np.ndim(subsets[0]) else [subsets])]
        if any(s.size == 0 for s in subsets):
            raise ValueError("empty sketch subset")
        scale = n / subsets[0].size
        if len(subsets) == 1:
            subsets = subsets * fb.K
    else:
        scale = plan.scale
        n_sub = 1 if shared else fb.K
        subsets = [rng.choice(n, size=d, replace=False) for _ in range(n_sub)]
        if shared:
            subsets = subsets * fb.K
    hits = np.array([nu in set(s.tolist()) for nu, s in zip(fb.indices.tolist(), subsets)])
    counts = np.bincount(fb.indices[hits], minlength=n)
    k = outer_combine(fb, gb, counts)
    if k.nnz == 0:
        return np.zeros(gb.problem.p)
    return gb.contract_log(k.indices, np.exp(k.log_weights + math.log(scale)))


def sketch_gradient_sparse(k: SparseOuterGrad, gb: OracleGBatch, plan: SketchPlan, rng: np.random.Generator):
    """Sketch restricted to the nonzero support of k, scale |support|/d."""
    if k.nnz == 0:
        return np.zeros(gb.problem.p)
    if plan.d >= k.nnz:
        return gb.contract_log(k.indices, k.weights())
    pick = np.sort(rng.choice(k.nnz, size=plan.d, replace=False))
    logw = k.log_weights[pick] + math.log(k.nnz / plan.d)
    return gb.contract_log(k.indices[pick], np.exp(logw))


def estimate_gradient(fb: OracleFBatch, gb: OracleGBatch, plan: SketchPlan | None, rng) -> np.ndarray:
    """Dispatch used by the optimizer; ``plan=None`` means the exact product."""
    if plan is None:
        return full_product(fb, gb)
    if plan.mode == "uniform":
        return sketch_gradient(fb, gb, plan, rng)
    return sketch_gradient_sparse(outer_combine(fb, gb), gb, plan, rng)
