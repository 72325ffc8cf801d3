"""Nested Monte-Carlo gradients with stock optimizers (the NMC baselines)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import composition as comp
from .composition import CompositionalProblem


@dataclass(frozen=True)
class NmcConfig:
    N: int = 10
    M: int = 10
    optimizer: str = "adam"  # adam | rmsprop | sgd
    lr: float = 3e-4
    lr_decay: float = 0.0  # lr_t = lr / t**lr_decay
    T: int = 1000

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be at least 1")
        if self.optimizer not in STEPPERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, t: int) -> float:
        return self.lr / t**self.lr_decay


def nmc_loss_grad(problem: CompositionalProblem, theta, cfg: NmcConfig, rng: np.random.Generator):
    """Plug-in loss (1/N) sum_i log gbar_{nu_i} with one batch of M inner draws.

    The gradient differentiates through the inner sample mean, so it is
    biased for finite M.
    """
    nu = rng.integers(0, problem.n, size=cfg.N)
    draws = problem.sample_inner(rng, cfg.M)
    counts = np.bincount(nu, minlength=problem.n)
    cols = np.flatnonzero(counts)
    log_gbar = problem.log_mean(theta, draws, cols)
    weights = counts[cols] / cfg.N
    loss = float(weights @ log_gbar)
    grad = problem.grad_log_mean(theta, draws, cols, weights)
    return loss, grad


def nmc_reciprocal_value(problem: CompositionalProblem, theta, N: int, M: int, rng, exact_outer: bool = False):
    """(1/N) sum_i 1 / gbar_{nu_i}: the plug-in value of E_nu[1 / (E g)_nu]."""
    draws = problem.sample_inner(rng, M)
    log_gbar = problem.log_mean(theta, draws)
    if exact_outer:
        return float(np.mean(np.exp(-log_gbar)))
    nu = rng.integers(0, problem.n, size=N)
    return float(np.mean(np.exp(-log_gbar[nu])))


# -------------------------------------------------------------------- steppers


@dataclass
class StepperState:
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def _check(grad, state):
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient at step {state.t + 1}")
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    state.t += 1
    return grad


def step_sgd(theta, grad, state: StepperState, lr: float, **_):
    grad = _check(grad, state)
    return np.asarray(theta) - lr * grad


def step_rmsprop(theta, grad, state: StepperState, lr: float, rho: float = 0.9, eps: float = 1e-8, **_):
    grad = _check(grad, state)
    state.v = rho * state.v + (1.0 - rho) * grad * grad
    return np.asarray(theta) - lr * grad / (np.sqrt(state.v) + eps)


def step_adam(theta, grad, state: StepperState, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8, **_):
    grad = _check(grad, state)
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return np.asarray(theta) - lr * m_hat / (np.sqrt(v_hat) + eps)


STEPPERS = {"adam": step_adam, "rmsprop": step_rmsprop, "sgd": step_sgd}


@dataclass
class NmcResult:
    theta: np.ndarray
    trajectory: list = field(default_factory=list)


def run_nmc(
    problem: CompositionalProblem,
    theta0,
    cfg: NmcConfig,
    seed: int = 0,
    callback: Optional[Callable[[int, np.ndarray, dict], bool]] = None,
) -> NmcResult:
    """Optimize the plug-in objective; ``callback`` returning True stops early.

    Each iteration costs M inner evaluations, recorded as ``g_evals``.
    """
    theta = np.array(theta0, dtype=np.float64)
    state = StepperState()
    step = STEPPERS[cfg.optimizer]
    traj = []
    evals = 0
    for t in range(1, cfg.T + 1):
        loss, grad = nmc_loss_grad(problem, theta, cfg, comp.rng_stream(seed, t, comp.NMC))
        theta = step(theta, grad, state, cfg.lr_at(t))
        evals += cfg.M
        rec = {"t": t, "loss": loss, "grad_norm": float(np.linalg.norm(grad)), "g_evals": evals}
        traj.append(rec)
        if callback is not None and callback(t, theta, rec):
            break
    return NmcResult(theta=theta, trajectory=traj)


def expected_plugin_loss(problem: CompositionalProblem, theta, M: int, reps: int, rng) -> float:
    """Average over reps of the exact-outer plug-in loss with M inner draws."""
    vals = [float(np.mean(problem.log_mean(theta, problem.sample_inner(rng, M)))) for _ in range(reps)]
    return float(np.mean(vals))

