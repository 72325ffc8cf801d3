"""Random-walk Metropolis used as a reference posterior."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

TARGET_ACCEPT = 0.234
_ADAPT_BLOCK = 500
_DRAW_BLOCK = 4096


@dataclass
class McmcResult:
    samples: np.ndarray  # (n_keep, d)
    accept_rate: float  # post burn-in
    step: float
    warning: bool  # acceptance outside [0.05, 0.7]

    def summary(self) -> dict:
        return {
            "mean": self.samples.mean(axis=0).tolist(),
            "std": self.samples.std(axis=0, ddof=1).tolist(),
            "accept_rate": self.accept_rate,
            "step": self.step,
            "warning": self.warning,
        }


def random_walk_metropolis(
    log_density: Callable[[np.ndarray], float],
    z0,
    steps: int,
    seed: int,
    burn_frac: float = 0.2,
    n_keep: int = 10_000,
) -> McmcResult:
    """Gaussian random walk; proposal shape and scale adapt during burn-in only.

    During burn-in the proposal covariance is the running sample covariance
    times step^2, and log(step) follows a Robbins-Monro recursion toward 0.234
    acceptance.  After burn-in the kernel is frozen, so the kept chain is a
    plain Metropolis chain.
    """
    if steps < 2:
        raise ValueError("need at least 2 steps")
    rng = np.random.default_rng([int(seed), 0x3C3C])
    z = np.array(z0, dtype=np.float64).reshape(-1)
    d = z.size
    lp = float(log_density(z))
    if not math.isfinite(lp):
        raise ValueError("log density is not finite at the starting point")
    burn = int(burn_frac * steps)
    keep_every = max(1, (steps - burn) // n_keep)
    log_step = math.log(2.38 / math.sqrt(d))
    chol = np.eye(d)
    # Welford accumulators for the burn-in covariance
    mean = z.copy()
    m2 = np.zeros((d, d))
    count = 1
    accepted = 0
    block_acc = 0
    kept = []
    step = math.exp(log_step)
    for i in range(1, steps + 1):
        j = (i - 1) % _DRAW_BLOCK
        if j == 0:
            noise = rng.standard_normal((_DRAW_BLOCK, d))
            log_u = np.log(rng.random(_DRAW_BLOCK))
        prop = z + step * (chol @ noise[j])
        lp_prop = float(log_density(prop))
        if log_u[j] < lp_prop - lp:
            z, lp = prop, lp_prop
            block_acc += 1
            if i > burn:
                accepted += 1
        if i <= burn:
            count += 1
            delta = z - mean
            mean += delta / count
            m2 += np.outer(delta, z - mean)
            if i % _ADAPT_BLOCK == 0:
                rate = block_acc / _ADAPT_BLOCK
                log_step += (rate - TARGET_ACCEPT) / math.sqrt(i / _ADAPT_BLOCK)
                step = math.exp(log_step)
                block_acc = 0
                cov = m2 / (count - 1) + 1e-10 * np.eye(d)
                try:
                    chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    pass
        elif (i - burn) % keep_every == 0 and len(kept) < n_keep:
            kept.append(z.copy())
    rate = accepted / max(1, steps - burn)
    return McmcResult(
        samples=np.array(kept).reshape(-1, d),
        accept_rate=rate,
        step=step,
        warning=not 0.05 <= rate <= 0.7,
    )


def blr_log_density(data) -> Callable[[np.ndarray], float]:
    """Plain-numpy log joint for a single z (the tape version is slower per call)."""
    sx = (2.0 * data.y - 1.0)[:, None] * data.X
    const = -0.5 * data.D * math.log(2.0 * math.pi * data.prior_var)
    inv = 0.5 / data.prior_var

    def log_density(z):
        return const - inv * float(z @ z) - float(np.sum(np.logaddexp(0.0, -(sx @ z))))

    return log_density


def mcmc_oracle(data, steps: int, seed: int, **kw) -> McmcResult:
    """Posterior draws for a BLR dataset, started at the prior mean."""
    return random_walk_metropolis(blr_log_density(data), np.zeros(data.D), steps, seed, **kw)
