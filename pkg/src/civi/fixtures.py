"""Synthetic compositional problems with closed-form inner means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .composition import CompositionalProblem


@dataclass
class LognormalProblem:
    """log g_nu = m_nu(theta) + sigma_nu(theta) * eps_nu with eps_nu ~ N(0, 1).

    m_nu = A_nu . theta + b_nu + (kappa/2)|theta - c_nu|^2 and
    sigma_nu = s_nu + S_nu . theta.  Since E[g_nu] = exp(m_nu + sigma_nu^2 / 2)
    the true loss and its gradient are available exactly.
    """

    A: np.ndarray  # (n, p)
    b: np.ndarray  # (n,)
    c: np.ndarray  # (n, p)
    s: np.ndarray  # (n,)
    S: np.ndarray  # (n, p)
    kappa: float = 1.0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[1]

    @classmethod
    def random(cls, n=8, p=4, kappa=1.0, noise=0.5, coupled=0.0, seed=0) -> "LognormalProblem":
        """Random instance; ``coupled`` > 0 makes the noise level depend on theta."""
        rng = np.random.default_rng(seed)
        return cls(
            A=rng.normal(size=(n, p)),
            b=rng.normal(size=n),
            c=rng.normal(size=(n, p)),
            s=np.full(n, noise),
            S=coupled * rng.normal(size=(n, p)),
            kappa=kappa,
        )

    def mean_log(self, theta) -> np.ndarray:
        d = np.asarray(theta) - self.c
        return self.A @ theta + self.b + 0.5 * self.kappa * np.sum(d * d, axis=1)

    def sigma(self, theta) -> np.ndarray:
        return self.s + self.S @ theta

    def log_inner_mean(self, theta) -> np.ndarray:
        """Exact log E[g(theta)]."""
        return self.mean_log(theta) + 0.5 * self.sigma(theta) ** 2

    def loss(self, theta) -> float:
        return float(np.mean(self.log_inner_mean(theta)))

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        per = self.A + self.kappa * (theta - self.c) + self.sigma(theta)[:, None] * self.S
        return per.mean(axis=0)

    def minimizer(self, iters: int = 200) -> np.ndarray:
        """Newton iterations on the exact loss (convex when kappa > 0)."""
        theta = np.zeros(self.p)
        H = self.kappa * np.eye(self.p) + self.S.T @ self.S / self.n
        for _ in range(iters):
            step = np.linalg.solve(H, self.grad(theta))
            theta = theta - step
            if np.linalg.norm(step) < 1e-14:
                break
        return theta

    # --- compositional view -------------------------------------------------

    def _log_g(self, theta, draws, cols):
        cols = np.arange(self.n) if cols is None else np.asarray(cols)
        A, b, c, s, S = self.A[cols], self.b[cols], self.c[cols], self.s[cols], self.S[cols]
        eps = draws[:, cols]
        if not isinstance(theta, dc.Node):
            d = theta - c
            m = A @ theta + b + 0.5 * self.kappa * np.einsum("ij,ij->i", d, d)
            return m + (S @ theta + s) * eps
        d = dc.reshape(theta, (1, -1)) - c
        m = dc.matmul(A, theta) + b + 0.5 * self.kappa * dc.sum_(dc.square(d), axis=1)
        sig = dc.matmul(S, theta) + s
        return m + sig * eps

    def _grad_log_mean(self, theta, draws, cols, coeffs):
        eps = np.ascontiguousarray(draws[:, cols].T)  # (m, K)
        lg = np.ascontiguousarray(self._log_g(theta, draws, cols).T)
        w = np.exp(lg - lg.max(axis=1)[:, None])
        eps_bar = np.einsum("ij,ij->i", w, eps) / w.sum(axis=1)
        per = self.A[cols] + self.kappa * (theta - self.c[cols]) + eps_bar[:, None] * self.S[cols]
        return coeffs @ per

    def problem(self, analytic: bool = True) -> CompositionalProblem:
        def sample(rng, K):
            return rng.standard_normal((K, self.n))

        return CompositionalProblem(
            n=self.n,
            p=self.p,
            log_g=self._log_g,
            sample_inner=sample,
            grad_log_mean_fn=self._grad_log_mean if analytic else None,
            name="lognormal",
        )


def deterministic_problem(log_g_fn, n: int, p: int) -> CompositionalProblem:
    """Problem whose inner map ignores the noise: ``log_g_fn(theta) -> (n,)``."""

    def log_g(theta, draws, cols):
        row = log_g_fn(theta)
        if cols is not None:
            row = row[np.asarray(cols)] if not isinstance(row, dc.Node) else dc.getitem(row, np.asarray(cols))
        ones = np.ones((len(draws), 1))
        return dc.matmul(ones, dc.reshape(row, (1, -1)))

    return CompositionalProblem(
        n=n, p=p, log_g=log_g, sample_inner=lambda rng, K: np.zeros((K, 1)), name="deterministic"
    )


def quadratic_problem(n=6, p=3, seed=0) -> CompositionalProblem:
    """Deterministic g_nu = exp(0.5 |theta - c_nu|^2 + b_nu); convex loss."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(n, p))
    b = rng.normal(size=n)

    def log_g_fn(theta):
        if isinstance(theta, dc.Node):
            d = dc.reshape(theta, (1, -1)) - c
        else:
            d = np.asarray(theta) - c
        return 0.5 * dc.sum_(dc.square(d), axis=1) + b

    prob = deterministic_problem(log_g_fn, n, p)
    prob.name = "quadratic"
    return prob

