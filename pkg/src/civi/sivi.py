"""Semi-implicit variational families and their compositional KL objective.

The family is q_theta(z) = E_{eps ~ N(0, c I)}[ N(z; mu_theta1(eps), L L^T) ].
A fixed pool of pairs (u_j, eps_j) gives the outer samples
h_j = mu(eps_j) + L u_j, and the inner noise is a fresh mixing draw eps_hat:

    log g_{eps_hat}(theta)_j = log q(h_j | eps_hat) - log p(h_j)

so that the mean over eps_hat of g_j estimates q(h_j) / p(h_j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .composition import CompositionalProblem, ModelEvaluationError, log_mean_exp
from .solver import GroupOverride

TOY_KINDS = ("two-modal", "star", "banana")


# ---------------------------------------------------------------------- model


@dataclass(frozen=True)
class SemiImplicitModel:
    z_dim: int
    eps_dim: int = 3
    eps_var: float = 1.0
    hidden: tuple = (50, 50)
    activation: str = "relu"
    full_cov: bool = False

    @property
    def mlp(self) -> dc.MlpSpec:
        return dc.MlpSpec(self.eps_dim, tuple(self.hidden), self.z_dim, self.activation)

    @property
    def n_mean(self) -> int:
        return self.mlp.n_params

    @property
    def n_cov(self) -> int:
        d = self.z_dim
        return d * (d + 1) // 2 if self.full_cov else d

    @property
    def p(self) -> int:
        return self.n_mean + self.n_cov

    def init(self, rng: np.random.Generator, log_std: float = 0.0) -> np.ndarray:
        """Xavier-normal mean network; covariance factor exp(log_std) * I."""
        cov = np.zeros(self.n_cov)
        if self.full_cov:
            rows, cols = np.tril_indices(self.z_dim)
            cov[rows == cols] = log_std
        else:
            cov[:] = log_std
        return np.concatenate([self.mlp.init(rng), cov])

    def groups(self, C_alpha, C_gamma) -> tuple:
        """Per-group overrides: (mean network, covariance) each get their own constants."""
        return (
            GroupOverride(0, self.n_mean, C_alpha[0], C_gamma[0]),
            GroupOverride(self.n_mean, self.p, C_alpha[1], C_gamma[1]),
        )

    def cov_scale(self, theta):
        """Slice of theta holding the covariance factor, shaped for GaussianParams."""
        raw = theta[self.n_mean :]
        if not self.full_cov:
            return raw
        d = self.z_dim
        return dc.embed(raw, (d, d), np.tril_indices(d))

    def mean(self, theta, eps):
        return dc.mlp_forward(self.mlp, theta[: self.n_mean], eps)

    def conditional(self, theta, eps) -> dc.GaussianParams:
        return dc.GaussianParams(self.mean(theta, eps), self.cov_scale(theta), self.full_cov)

    def sample_eps(self, rng: np.random.Generator, K: int) -> np.ndarray:
        return math.sqrt(self.eps_var) * rng.standard_normal((K, self.eps_dim))

    def sample(self, theta, rng: np.random.Generator, N: int) -> np.ndarray:
        eps = self.sample_eps(rng, N)
        u = rng.standard_normal((N, self.z_dim))
        return np.asarray(dc.reparam_sample(self.conditional(np.asarray(theta), eps), u))

    def log_q_mc(self, theta, z, eps_mix: np.ndarray, batch: int = 512) -> np.ndarray:
        """log q(z) estimated as log mean_k q(z | eps_k) over the given mixing draws."""
        theta = np.asarray(theta)
        scale = self.cov_scale(theta)
        mu = self.mean(theta, eps_mix)  # (K, d)
        out = np.empty(len(z))
        for s in range(0, len(z), batch):
            zz = z[s : s + batch]
            lp = dc.gaussian_logpdf(zz[None, :, :], dc.GaussianParams(mu[:, None, :], scale, self.full_cov))
            out[s : s + batch] = log_mean_exp(lp)
        return out


@dataclass(frozen=True)
class SamplePool:
    u: np.ndarray  # (n, z_dim)
    eps: np.ndarray  # (n, eps_dim)
    seed: int

    @property
    def n(self) -> int:
        return self.u.shape[0]


def build_pool(model: SemiImplicitModel, n: int, seed: int) -> SamplePool:
    if n < 1:
        raise ValueError("pool size must be at least 1")
    rng = np.random.default_rng([int(seed), 0x9001])
    eps = model.sample_eps(rng, n)
    u = rng.standard_normal((n, model.z_dim))
    return SamplePool(u=u, eps=eps, seed=seed)


# -------------------------------------------------------------------- targets


@dataclass(frozen=True)
class TargetDensity:
    kind: str
    log_density: Callable  # z of shape (..., d) -> (...)
    dim: int


_STAR_COVS = (np.array([[2.0, 1.8], [1.8, 2.0]]), np.array([[2.0, -1.8], [-1.8, 2.0]]))
_BANANA_COV = np.array([[1.0, 0.9], [0.9, 1.0]])


def _mvn_logpdf_const(z, mean, cov):
    """log N(z; mean, cov) for a constant covariance, differentiable in z."""
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    d = z - mean
    quad = dc.sum_(d * dc.matmul(d, prec), axis=-1)
    return -0.5 * quad - 0.5 * logdet - 0.5 * cov.shape[0] * dc.LOG_2PI


def _stack_last(parts):
    """Stack (...,) pieces into (..., k) through the tape."""
    shape = np.shape(dc.value_of(parts[0]))
    k = len(parts)
    out = None
    for i, part in enumerate(parts):
        idx = (Ellipsis, i)
        piece = dc.embed(part, shape + (k,), idx)
        out = piece if out is None else out + piece
    return out


def toy_log_density(kind: str, z):
    """Normalized log-density of the 2-D toy targets, batched over leading axes."""
    if kind == "two-modal":
        comps = [
            _mvn_logpdf_const(z, np.array([-2.0, 0.0]), np.eye(2)),
            _mvn_logpdf_const(z, np.array([2.0, 0.0]), np.eye(2)),
        ]
        return dc.logsumexp(_stack_last(comps), axis=-1) + math.log(0.5)
    if kind == "star":
        comps = [_mvn_logpdf_const(z, np.zeros(2), c) for c in _STAR_COVS]
        return dc.logsumexp(_stack_last(comps), axis=-1) + math.log(0.5)
    if kind == "banana":
        z1 = z[..., 0]
        z2 = z[..., 1]
        x2 = z2 + dc.square(z1) + 1.0
        x = _stack_last([z1, x2])
        return _mvn_logpdf_const(x, np.zeros(2), _BANANA_COV)
    raise ValueError(f"unknown toy target {kind!r}; expected one of {TOY_KINDS}")


def toy_target(kind: str) -> TargetDensity:
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy target {kind!r}; expected one of {TOY_KINDS}")
    return TargetDensity(kind, lambda z: toy_log_density(kind, z), 2)


def gaussian_target(mean, var) -> TargetDensity:
    """Isotropic Gaussian target, mostly for tests."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    d = mean.size
    return TargetDensity("custom", lambda z: _mvn_logpdf_const(z, mean, var * np.eye(d)), d)


# ------------------------------------------------------------------------ BLR


@dataclass(frozen=True)
class BlrDataset:
    X: np.ndarray  # (N, D)
    y: np.ndarray  # (N,) in {0, 1}
    prior_var: float = 100.0

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (N, D) and y must be (N,)")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain missing or non-finite values")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def flipped_labels(self) -> "BlrDataset":
        """Labels swapped; the likelihood at z equals the original one at -z."""
        return BlrDataset(self.X, 1.0 - self.y, self.prior_var)

    def negated_features(self) -> "BlrDataset":
        return BlrDataset(-self.X, self.y, self.prior_var)

    @classmethod
    def empty(cls, D: int, prior_var: float = 100.0) -> "BlrDataset":
        return cls(np.zeros((0, D)), np.zeros(0), prior_var)


def standardize(X: np.ndarray) -> np.ndarray:
    if X.shape[0] == 0:
        return X
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def load_blr_csv(path, standardize_features: bool = True, prior_var: float = 100.0) -> BlrDataset:
    """Headerless CSV, label in the last column."""
    data = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column plus the label")
    X, y = data[:, :-1], data[:, -1]
    if standardize_features:
        X = standardize(X)
    return BlrDataset(X, y, prior_var)


def synthetic_blr(N: int, D: int, seed: int, w_true=None, prior_var: float = 100.0) -> BlrDataset:
    """Standardized Gaussian features and Bernoulli(sigmoid(x.w)) labels."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=D) if w_true is None else np.asarray(w_true, dtype=np.float64)
    X = standardize(rng.normal(size=(N, D)))
    prob = 1.0 / (1.0 + np.exp(-(X @ w)))
    y = (rng.random(N) < prob).astype(np.float64)
    return BlrDataset(X, y, prior_var)


def write_blr_csv(path, data: BlrDataset) -> None:
    np.savetxt(Path(path), np.column_stack([data.X, data.y]), delimiter=",", fmt="%.17g")


def blr_log_joint(data: BlrDataset, z):
    """log N(z; 0, prior_var I) + sum_i log Bernoulli(y_i | sigmoid(x_i . z)); batched over z."""
    D = data.D
    prior = -0.5 * dc.sum_(dc.square(z), axis=-1) / data.prior_var - 0.5 * D * math.log(
        2.0 * math.pi * data.prior_var
    )
    if data.N == 0:
        return prior
    sign = 2.0 * data.y - 1.0
    logits = dc.matmul(z, data.X.T) * sign  # log(1 - sigmoid(a)) = log sigmoid(-a)
    return prior + dc.sum_(dc.log_sigmoid(logits), axis=-1)


def blr_target(data: BlrDataset) -> TargetDensity:
    return TargetDensity("blr", lambda z: blr_log_joint(data, z), data.D)


# ------------------------------------------------------------ the objective


def pool_points(model: SemiImplicitModel, theta, pool: SamplePool, cols=None):
    """h_j = mu(eps_j) + L u_j for the requested pool entries, shape (m, d)."""
    idx = slice(None) if cols is None else np.asarray(cols)
    return dc.reparam_sample(model.conditional(theta, pool.eps[idx]), pool.u[idx])


def log_ratio_matrix(model, theta, pool, target: TargetDensity, eps_hat, cols=None):
    """(K, m) array of log q(h_j | eps_hat_k) - log p(h_j); theta enters twice."""
    if target.dim != model.z_dim:
        raise dc.ShapeError(f"target has dim {target.dim}, model has z_dim {model.z_dim}")
    h = pool_points(model, theta, pool, cols)
    log_p = target.log_density(h)
    lp_val = dc.value_of(log_p)
    if not np.all(np.isfinite(lp_val)):
        bad = int(np.flatnonzero(~np.isfinite(lp_val))[0])
        j = bad if cols is None else int(np.asarray(cols)[bad])
        raise ModelEvaluationError(f"target log-density is not finite at pool entry {j}", pool_index=j)
    mu_hat = model.mean(theta, eps_hat)  # (K, d)
    params = dc.GaussianParams(dc.expand_dims(mu_hat, 1), model.cov_scale(theta), model.full_cov)
    log_q = dc.gaussian_logpdf(dc.expand_dims(h, 0), params)  # (K, m)
    return log_q - log_p


def log_ratio_J(model, theta, pool, j: int, eps_hat, target: TargetDensity):
    """Scalar log J for pool entry j and a single mixing draw."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64).reshape(1, -1)
    out = log_ratio_matrix(model, theta, pool, target, eps_hat, np.array([j]))
    return dc.sum_(out)


def make_compositional(model: SemiImplicitModel, pool: SamplePool, target: TargetDensity) -> CompositionalProblem:
    def log_g(theta, draws, cols):
        return log_ratio_matrix(model, theta, pool, target, draws, cols)

    return CompositionalProblem(
        n=pool.n, p=model.p, log_g=log_g, sample_inner=model.sample_eps, name=f"sivi-{target.kind}"
    )


def kl_estimate(model, theta, target: TargetDensity, rng, n_samples=10_000, n_mix=2_000) -> float:
    """Monte-Carlo KL(q || p) with log q from a fresh mixture of n_mix conditionals."""
    z = model.sample(theta, rng, n_samples)
    log_q = model.log_q_mc(theta, z, model.sample_eps(rng, n_mix))
    return float(np.mean(log_q - np.asarray(target.log_density(z))))


def neg_elbo_estimate(model, theta, target: TargetDensity, rng, n: int = 4096, K: int = 4096) -> float:
    """Objective value on a fresh pool with K inner draws."""
    problem = make_compositional(model, build_pool(model, n, int(rng.integers(2**31))), target)
    return problem.loss_estimate(np.asarray(theta), model.sample_eps(rng, K))


# ------------------------------------------------------ hand-built parameters


def _layer_views(spec: dc.MlpSpec, params: np.ndarray):
    """(W, b) views into a flat parameter vector, one pair per layer."""
    out, off = [], 0
    for fan_in, fan_out in spec.layer_shapes:
        W = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        out.append((W, b))
    return out


def matched_toy_params(model: SemiImplicitModel, kind: str, steep: float = 1e4, knot_step: float = 0.25,
                       banana_noise: float = 0.05) -> np.ndarray:
    """Parameters whose semi-implicit marginal reproduces a toy target.

    Needs a relu model with two hidden layers, diagonal covariance and
    eps_var 1.  ``two-modal`` switches the mean between (+-2, 0) on the sign
    of eps_1 through a steep clamp.  ``banana`` builds x_1 from eps_1 and the
    quadratic part from a piecewise-linear interpolant on relu knots; the
    small extra noise on z_1 keeps the mixture estimate of log q usable.
    The star target has no such construction.
    """
    if model.z_dim != 2 or model.full_cov or model.activation != "relu" or len(model.hidden) != 2:
        raise ValueError("matched parameters need a 2-d relu model with two hidden layers and diag covariance")
    theta = np.zeros(model.p)
    (W1, b1), (W2, b2), (W3, b3) = _layer_views(model.mlp, theta[: model.n_mean])
    cov = theta[model.n_mean :]
    if kind == "two-modal":
        W1[0, 0], b1[0] = steep, 1.0
        W1[0, 1], b1[1] = steep, -1.0
        W2[0, 0] = W2[1, 1] = 1.0
        W3[0, 0], W3[1, 0], b3[0] = 2.0, -2.0, -2.0
        cov[:] = 0.0
    elif kind == "banana":
        a = math.sqrt(1.0 - banana_noise**2)
        n_knots = min(model.hidden[0], model.hidden[1]) // 2
        if n_knots < 2:
            raise ValueError("hidden layers too narrow for the banana construction")
        k = np.arange(n_knots) * knot_step
        # unit i: relu(eps - k_i), unit n_knots + i: relu(-eps - k_i)
        W1[0, :n_knots], b1[:n_knots] = 1.0, -k
        W1[0, n_knots : 2 * n_knots], b1[n_knots : 2 * n_knots] = -1.0, -k
        W2[np.arange(2 * n_knots), np.arange(2 * n_knots)] = 1.0
        # x = a * eps; x^2 ~ a^2 * PL(eps^2), PL slopes (2i+1) h on [ih, (i+1)h]
        sq = np.full(n_knots, 2.0 * knot_step)
        sq[0] = knot_step
        lin = np.zeros(2 * n_knots)
        lin[0], lin[n_knots] = 1.0, -1.0  # eps = relu(eps) - relu(-eps)
        quad = np.concatenate([sq, sq]) * a * a
        W3[: 2 * n_knots, 0] = a * lin
        W3[: 2 * n_knots, 1] = 0.9 * a * lin - quad
        b3[1] = -1.0
        cov[0] = math.log(banana_noise)
        cov[1] = 0.5 * math.log(1.0 - 0.9**2)
    else:
        raise ValueError(f"no matched construction for {kind!r}")
    return theta
