"""CI-VI: ADAM-like primary steps plus extrapolation-smoothing of the inner mean.

One iteration at step t:

1. sample outer indices against the smoothed ``log_y`` and inner draws at
   ``theta_t``; combine them into a (sketched) gradient estimate;
2. moment update and parameter step;
3. extrapolate to ``z_{t+1}`` and blend a fresh inner mean at ``z_{t+1}``
   into ``log_y`` (log-domain throughout).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import composition as comp
from .composition import CompositionalProblem
from .sketch import SketchPlan, estimate_gradient

CHECKPOINT_VERSION = 1
TAYLOR_ORDER = 8
_TAYLOR_TOL = 1e-17
# exp() of anything outside this window is not a normal finite float64
_EXP_HI = 709.0
_EXP_LO = -708.0
ROTATE = 7


class ConfigError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, t: int):
        super().__init__(f"non-finite gradient estimate at iteration {t}")
        self.t = t


class OptimizerError(RuntimeError):
    """A step failed; carries the iteration and the state as it was before that step."""

    def __init__(self, t: int, state: dict, cause: BaseException):
        super().__init__(f"iteration {t} failed: {cause!r}")
        self.t = t
        self.state = state


# ------------------------------------------------------------------ schedules


@dataclass(frozen=True)
class GroupOverride:
    """C_alpha / C_gamma for the parameter slice [start, stop)."""

    start: int
    stop: int
    C_alpha: float
    C_gamma: float


@dataclass
class ScheduleConfig:
    C_alpha: float = 3e-4
    C_beta: float = 0.99
    C1: float = 100.0
    C2: float = 1000.0
    C3: Optional[float] = None  # defaults to C2
    C_gamma: float = 0.9
    mu: float = 0.999
    xi: float = 1e-8
    T: int = 200
    sketch_d: Optional[int] = None  # None: exact contraction over the sampled support
    sketch_mode: str = "sparse"
    constant_batches: bool = False
    groups: tuple = ()
    n_chunks: int = 1
    output: str = "uniform"  # or "final"

    def __post_init__(self):
        self.groups = tuple(g if isinstance(g, GroupOverride) else GroupOverride(**g) for g in self.groups)
        self.validate()

    @property
    def K3_const(self) -> float:
        return self.C2 if self.C3 is None else self.C3

    def validate(self) -> None:
        if not 0.0 < self.C_beta < 1.0:
            raise ConfigError(f"C_beta must lie in (0, 1), got {self.C_beta}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu must lie in (0, 1), got {self.mu}")
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        for name in ("C1", "C2", "K3_const"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.sketch_d is not None and self.sketch_d < 1:
            raise ConfigError("sketch_d must be at least 1")
        if self.sketch_mode not in ("uniform", "sparse"):
            raise ConfigError(f"unknown sketch_mode {self.sketch_mode!r}")
        if self.output not in ("uniform", "final"):
            raise ConfigError(f"unknown output mode {self.output!r}")
        if self.n_chunks < 1:
            raise ConfigError("n_chunks must be at least 1")
        t = np.arange(1, self.T + 1, dtype=np.float64)
        pairs = [(self.C_alpha, self.C_gamma)] + [(g.C_alpha, g.C_gamma) for g in self.groups]
        for c_a, c_g in pairs:
            if not c_a > 0 or not c_g > 0:
                raise ConfigError("C_alpha and C_gamma must be positive")
            g1 = c_g * self.mu**t
            g2 = 1.0 - c_a / t**0.4 * (1.0 - g1) ** 2
            if np.any(g1 >= 1.0):
                raise ConfigError(f"gamma1 leaves [0, 1) for C_gamma={c_g}")
            bad = np.flatnonzero((g2 <= 0.0) | (g2 >= 1.0))
            if bad.size:
                raise ConfigError(f"gamma2 leaves (0, 1) at t={bad[0] + 1} for C_alpha={c_a}, C_gamma={c_g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d


class Schedule(NamedTuple):
    alpha: object
    beta: float
    gamma1: object
    gamma2: object
    K1: int
    K2: int
    K3: int


def _batch(C: float, t: int, constant: bool) -> int:
    return int(math.ceil(C if constant else C * t**0.8 - 1e-12))


def schedule(t: int, cfg: ScheduleConfig, p: Optional[int] = None) -> Schedule:
    """Step sizes, momentum weights and batch sizes at iteration t.

    With group overrides and ``p`` given, alpha/gamma1/gamma2 are length-p
    vectors.
    """
    if t < 1:
        raise ValueError("t starts at 1")
    c_alpha, c_gamma = cfg.C_alpha, cfg.C_gamma
    if cfg.groups and p is not None:
        c_alpha = np.full(p, cfg.C_alpha)
        c_gamma = np.full(p, cfg.C_gamma)
        for g in cfg.groups:
            c_alpha[g.start : g.stop] = g.C_alpha
            c_gamma[g.start : g.stop] = g.C_gamma
    gamma1 = c_gamma * cfg.mu**t
    return Schedule(
        alpha=c_alpha / t**0.2,
        beta=cfg.C_beta,
        gamma1=gamma1,
        gamma2=1.0 - c_alpha / t**0.4 * (1.0 - gamma1) ** 2,
        K1=_batch(cfg.C1, t, cfg.constant_batches),
        K2=_batch(cfg.C2, t, cfg.constant_batches),
        K3=_batch(cfg.K3_const, t, cfg.constant_batches),
    )


# ---------------------------------------------------------------------- state


@dataclass
class OptimizerState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    z: np.ndarray
    log_y: np.ndarray
    t: int = 1
    chunks: list = field(default_factory=list)
    active: int = 0
    rotations: np.ndarray = None
    theta_out: np.ndarray = None

    @classmethod
    def fresh(cls, theta0, n: int, n_chunks: int = 1) -> "OptimizerState":
        theta0 = np.array(theta0, dtype=np.float64)
        p = theta0.size
        return cls(
            theta=theta0.copy(),
            m=np.zeros(p),
            v=np.zeros(p),
            z=theta0.copy(),
            log_y=np.zeros(n),
            chunks=[c.astype(np.int64) for c in np.array_split(np.arange(n), n_chunks)],
            rotations=np.zeros(n_chunks, dtype=np.int64),
            theta_out=theta0.copy(),
        )

    @classmethod
    def from_snapshot(cls, snap: dict, n_chunks: int = 1) -> "OptimizerState":
        n = snap["log_y"].size
        return cls(
            chunks=[c.astype(np.int64) for c in np.array_split(np.arange(n), n_chunks)],
            **{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in snap.items()},
        )

    @property
    def chunk(self) -> np.ndarray:
        return self.chunks[self.active]

    def snapshot(self) -> dict:
        return {
            "theta": self.theta.copy(),
            "m": self.m.copy(),
            "v": self.v.copy(),
            "z": self.z.copy(),
            "log_y": self.log_y.copy(),
            "t": self.t,
            "active": self.active,
            "rotations": self.rotations.copy(),
            "theta_out": self.theta_out.copy(),
        }


def primary_update(state: OptimizerState, grad, alpha, gamma1, gamma2, xi: float) -> OptimizerState:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(state.t)
    state.m = gamma1 * state.m + (1.0 - gamma1) * grad
    state.v = gamma2 * state.v + (1.0 - gamma2) * grad * grad
    state.theta = state.theta - alpha * state.m / (np.sqrt(state.v) + xi)
    return state


def extrapolate(theta_t, theta_next, beta: float) -> np.ndarray:
    if beta == 0:
        raise ValueError("extrapolation needs beta > 0")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    return (1.0 - 1.0 / beta) * np.asarray(theta_t) + (1.0 / beta) * np.asarray(theta_next)


# ------------------------------------------------------- log-domain smoothing


def taylor_log1p(r, order: int = TAYLOR_ORDER):
    """sum_{i=1}^{order} (-1)^(i-1) r^i / i, the truncated series of log(1 + r)."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    # Horner form, highest power first
    for i in range(order, 0, -1):
        out = r * ((-1.0) ** (i - 1) / i + out)
    return out


def log_add(a, b, order: int = TAYLOR_ORDER):
    """log(exp(a) + exp(b)) elementwise, never forming exp(a) or exp(b).

    Where a plain evaluation would overflow or underflow, the correction
    log(1 + r), r = exp(min - max) <= 1, comes from the truncated series
    whenever its remainder r^(N+1)/(N+1) is below 1e-17 and from log1p
    otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        gap = lo - hi
        gap = np.where(np.isneginf(lo), -np.inf, gap)
        r = np.exp(gap)
        out = hi + np.log1p(r)
        extreme = (np.abs(hi) > _EXP_HI) | (lo < _EXP_LO)
        extreme &= np.isfinite(hi) & np.isfinite(lo)
        series_ok = r ** (order + 1) / (order + 1) <= _TAYLOR_TOL
        use = extreme & series_ok
        if np.any(use):
            out = np.where(use, hi + taylor_log1p(r, order), out)
    return out


def smooth_update_log(log_y, log_gbar, beta: float, chunk=None) -> np.ndarray:
    """log((1 - beta) y + beta gbar), only on ``chunk`` (default: all entries).

    ``log_gbar`` is either full length or aligned with ``chunk``.
    """
    log_y = np.array(log_y, dtype=np.float64)
    log_gbar = np.asarray(log_gbar, dtype=np.float64)
    idx = np.arange(log_y.size) if chunk is None else np.asarray(chunk)
    lg = log_gbar if log_gbar.size == idx.size else log_gbar[idx]
    with np.errstate(divide="ignore"):
        a = math.log1p(-beta) + log_y[idx] if beta < 1 else np.full(idx.size, -np.inf)
    b = math.log(beta) + lg
    log_y[idx] = log_add(a, b)
    return log_y


def chunk_rotate(state: OptimizerState, log_gbar_new) -> OptimizerState:
    """Advance to the next chunk and re-initialize its entries of log_y.

    ``log_gbar_new`` is full length or aligned with the incoming chunk.
    """
    state.active = (state.active + 1) % len(state.chunks)
    idx = state.chunk
    vals = np.asarray(log_gbar_new, dtype=np.float64)
    state.log_y = state.log_y.copy()
    state.log_y[idx] = vals if vals.size == idx.size else vals[idx]
    state.rotations[state.active] += 1
    return state


def rotation_period(cfg: ScheduleConfig) -> int:
    return max(1, math.ceil(cfg.T / (cfg.n_chunks * 4)))


# ------------------------------------------------------------------ main loop


@dataclass
class RunResult:
    theta_out: np.ndarray
    state: OptimizerState
    trajectory: list


def init_state(problem: CompositionalProblem, theta0, cfg: ScheduleConfig, seed: int) -> OptimizerState:
    """Fresh state; log_y starts at the inner mean at z_1 from an independent batch."""
    if np.size(theta0) != problem.p:
        raise ValueError(f"initial parameters have size {np.size(theta0)}, problem needs {problem.p}")
    state = OptimizerState.fresh(theta0, problem.n, cfg.n_chunks)
    K3 = schedule(1, cfg).K3
    gb = comp.oracle_g(problem, state.z, K3, comp.rng_stream(seed, 0, comp.INIT))
    state.log_y = gb.log_mean()
    return state


def run(
    problem: CompositionalProblem,
    theta0,
    cfg: ScheduleConfig,
    seed: int = 0,
    state: Optional[OptimizerState] = None,
    deterministic: bool = False,
    bias_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    bias_at: Optional[set] = None,
    callback: Optional[Callable[[OptimizerState, dict], Optional[bool]]] = None,
    iters: Optional[int] = None,
    freeze_theta: bool = False,
) -> RunResult:
    """Run (or resume) CI-VI for ``cfg.T`` iterations in total.

    ``bias_fn(theta)`` returns the exact gradient; when given, the squared
    error of the estimate is logged at the iterations in ``bias_at`` (all
    iterations if ``bias_at`` is None).  ``iters`` stops early after that
    many iterations of this call, leaving a resumable state; so does a
    ``callback`` returning True.  ``freeze_theta`` keeps the parameters fixed
    (moments and the smoothing still run), which isolates the estimator.
    """
    if cfg.sketch_d is not None and cfg.sketch_d > problem.n:
        raise ConfigError(f"sketch_d={cfg.sketch_d} exceeds n={problem.n}")
    if state is None:
        state = init_state(problem, theta0, cfg, seed)
    if len(state.chunks) != cfg.n_chunks:
        raise ConfigError("state chunk layout does not match config")
    plan = None if cfg.sketch_d is None else SketchPlan(cfg.sketch_d, problem.n, cfg.sketch_mode)
    period = rotation_period(cfg)
    p = problem.p
    traj = []
    stop = cfg.T if iters is None else min(cfg.T, state.t - 1 + iters)
    while state.t <= stop:
        t = state.t
        tick = time.perf_counter()
        before = state.snapshot()
        try:
            sch = schedule(t, cfg, p)
            support = state.chunk if cfg.n_chunks > 1 else None
            fb = comp.oracle_f(state.log_y, sch.K1, comp.rng_stream(seed, t, comp.ORACLE_F), support)
            gb = comp.oracle_g(problem, state.theta, sch.K2, comp.rng_stream(seed, t, comp.ORACLE_G))
            grad = estimate_gradient(fb, gb, plan, comp.rng_stream(seed, t, comp.SKETCH))
            counts = fb.counts()
            cols = np.flatnonzero(counts)
            loss = float(counts[cols] @ gb.log_mean(cols) / fb.K)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss estimate at iteration {t}")
            theta_t = state.theta.copy()
            primary_update(state, grad, sch.alpha, sch.gamma1, sch.gamma2, cfg.xi)
            if freeze_theta:
                state.theta = theta_t.copy()
            state.z = extrapolate(theta_t, state.theta, sch.beta)
            gs = comp.oracle_g(problem, state.z, sch.K3, comp.rng_stream(seed, t, comp.ORACLE_G_SMOOTH))
            state.log_y = smooth_update_log(state.log_y, gs.log_mean(support), sch.beta, support)
            if cfg.n_chunks > 1 and t % period == 0:
                nxt = state.chunks[(state.active + 1) % cfg.n_chunks]
                gr = comp.oracle_g(problem, state.z, sch.K3, comp.rng_stream(seed, t, ROTATE))
                chunk_rotate(state, gr.log_mean(nxt))
            # reservoir over theta_2 .. theta_{T+1}
            if cfg.output == "final" or comp.rng_stream(seed, t, comp.OUTPUT).random() * t < 1.0:
                state.theta_out = state.theta.copy()
        except Exception as exc:  # noqa: BLE001
            raise OptimizerError(t, before, exc) from exc
        rec = {
            "t": t,
            "loss": loss,
            "grad_norm": float(np.linalg.norm(grad)),
            "alpha": float(np.mean(sch.alpha)),
            "wall_ms": 0.0 if deterministic else (time.perf_counter() - tick) * 1e3,
        }
        if bias_fn is not None and (bias_at is None or t in bias_at):
            rec["bias"] = float(np.sum((bias_fn(theta_t) - grad) ** 2))
        traj.append(rec)
        state.t += 1
        if callback is not None and callback(state, rec):
            break
    return RunResult(theta_out=state.theta_out.copy(), state=state, trajectory=traj)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path, state: OptimizerState, cfg: ScheduleConfig, seed: int) -> None:
    meta = {"version": CHECKPOINT_VERSION, "t": state.t, "active": state.active, "seed": seed, "config": cfg.to_dict()}
    np.savez(
        path,
        theta=state.theta,
        m=state.m,
        v=state.v,
        z=state.z,
        log_y=state.log_y,
        rotations=state.rotations,
        theta_out=state.theta_out,
        n_chunks=np.array(len(state.chunks)),
        meta=np.array(json.dumps(meta)),
    )


def load_checkpoint(path) -> tuple[OptimizerState, ScheduleConfig, int]:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        n = f["log_y"].size
        state = OptimizerState(
            theta=f["theta"].copy(),
            m=f["m"].copy(),
            v=f["v"].copy(),
            z=f["z"].copy(),
            log_y=f["log_y"].copy(),
            t=int(meta["t"]),
            chunks=[c.astype(np.int64) for c in np.array_split(np.arange(n), int(f["n_chunks"]))],
            active=int(meta["active"]),
            rotations=f["rotations"].copy(),
            theta_out=f["theta_out"].copy(),
        )
    return state, ScheduleConfig(**meta["config"]), int(meta["seed"])
