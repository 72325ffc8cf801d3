"""Experiment drivers: each takes a RunConfig, returns a report dict and writes artifacts."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.stats import gaussian_kde

from .. import sivi
from .. import solver
from ..fixtures import LognormalProblem
from ..solver import ConfigError, OptimizerError, ScheduleConfig
from . import io
from .config import RunConfig
from .gradcheck import run_gradcheck
from .mcmc import mcmc_oracle
from .recurrence import RecurrenceCase, check_recurrence

DEFAULT_EXTENT = {
    "two-modal": (-5.0, 5.0, -4.0, 4.0),
    "star": (-5.0, 5.0, -5.0, 5.0),
    "banana": (-3.5, 3.5, -11.0, 3.0),
}


class ExperimentAborted(RuntimeError):
    """Training diverged; ``checkpoint`` holds the state before the failing step."""

    def __init__(self, msg: str, checkpoint: Optional[Path]):
        super().__init__(msg)
        self.checkpoint = checkpoint


def _out_dir(cfg: RunConfig) -> Optional[Path]:
    if cfg.out is None:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_model(cfg: RunConfig, z_dim: int) -> sivi.SemiImplicitModel:
    m = cfg.model
    return sivi.SemiImplicitModel(
        z_dim=z_dim,
        eps_dim=m.eps_dim,
        eps_var=m.eps_var,
        hidden=tuple(m.hidden),
        activation=m.activation,
        full_cov=m.full_cov,
    )


def model_schedule(cfg: RunConfig, model: sivi.SemiImplicitModel) -> ScheduleConfig:
    """The configured schedule, with covariance-block overrides when requested."""
    sched = cfg.schedule
    if cfg.model.cov_C_alpha is None:
        return sched
    d = sched.to_dict()
    d["groups"] = model.groups(
        (sched.C_alpha, cfg.model.cov_C_alpha), (sched.C_gamma, cfg.model.cov_C_gamma)
    )
    return ScheduleConfig(**d)


def _train(cfg: RunConfig, model, target, out: Optional[Path]):
    pool = sivi.build_pool(model, cfg.n, cfg.seed)
    problem = sivi.make_compositional(model, pool, target)
    theta0 = model.init(np.random.default_rng(cfg.model.init_seed), cfg.model.init_log_std)
    sched = model_schedule(cfg, model)
    tick = time.perf_counter()
    try:
        res = solver.run(problem, theta0, sched, seed=cfg.seed, deterministic=cfg.deterministic)
    except OptimizerError as exc:
        ckpt = None
        if out is not None:
            ckpt = out / "checkpoint_last.npz"
            state = solver.OptimizerState.from_snapshot(exc.state, sched.n_chunks)
            solver.save_checkpoint(ckpt, state, sched, cfg.seed)
        raise ExperimentAborted(f"training diverged: {exc}", ckpt) from exc
    wall = time.perf_counter() - tick
    return theta0, res, wall


def _kde_kl(samples: np.ndarray, target_logp: np.ndarray) -> float:
    """KL with log q from a Scott-bandwidth KDE fitted on the other half of the samples."""
    half = len(samples) // 2
    kde = gaussian_kde(samples[:half].T)
    return float(np.mean(kde.logpdf(samples[half:].T) - target_logp[half:]))


def run_toy(cfg: RunConfig) -> dict:
    if cfg.target not in sivi.TOY_KINDS:
        raise ConfigError(f"unknown toy target {cfg.target!r}")
    out = _out_dir(cfg)
    target = sivi.toy_target(cfg.target)
    model = build_model(cfg, 2)
    theta0, res, wall = _train(cfg, model, target, out)
    ev = cfg.eval
    rng = np.random.default_rng(ev.seed)
    kl_init = sivi.kl_estimate(model, theta0, target, rng, ev.n_samples, ev.kl_mix)
    kl_final = sivi.kl_estimate(model, res.theta_out, target, rng, ev.n_samples, ev.kl_mix)
    samples = model.sample(res.theta_out, rng, ev.n_samples)
    target_logp = np.asarray(target.log_density(samples))
    kl_final_kde = _kde_kl(samples, target_logp)
    centers, _ = kmeans2(samples, 2, seed=int(ev.seed), minit="++")
    centers = centers[np.argsort(centers[:, 0])]

    extent = ev.extent or DEFAULT_EXTENT[cfg.target]
    xs = np.linspace(extent[0], extent[1], ev.grid)
    ys = np.linspace(extent[2], extent[3], ev.grid)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    target_grid = np.asarray(target.log_density(pts)).reshape(X.shape)
    with np.errstate(divide="ignore"):
        learned_grid = np.log(gaussian_kde(samples.T)(pts.T)).reshape(X.shape)
    learned_grid = np.maximum(learned_grid, -1e300)

    report = {
        "experiment": "toy",
        "target": cfg.target,
        "iterations": len(res.trajectory),
        "wall_s": wall,
        "sec_per_iter": wall / max(1, len(res.trajectory)),
        "kl_init": kl_init,
        "kl_final": kl_final,
        "kl_final_kde": kl_final_kde,
        "kmeans_centers": centers.tolist(),
        "sample_mean": samples.mean(axis=0).tolist(),
    }
    if out is not None:
        io.write_trajectory_csv(out / "trajectory.csv", res.trajectory)
        io.write_grid_csv(out / "target_grid.csv", xs, ys, target_grid)
        io.write_grid_csv(out / "learned_grid.csv", xs, ys, learned_grid)
        io.write_samples_csv(out / "samples.csv", samples)
        io.write_json(out / "report.json", report)
        np.save(out / "theta.npy", res.theta_out)
        io.write_manifest(
            out, cfg, ["trajectory.csv", "target_grid.csv", "learned_grid.csv", "samples.csv", "report.json", "theta.npy"]
        )
    report["trajectory"] = res.trajectory
    report["theta"] = res.theta_out
    report["samples"] = samples
    return report


def load_dataset(cfg: RunConfig) -> sivi.BlrDataset:
    if cfg.data is not None:
        path = Path(cfg.data)
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} does not exist")
        return sivi.load_blr_csv(path)
    s = cfg.synthetic
    return sivi.synthetic_blr(s.N, s.D, s.seed)


def _moments(z: np.ndarray) -> dict:
    return {"mean": z.mean(axis=0).tolist(), "std": z.std(axis=0, ddof=1).tolist()}


def run_blr(cfg: RunConfig, data: Optional[sivi.BlrDataset] = None) -> dict:
    out = _out_dir(cfg)
    data = load_dataset(cfg) if data is None else data
    model = build_model(cfg, data.D)
    theta0, res, wall = _train(cfg, model, sivi.blr_target(data), out)
    rng = np.random.default_rng(cfg.eval.seed)
    samples = model.sample(res.theta_out, rng, cfg.eval.n_samples)
    report = {
        "experiment": "blr",
        "N": data.N,
        "D": data.D,
        "iterations": len(res.trajectory),
        "wall_s": wall,
        "civi": _moments(samples),
    }
    if cfg.mcmc.steps > 0:
        chain = mcmc_oracle(data, cfg.mcmc.steps, cfg.mcmc.seed)
        ref = chain.summary()
        report["mcmc"] = ref
        q = report["civi"]
        report["abs_mean_diff"] = np.abs(np.subtract(q["mean"], ref["mean"])).tolist()
        report["rel_std_diff"] = (np.abs(np.subtract(q["std"], ref["std"])) / np.asarray(ref["std"])).tolist()
        report["mcmc_samples"] = chain.samples
    if out is not None:
        io.write_trajectory_csv(out / "trajectory.csv", res.trajectory)
        io.write_samples_csv(out / "samples.csv", samples)
        files = ["trajectory.csv", "samples.csv", "report.json", "theta.npy"]
        if "mcmc_samples" in report:
            io.write_samples_csv(out / "mcmc_samples.csv", report["mcmc_samples"])
            files.append("mcmc_samples.csv")
        io.write_json(out / "report.json", {k: v for k, v in report.items() if k != "mcmc_samples"})
        np.save(out / "theta.npy", res.theta_out)
        io.write_manifest(out, cfg, files)
    report["trajectory"] = res.trajectory
    report["theta"] = res.theta_out
    report["samples"] = samples
    return report


# ------------------------------------------------------------------ bias rate


def _bias_rep(args) -> tuple[int, list[float]]:
    cfg, seed = args
    f = cfg.bias.fixture
    lp = LognormalProblem.random(n=f.n, p=f.p, kappa=f.kappa, noise=f.noise, coupled=f.coupled, seed=f.seed)
    checkpoints = sorted({int(c) for c in cfg.bias.checkpoints})
    d = cfg.schedule.to_dict()
    d["T"] = checkpoints[-1]
    sched = ScheduleConfig(**d)
    res = solver.run(
        lp.problem(),
        np.zeros(f.p),
        sched,
        seed=seed,
        deterministic=True,
        bias_fn=lp.grad,
        bias_at=set(checkpoints),
        freeze_theta=cfg.bias.freeze_theta,
    )
    by_t = {r["t"]: r["bias"] for r in res.trajectory if "bias" in r}
    return seed, [by_t[t] for t in checkpoints]


def loglog_slope(t, b) -> float:
    x, y = np.log(np.asarray(t, dtype=np.float64)), np.log(np.asarray(b, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def run_bias_rate(cfg: RunConfig) -> dict:
    """Squared error of the gradient estimate at checkpoints, averaged over repetitions."""
    out = _out_dir(cfg)
    checkpoints = sorted({int(c) for c in cfg.bias.checkpoints})
    jobs = [(cfg, cfg.seed + r) for r in range(cfg.bias.reps)]
    if cfg.bias.workers > 1:
        with ProcessPoolExecutor(cfg.bias.workers) as pool:
            results = list(pool.map(_bias_rep, jobs))
    else:
        results = [_bias_rep(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    B = np.array([r[1] for r in results])  # (reps, checkpoints)
    mean_b = B.mean(axis=0)
    se_b = B.std(axis=0, ddof=1) / math.sqrt(len(B)) if len(B) > 1 else np.zeros_like(mean_b)
    report = {
        "experiment": "bias-rate",
        "checkpoints": checkpoints,
        "reps": len(B),
        "mean_bias": mean_b.tolist(),
        "se_bias": se_b.tolist(),
        "freeze_theta": cfg.bias.freeze_theta,
    }
    if len(checkpoints) >= 2 and np.all(mean_b > 0):
        report["slope"] = loglog_slope(checkpoints, mean_b)
        # percentile bootstrap over repetitions
        rng = np.random.default_rng([cfg.seed, 0xB007])
        boots = []
        for _ in range(1000):
            mb = B[rng.integers(0, len(B), len(B))].mean(axis=0)
            if np.all(mb > 0):
                boots.append(loglog_slope(checkpoints, mb))
        lo, hi = np.percentile(boots, [2.5, 97.5])
        report["slope_ci95"] = [float(lo), float(hi)]
    else:
        report["slope"] = None
        report["slope_ci95"] = None
    if out is not None:
        with open(out / "bias_rate.csv", "w") as fh:
            fh.write("t,mean_bias,se_bias\n")
            for t, m, s in zip(checkpoints, mean_b, se_b):
                fh.write(f"{t},{m!r},{s!r}\n")
        io.write_json(out / "report.json", report)
        io.write_manifest(out, cfg, ["bias_rate.csv", "report.json"])
    report["per_rep"] = B
    return report


# ------------------------------------------------------- thin wrappers


def run_recurrence(case: RecurrenceCase) -> dict:
    return check_recurrence(case).to_dict()


def run_gradcheck_experiment(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    g = cfg.gradcheck
    report = run_gradcheck(g.trials, g.seed, g.tol).to_dict()
    if out is not None:
        io.write_json(out / "report.json", report)
        io.write_manifest(out, cfg, ["report.json"])
    return report


def run_config(cfg: RunConfig) -> dict:
    if cfg.experiment == "toy":
        return run_toy(cfg)
    if cfg.experiment == "blr":
        return run_blr(cfg)
    if cfg.experiment == "bias-rate":
        return run_bias_rate(cfg)
    if cfg.experiment == "gradcheck":
        return run_gradcheck_experiment(cfg)
    raise ConfigError(f"experiment {cfg.experiment!r} is not driven by a RunConfig")
