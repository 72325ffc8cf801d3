"""CSV, grid, sample and manifest files written next to every run."""

from __future__ import annotations

import csv
import json
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

TRAJECTORY_COLUMNS = ("t", "loss", "grad_norm", "alpha", "wall_ms")


def _fmt(x) -> str:
    # repr of a Python float round-trips exactly
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def write_trajectory_csv(path, records: list[dict]) -> None:
    cols = list(TRAJECTORY_COLUMNS)
    if records and "bias" in records[0]:
        cols.append("bias")
    last = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in records:
            if rec["t"] <= last:
                raise ValueError(f"trajectory t must increase, got {rec['t']} after {last}")
            last = rec["t"]
            vals = [rec[c] for c in cols]
            if not all(np.isfinite(v) for v in vals):
                raise ValueError(f"non-finite trajectory entry at t={rec['t']}")
            w.writerow([_fmt(v) for v in vals])


def read_trajectory_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "t" else float(v)) for k, v in row.items()} for row in rows]


def write_grid_csv(path, xs: np.ndarray, ys: np.ndarray, logdens: np.ndarray) -> None:
    """Rows ordered with x varying fastest (``logdens`` has shape (len(ys), len(xs)))."""
    X, Y = np.meshgrid(xs, ys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "logdensity"])
        for x, y, v in zip(X.ravel(), Y.ravel(), np.asarray(logdens).ravel()):
            w.writerow([_fmt(x), _fmt(y), _fmt(v)])


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_samples_csv(path, z: np.ndarray) -> None:
    z = np.atleast_2d(z)
    header = ",".join(f"z{i + 1}" for i in range(z.shape[1]))
    np.savetxt(path, z, delimiter=",", header=header, comments="", fmt="%.17g")


def read_samples_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "pyyaml", "civi"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out_dir, cfg, outputs: Iterable[str], command: Optional[list[str]] = None) -> Path:
    path = Path(out_dir) / "manifest.yaml"
    doc = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "experiment": cfg.experiment,
        "versions": versions(),
        "command": list(sys.argv if command is None else command),
        "outputs": sorted(outputs),
        "config": cfg.to_dict(),
    }
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def load_manifest(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or "config" not in doc:
        raise ValueError(f"{path} is not a run manifest")
    return doc
