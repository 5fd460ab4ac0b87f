"""CSV/JSON artifacts.  Floats are written with 17 significant digits so they round-trip exactly."""

from __future__ import annotations

import json
import math
import subprocess
from pathlib import Path

import numpy as np

from .frs import FrsTube

FLOAT_FMT = "%.17g"

TUBE_COLUMNS = (["t"] + [f"center{i}" for i in range(9)] + [f"shape{i}" for i in range(81)]
                + ["trace_inv", "logdet_inv", "step_ns"])
SAMPLE_COLUMNS = (["sample_id", "t"] + [f"x{i}" for i in range(9)] + [f"d{i}" for i in range(3)]
                  + [f"dhat{i}" for i in range(3)] + ["contained"])
BOUND_COLUMNS = ["t"] + [f"bound{i}" for i in range(9)] + [f"actual{i}" for i in range(9)]


def git_describe(cwd: str | Path | None = None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd or Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(o):
    # JSON has no inf/nan; encode them as strings
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return o


def write_json(path: Path, payload: dict) -> None:
    text = json.dumps(_clean(json.loads(json.dumps(payload, default=_json_default))), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def tube_table(tube: FrsTube) -> np.ndarray:
    n = len(tube)
    q = tube.shapes_inv[:, :9, :9]
    k = np.linalg.inv(q)
    k = 0.5 * (k + np.swapaxes(k, 1, 2))
    centers = tube.y_r[:, :9] + tube.centers[:, :9]
    return np.column_stack([tube.times, centers, k.reshape(n, 81), tube.trace_inv, tube.logdet_inv,
                            tube.step_ns.astype(float)])


def write_tube(path: Path, tube: FrsTube) -> None:
    fmt = [FLOAT_FMT] * (len(TUBE_COLUMNS) - 1) + ["%d"]
    np.savetxt(path, tube_table(tube), delimiter=",", header=",".join(TUBE_COLUMNS), comments="", fmt=fmt)


def read_tube(path: Path) -> dict:
    """Parse a tube CSV into times, centers (n, 9) and forward shapes (n, 9, 9)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {"t": data[:, 0], "center": data[:, 1:10], "shape": data[:, 10:91].reshape(-1, 9, 9),
            "trace_inv": data[:, 91], "logdet_inv": data[:, 92], "step_ns": data[:, 93].astype(np.int64)}


def write_samples(path: Path, times, x, d, d_hat, contained) -> None:
    """One row per (sample, grid time); ``x`` is ``(samples, steps + 1, 9)``."""
    s, n = x.shape[:2]
    ids = np.repeat(np.arange(s), n)
    table = np.column_stack([ids, np.tile(times, s), x.reshape(-1, 9), d.reshape(-1, 3), d_hat.reshape(-1, 3),
                             contained.reshape(-1).astype(int)])
    fmt = ["%d"] + [FLOAT_FMT] * 16 + ["%d"]
    np.savetxt(path, table, delimiter=",", header=",".join(SAMPLE_COLUMNS), comments="", fmt=fmt)


def read_samples(path: Path) -> dict:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {"sample_id": data[:, 0].astype(int), "t": data[:, 1], "x": data[:, 2:11], "d": data[:, 11:14],
            "d_hat": data[:, 14:17], "contained": data[:, 17].astype(bool)}


def write_error_bounds(path: Path, times, bounds, actual) -> None:
    np.savetxt(path, np.column_stack([times, bounds, actual]), delimiter=",", header=",".join(BOUND_COLUMNS),
               comments="", fmt=FLOAT_FMT)


def containment_from_files(tube_path: Path, samples_path: Path, slack: float = 1e-6) -> np.ndarray:
    """Recompute containment verdicts from exported data (for round-trip checks only)."""
    tube = read_tube(tube_path)
    samples = read_samples(samples_path)
    n = tube["t"].size
    k = np.arange(samples["t"].size) % n
    r = samples["x"] - tube["center"][k]
    return np.einsum("ni,nij,nj->n", r, tube["shape"][k], r) <= 1.0 + slack


def export_scenario1(result, out_dir: Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for mode, run in result.runs.items():
        p = out / f"tube_{mode.value}.csv"
        write_tube(p, run.tube)
        written.append(p)
        p = out / f"samples_{mode.value}.csv"
        write_samples(p, run.log.times, run.log.x, run.log.d, run.log.d_hat, run.contained)
        written.append(p)
        p = out / f"error_bounds_{mode.value}.csv"
        write_error_bounds(p, run.tube.times, *run.error_bounds())
        written.append(p)
    written += _write_meta(result, out)
    return written


def export_scenario2(result, out_dir: Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rt in result.tubes:
        p = out / f"tube_{rt.mode.value}_t{rt.index}.csv"
        write_tube(p, rt.tube)
        written.append(p)
    for name, log in result.flights.items():
        p = out / f"samples_{name}.csv"
        contained = np.ones(log.x.shape[:2], dtype=bool)
        for rt in result.tubes:
            if rt.mode.uses_estimate == (name == "proposed"):
                contained[0, rt.k_start:rt.k_start + rt.state_margin.size] &= rt.state_margin <= 1.0 + 1e-6
        write_samples(p, log.times, log.x, log.d, log.d_hat, contained)
        written.append(p)
    written += _write_meta(result, out)
    return written


def _write_meta(result, out: Path) -> list[Path]:
    cfg = result.config
    metrics = result.metrics()
    metrics.update(scenario_hash=cfg.scenario_hash(), seed=cfg.seed, git_describe=git_describe(),
                   config=cfg.to_dict())
    p1, p2 = out / "metrics.json", out / "stability.json"
    write_json(p1, metrics)
    write_json(p2, dict(result.stability, scenario_hash=cfg.scenario_hash(), seed=cfg.seed))
    return [p1, p2]
