"""Scenario drivers: Monte Carlo tube validation, replanned flight, benchmark and gain check."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .controller import circular_reference, reference_state
from .disturbance import (
    DisturbancePath,
    DisturbancePrediction,
    predict_bounds,
    sample_paths_in_box,
    static_bounds,
)
from .frs import FrsTube, Mode, hopf_certificate_margins, initial_set, run_tube
from .simulation import ClosedLoopLog, simulate_closed_loop
from .stability import (
    audit_disturbance_convergence,
    audit_error_dynamics,
    build_certificate,
    default_M_bound,
    measure_s_m,
)

logger = logging.getLogger(__name__)

CONTAINMENT_SLACK = 1e-6
REQUIRED_SOUND = (Mode.BASELINE, Mode.PROPOSED_LIN)
# sub-streams of the master seed
_WARMUP, _SAMPLES, _FLIGHT, _AUDIT = 0, 1, 2, 3


def modes_for(selection: str) -> list[Mode]:
    if selection == "all":
        return list(Mode)
    return [Mode(selection.replace("-", "_"))]


def _reference(cfg: ScenarioConfig):
    traj = cfg.trajectory_obj()
    return lambda t: circular_reference(t, traj)


@dataclass
class StartState:
    """Closed-loop state at the start of a prediction horizon."""

    t0: float
    x: np.ndarray
    d_hat: np.ndarray
    prediction: DisturbancePrediction


def warm_up(cfg: ScenarioConfig, use_estimate: bool = True) -> StartState:
    """Fly the closed loop from the reference start for ``cfg.warm_up`` seconds.

    The observer starts at ``d_hat = 0``; the warm-up disturbance path comes
    from its own seeded stream and is the same for every controller.
    """
    ref = _reference(cfg)
    model = cfg.model()
    x0 = reference_state(ref(0.0))
    t0 = cfg.steps(cfg.warm_up) * cfg.dt
    x, d_hat = x0, np.zeros(3)
    if t0 > 0:
        path = sample_paths_in_box(model, np.zeros(3), model.L, 1, t0, cfg.dt, [cfg.seed, _WARMUP])
        log = simulate_closed_loop(x0, d_hat, path, ref, cfg.controller_gains(), cfg.alpha_d, use_estimate)
        x, d_hat = log.x[0, -1], log.d_hat[0, -1]
    pred = DisturbancePrediction.from_observer(t0, d_hat if use_estimate else np.zeros(3), model,
                                               cfg.alpha_d, cfg.theta1)
    return StartState(t0, x, d_hat if use_estimate else np.zeros(3), pred)


def mode_bounds(cfg: ScenarioConfig, mode: Mode, start: StartState):
    if mode.uses_estimate:
        return lambda tau: predict_bounds(start.prediction, tau)
    model = cfg.model()
    return lambda tau: static_bounds(model, tau)


def build_tube(cfg: ScenarioConfig, mode: Mode, start: StartState, horizon: float | None = None) -> FrsTube:
    """Tube from ``start`` with the configured initial-set recipe."""
    bounds = mode_bounds(cfg, mode, start)
    d_m0, d_M0 = bounds(start.t0)
    S0 = initial_set(d_m0, d_M0, cfg.initial_set.state_radius, cfg.initial_set.disturbance_scale)
    d_hat = start.d_hat if mode.uses_estimate else np.zeros(3)
    y0 = np.concatenate([start.x, d_hat, np.zeros(3)])
    return run_tube(y0, start.t0, cfg.horizon if horizon is None else horizon, mode, cfg.frs_settings(),
                    _reference(cfg), bounds, S0)


def state_margins(tube: FrsTube, x: np.ndarray, k_offset: int = 0) -> np.ndarray:
    """Quadratic-form values of states ``x[..., k, :]`` in the projected tube slices ``k + k_offset``."""
    out = np.empty(x.shape[:-1])
    for k in range(x.shape[-2]):
        out[..., k] = tube.state_margin(k + k_offset, x[..., k, :])
    return out


def error_margins(tube: FrsTube, log: ClosedLoopLog) -> np.ndarray:
    y = np.concatenate([log.x, log.d_hat, log.d], axis=-1)
    out = np.empty(y.shape[:-1])
    for k in range(y.shape[-2]):
        out[..., k] = tube.error_margin(k, y[..., k, :] - tube.y_r[k])
    return out


# --------------------------------------------------------------------------- scenario 1


@dataclass
class ModeRun:
    mode: Mode
    start: StartState
    tube: FrsTube
    log: ClosedLoopLog
    state_margin: np.ndarray      # (samples, steps + 1)
    error_margin: np.ndarray
    hopf_margins: np.ndarray      # per step

    @property
    def contained(self) -> np.ndarray:
        return self.state_margin <= 1.0 + CONTAINMENT_SLACK

    @property
    def violations(self) -> int:
        return int(np.sum(~self.contained))

    def error_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel tube half-widths and the largest sampled deviation from ``x_r``."""
        actual = np.abs(self.log.x - self.tube.x_r[None]).max(axis=0)
        return self.tube.halfwidths(), actual

    def summary(self) -> dict:
        t = self.tube
        return {
            "t0": self.start.t0,
            "d_hat_t0": self.start.d_hat.tolist(),
            "r0": self.start.prediction.r0,
            "samples": int(self.state_margin.shape[0]),
            "checks": int(self.state_margin.size),
            "violations": self.violations,
            "containment_rate": float(np.mean(self.contained)),
            "max_state_margin": float(self.state_margin.max()),
            "error_space_violations": int(np.sum(self.error_margin > 1.0 + CONTAINMENT_SLACK)),
            "max_error_margin": float(self.error_margin.max()),
            "trace_inv_end": float(t.trace_inv[-1]),
            "logdet_inv_end": float(t.logdet_inv[-1]),
            "tube_wall_ms": t.wall_ns / 1e6,
            "hopf_min_margin": float(self.hopf_margins.min()),
        }


def ordering(runs: dict[Mode, ModeRun]) -> dict:
    """Trace and determinant of the projected inverse shapes, proposed versus baseline, for ``t > t0``."""
    if Mode.BASELINE not in runs:
        return {}
    base = runs[Mode.BASELINE].tube
    out = {}
    for mode, run in runs.items():
        if mode is Mode.BASELINE:
            continue
        t = run.tube
        log_ratio_end = float(base.logdet_inv[-1] - t.logdet_inv[-1])
        out[mode.value] = {
            "trace_below_all": bool(np.all(t.trace_inv[1:] < base.trace_inv[1:])),
            "det_below_all": bool(np.all(t.logdet_inv[1:] < base.logdet_inv[1:])),
            "trace_below_fraction": float(np.mean(t.trace_inv[1:] < base.trace_inv[1:])),
            "det_below_fraction": float(np.mean(t.logdet_inv[1:] < base.logdet_inv[1:])),
            "log_det_ratio_end": log_ratio_end,
            "det_ratio_end": float(np.exp(log_ratio_end)),
        }
    return out


@dataclass
class Scenario1Result:
    config: ScenarioConfig
    runs: dict
    paths: DisturbancePath
    stability: dict
    wall_s: float

    @property
    def sound(self) -> bool:
        return all(self.runs[m].violations == 0 for m in REQUIRED_SOUND if m in self.runs)

    def metrics(self) -> dict:
        return {
            "scenario": "scenario1",
            "modes": {m.value: r.summary() for m, r in self.runs.items()},
            "ordering": ordering(self.runs),
            "sound": self.sound,
            "wall_s": self.wall_s,
        }


def run_scenario1(cfg: ScenarioConfig, modes: list[Mode] | None = None, n_samples: int | None = None,
                  hopf_directions: int = 100) -> Scenario1Result:
    """Tubes per mode from a shared warm-up, validated against seeded truth rollouts.

    Every mode sees the same disturbance paths.  Their initial values are
    uniform in the predicted disturbance interval at ``t0``, which lies inside
    ``+-L``, so the paths are admissible for every mode.
    """
    tic = time.perf_counter()
    modes = modes_for(cfg.mode) if modes is None else modes
    n = cfg.n_samples if n_samples is None else n_samples
    ref = _reference(cfg)
    gains = cfg.controller_gains()
    model = cfg.model()
    starts = {est: warm_up(cfg, est) for est in {m.uses_estimate for m in modes} | {True}}
    proposed = starts[True]
    d_m0, d_M0 = predict_bounds(proposed.prediction, proposed.t0)
    paths = sample_paths_in_box(model, d_m0, d_M0, n, cfg.horizon, cfg.dt, [cfg.seed, _SAMPLES], t0=proposed.t0)

    runs = {}
    for mode in modes:
        start = starts[mode.uses_estimate]
        tube = build_tube(cfg, mode, start)
        log = simulate_closed_loop(start.x, start.d_hat, paths, ref, gains, cfg.alpha_d, mode.uses_estimate)
        runs[mode] = ModeRun(mode, start, tube, log, state_margins(tube, log.x), error_margins(tube, log),
                             hopf_certificate_margins(tube, hopf_directions, seed=[cfg.seed, k_of(mode)]))
        logger.info("%s: %d violations over %d checks", mode.value, runs[mode].violations, runs[mode].state_margin.size)

    stability = {}
    est_runs = [r for r in runs.values() if r.mode.uses_estimate]
    if est_runs:
        r = est_runs[0]
        s_m = cfg.s_m if cfg.s_m is not None else measure_s_m(r.log, ref, gains)
        cert = build_certificate(gains, cfg.alpha_d, model, s_m, cfg.theta1, cfg.theta2, _m_bound(cfg))
        audit = audit_disturbance_convergence(r.log, model, cfg.alpha_d, cfg.theta1)
        stability = {"certificate": cert.to_dict(), "disturbance_audit": audit.to_dict(),
                     "s_m_source": "config" if cfg.s_m is not None else "measured"}
    return Scenario1Result(cfg, runs, paths, stability, time.perf_counter() - tic)


def k_of(mode: Mode) -> int:
    return list(Mode).index(mode)


def _m_bound(cfg: ScenarioConfig) -> float:
    return cfg.M_bound if cfg.M_bound is not None else default_M_bound(cfg.trajectory_obj(), cfg.model())


# --------------------------------------------------------------------------- scenario 2


@dataclass
class ReplanTube:
    mode: Mode
    index: int
    tube: FrsTube
    k_start: int                 # grid index of the tube start in the flight log
    state_margin: np.ndarray     # flown states against the tube, while both exist

    @property
    def violations(self) -> int:
        return int(np.sum(self.state_margin > 1.0 + CONTAINMENT_SLACK))


@dataclass
class Scenario2Result:
    config: ScenarioConfig
    path: DisturbancePath
    flights: dict                # "proposed" / "baseline" -> ClosedLoopLog
    tubes: list = field(default_factory=list)
    stability: dict = field(default_factory=dict)
    wall_s: float = 0.0

    @property
    def sound(self) -> bool:
        return all(t.violations == 0 for t in self.tubes if t.mode in REQUIRED_SOUND)

    def metrics(self) -> dict:
        per_mode = {}
        for mode in {t.mode for t in self.tubes}:
            ts = [t for t in self.tubes if t.mode is mode]
            per_mode[mode.value] = {
                "tubes": len(ts),
                "start_times": [float(t.tube.times[0]) for t in ts],
                "violations": int(sum(t.violations for t in ts)),
                "max_state_margin": float(max(t.state_margin.max() for t in ts)),
                "mean_tube_wall_ms": float(np.mean([t.tube.wall_ns for t in ts]) / 1e6),
                "max_tube_wall_ms": float(np.max([t.tube.wall_ns for t in ts]) / 1e6),
            }
        flights = {}
        ref = _reference(self.config)
        for name, log in self.flights.items():
            e_p = np.linalg.norm(log.x[0, :, :3] - ref(log.times).position, axis=-1)
            flights[name] = {"max_position_error": float(e_p.max()), "rms_position_error": float(np.sqrt(np.mean(e_p**2)))}
        return {"scenario": "scenario2", "modes": per_mode, "flights": flights, "sound": self.sound,
                "wall_s": self.wall_s}


def replan_times(cfg: ScenarioConfig) -> np.ndarray:
    k = int(np.floor(cfg.total_time / cfg.replan_period + 1e-9))
    return cfg.replan_period * np.arange(k + 1)


def run_scenario2(cfg: ScenarioConfig, modes: list[Mode] | None = None) -> Scenario2Result:
    """Fly both controllers under one shared path and recompute tubes at each replan instant."""
    tic = time.perf_counter()
    modes = modes_for(cfg.mode) if modes is None else modes
    ref = _reference(cfg)
    gains = cfg.controller_gains()
    model = cfg.model()
    path = sample_paths_in_box(model, np.zeros(3), model.L, 1, cfg.total_time, cfg.dt, [cfg.seed, _FLIGHT])
    x0 = reference_state(ref(0.0))
    flights = {}
    for name, est in (("proposed", True), ("baseline", False)):
        if any(m.uses_estimate == est for m in modes):
            flights[name] = simulate_closed_loop(x0, np.zeros(3), path, ref, gains, cfg.alpha_d, est)

    result = Scenario2Result(cfg, path, flights)
    n_total = cfg.steps(cfg.total_time)
    n_h = cfg.steps(cfg.horizon)
    for mode in modes:
        log = flights["proposed" if mode.uses_estimate else "baseline"]
        for i, t_k in enumerate(replan_times(cfg)):
            k = int(round(t_k / cfg.dt))
            d_hat = log.d_hat[0, k] if mode.uses_estimate else np.zeros(3)
            pred = DisturbancePrediction.from_observer(t_k, d_hat, model, cfg.alpha_d, cfg.theta1)
            start = StartState(float(t_k), log.x[0, k], d_hat, pred)
            tube = build_tube(cfg, mode, start)
            k_end = min(k + n_h, n_total)
            margin = state_margins(tube, log.x[0, k:k_end + 1])
            result.tubes.append(ReplanTube(mode, i, tube, k, margin))

    if "proposed" in flights:
        log = flights["proposed"]
        s_m = cfg.s_m if cfg.s_m is not None else measure_s_m(log, ref, gains)
        cert = build_certificate(gains, cfg.alpha_d, model, s_m, cfg.theta1, cfg.theta2, _m_bound(cfg))
        result.stability = {
            "certificate": cert.to_dict(),
            "disturbance_audit": audit_disturbance_convergence(log, model, cfg.alpha_d, cfg.theta1).to_dict(),
            "error_dynamics_audit": audit_error_dynamics(log, ref, gains, cfg.alpha_d, path.slopes(), cert).to_dict(),
            "s_m_source": "config" if cfg.s_m is not None else "measured",
        }
    result.wall_s = time.perf_counter() - tic
    return result


# --------------------------------------------------------------------------- benchmark and gain check

BUDGET_MS = {Mode.BASELINE: 100.0, Mode.PROPOSED_NOLIN: 200.0, Mode.PROPOSED_LIN: 200.0}


def bench(cfg: ScenarioConfig, iters: int = 20, modes: list[Mode] | None = None) -> dict:
    """Median wall time of a full-horizon tube per mode (Scenario 1 start)."""
    if iters < 1:
        raise ValueError("iters must be positive")
    modes = modes_for(cfg.mode) if modes is None else modes
    out = {}
    for mode in modes:
        start = warm_up(cfg, mode.uses_estimate)
        build_tube(cfg, mode, start)  # warm caches
        times = []
        for _ in range(iters):
            tic = time.perf_counter_ns()
            build_tube(cfg, mode, start)
            times.append((time.perf_counter_ns() - tic) / 1e6)
        med = float(np.median(times))
        out[mode.value] = {"iters": iters, "steps": cfg.steps(cfg.horizon), "median_ms": med,
                           "min_ms": float(np.min(times)), "max_ms": float(np.max(times)),
                           "budget_ms": BUDGET_MS[mode], "within_budget": med <= BUDGET_MS[mode]}
    return out


def check_gains(cfg: ScenarioConfig) -> dict:
    """Certificate with measured ``s_m`` plus observer and error-dynamics audits.

    ``cfg.n_audit_paths`` seeded paths over ``cfg.total_time``, each starting
    on the reference with ``d_hat(0) = 0`` and ``d(0)`` uniform in ``+-L``.
    """
    ref = _reference(cfg)
    gains = cfg.controller_gains()
    model = cfg.model()
    paths = sample_paths_in_box(model, np.zeros(3), model.L, cfg.n_audit_paths, cfg.total_time, cfg.dt,
                                [cfg.seed, _AUDIT])
    log = simulate_closed_loop(reference_state(ref(0.0)), np.zeros(3), paths, ref, gains, cfg.alpha_d, True)
    measured = measure_s_m(log, ref, gains)
    s_m = cfg.s_m if cfg.s_m is not None else measured
    cert = build_certificate(gains, cfg.alpha_d, model, s_m, cfg.theta1, cfg.theta2, _m_bound(cfg))
    return {
        "certificate": cert.to_dict(),
        "s_m_measured": measured,
        "s_m_source": "config" if cfg.s_m is not None else "measured",
        "disturbance_audit": audit_disturbance_convergence(log, model, cfg.alpha_d, cfg.theta1).to_dict(),
        "error_dynamics_audit": audit_error_dynamics(log, ref, gains, cfg.alpha_d, paths.slopes(), cert).to_dict(),
        "n_paths": cfg.n_audit_paths,
        "duration_s": cfg.total_time,
    }
