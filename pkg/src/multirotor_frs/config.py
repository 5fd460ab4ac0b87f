"""Scenario configuration: JSON loading with strict key checking, and conversion to runtime objects."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import numpy as np

from .controller import CircularTrajectory, ControllerGains
from .disturbance import DisturbanceModel
from .errors import ConfigError
from .frs import FrsSettings, LinearizationBound

MODES = ("all", "baseline", "proposed-lin", "proposed-nolin")


@dataclass
class TrajectoryConfig:
    radius: float = 10.0
    rate: float = 0.6
    tilt_roll: float = math.radians(30.0)
    tilt_yaw: float = math.radians(30.0)
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class GainsConfig:
    k_p: float = 18.0
    k_v: float = 6.0
    k_phi: list = field(default_factory=lambda: [7.0, 7.0, 21.0])


@dataclass
class DisturbanceConfig:
    L: list = field(default_factory=lambda: [3.0, 3.0, 1.0])
    beta: list = field(default_factory=lambda: [2.0, 2.0, 2.0])


@dataclass
class LinearizationConfig:
    M_p: list = field(default_factory=lambda: [0.001, 0.001, 0.001])
    M_v: list = field(default_factory=lambda: [0.01, 0.01, 0.01])
    M_Phi: list = field(default_factory=lambda: [0.01, 0.01, 0.01])


@dataclass
class InitialSetConfig:
    """Semi-axes of the initial error ellipsoid: ``state_radius`` on the 12
    state/estimate channels, ``disturbance_scale * d_M(t0)`` on the disturbance."""

    state_radius: float = 0.05
    disturbance_scale: float = 3.0


@dataclass
class ScenarioConfig:
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    horizon: float = 2.7
    replan_period: float = 2.5
    total_time: float = 15.2
    dt: float = 0.02
    gains: GainsConfig = field(default_factory=GainsConfig)
    alpha_d: float = 2.0
    theta1: float = 0.8
    theta2: float = 0.8
    b: float = 0.99
    epsilon: float = 1e-9
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    linearization: LinearizationConfig = field(default_factory=LinearizationConfig)
    initial_set: InitialSetConfig = field(default_factory=InitialSetConfig)
    warm_up: float = 0.5
    n_samples: int = 500
    seed: int = 0
    mode: str = "all"
    baseline_linearization: bool = True
    M_bound: float | None = None
    s_m: float | None = None
    n_audit_paths: int = 100

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------ checks
    def validate(self) -> None:
        def multiple(name):
            v = getattr(self, name)
            k = round(v / self.dt)
            if v <= 0 or abs(k * self.dt - v) > 1e-9:
                raise ConfigError(f"{name} = {v} must be a positive multiple of dt = {self.dt}")

        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        for name in ("horizon", "replan_period", "total_time"):
            multiple(name)
        if self.warm_up < 0 or abs(round(self.warm_up / self.dt) * self.dt - self.warm_up) > 1e-9:
            raise ConfigError("warm_up must be a nonnegative multiple of dt")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if self.n_audit_paths < 1:
            raise ConfigError("n_audit_paths must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 < self.theta1 < 1 and 0 < self.theta2 < 1):
            raise ConfigError("theta1 and theta2 must lie in (0, 1)")
        if not 0 <= self.b <= 1:
            raise ConfigError("b must lie in [0, 1]")
        if self.epsilon <= 0 or self.alpha_d <= 0:
            raise ConfigError("epsilon and alpha_d must be positive")
        if self.initial_set.state_radius <= 0 or self.initial_set.disturbance_scale <= 0:
            raise ConfigError("initial-set radii must be positive")
        for name, vec in (("trajectory.center", self.trajectory.center), ("gains.k_phi", self.gains.k_phi),
                          ("disturbance.L", self.disturbance.L), ("disturbance.beta", self.disturbance.beta),
                          ("linearization.M_p", self.linearization.M_p), ("linearization.M_v", self.linearization.M_v),
                          ("linearization.M_Phi", self.linearization.M_Phi)):
            if len(vec) != 3:
                raise ConfigError(f"{name} must have 3 entries")
        try:
            self.model(), self.controller_gains()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------------ runtime objects
    def model(self) -> DisturbanceModel:
        return DisturbanceModel(self.disturbance.L, self.disturbance.beta)

    def controller_gains(self) -> ControllerGains:
        g = self.gains
        return ControllerGains(float(g.k_p), float(g.k_v), tuple(float(k) for k in g.k_phi))

    def trajectory_obj(self) -> CircularTrajectory:
        t = self.trajectory
        return CircularTrajectory(t.radius, t.rate, t.tilt_roll, t.tilt_yaw, tuple(t.center))

    def frs_settings(self) -> FrsSettings:
        lin = self.linearization
        return FrsSettings(
            gains=self.controller_gains(), alpha_d=self.alpha_d, dt=self.dt, b=self.b, epsilon=self.epsilon,
            model=self.model(),
            linearization=LinearizationBound(tuple(lin.M_p), tuple(lin.M_v), tuple(lin.M_Phi)),
            baseline_linearization=self.baseline_linearization,
        )

    def steps(self, duration: float) -> int:
        return int(round(duration / self.dt))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def scenario_hash(self) -> str:
        """SHA-256 over the canonical JSON of every field (seed included)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        typ = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(typ):
            kwargs[key] = _build(typ, value, where)
        else:
            kwargs[key] = _coerce(typ, value, where)
    return cls(**kwargs)


def _coerce(typ, value, where):
    optional = typ == (float | None)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where} may not be null")
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if typ is float or optional:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if typ is list:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in value]
    raise ConfigError(f"{where}: unsupported field type {typ}")


def config_from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data, "")


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a JSON scenario file; missing keys take the defaults, unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)


def default_config_dict() -> dict:
    cfg = dataclasses.asdict(ScenarioConfig())
    return json.loads(json.dumps(cfg, default=lambda o: np.asarray(o).tolist()))
