"""Bounded, rate-limited disturbances: sampler, observer and future-bound predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import GRAVITY, thrust_direction


@dataclass(frozen=True)
class DisturbanceModel:
    """Per-channel magnitude bound ``L`` [m/s^2] and rate bound ``beta`` [m/s^3]."""

    L: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float).reshape(3)
        beta = np.asarray(self.beta, dtype=float).reshape(3)
        if np.any(L <= 0) or np.any(beta < 0):
            raise ValueError("L must be positive and beta nonnegative")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "beta", beta)

    def admits(self, d, slack: float = 0.0) -> bool:
        return bool(np.all(np.abs(d) <= self.L + slack))


@dataclass(frozen=True)
class DisturbancePath:
    """Piecewise-linear disturbance on a uniform grid starting at ``t0``.

    ``values`` has shape ``(n_steps + 1, 3)`` or, for a batch of paths,
    ``(n_paths, n_steps + 1, 3)``.
    """

    t0: float
    dt: float
    values: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.values.shape[-2] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def __call__(self, t: float) -> np.ndarray:
        s = (t - self.t0) / self.dt
        k = int(np.clip(np.floor(s + 1e-9), 0, self.n_steps - 1))
        frac = s - k
        return (1.0 - frac) * self.values[..., k, :] + frac * self.values[..., k + 1, :]

    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=-2) / self.dt

    def refine(self, factor: int) -> "DisturbancePath":
        """Same piecewise-linear function sampled on a grid ``factor`` times finer."""
        if factor < 1:
            raise ValueError("refinement factor must be positive")
        frac = np.arange(factor) / factor
        v0, v1 = self.values[..., :-1, :], self.values[..., 1:, :]
        fine = v0[..., None, :] + frac[:, None] * (v1 - v0)[..., None, :]
        fine = fine.reshape(v0.shape[:-2] + (-1, 3))
        return DisturbancePath(self.t0, self.dt / factor,
                               np.concatenate([fine, self.values[..., -1:, :]], axis=-2))


def _reflect(d: np.ndarray, L: np.ndarray) -> np.ndarray:
    d = np.where(d > L, 2.0 * L - d, d)
    return np.where(d < -L, -2.0 * L - d, d)


def _steps(horizon: float, dt: float) -> int:
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9:
        raise ValueError("horizon must be a positive multiple of dt")
    return n


def sample_disturbance(
    model: DisturbanceModel,
    d0,
    horizon: float,
    dt: float,
    seed=None,
    t0: float = 0.0,
) -> DisturbancePath:
    """Draw one admissible disturbance path.

    Per-step slopes are uniform in ``[-beta, beta]``; crossings of ``+-L`` are
    reflected back inside, which keeps the slope bound intact.  ``seed`` is
    anything :func:`numpy.random.default_rng` accepts.
    """
    d0 = np.asarray(d0, dtype=float).reshape(3)
    if not model.admits(d0):
        raise ValueError(f"initial disturbance {d0} violates |d| <= L = {model.L}")
    rng = np.random.default_rng(seed)
    return DisturbancePath(t0, dt, _walk(model, d0, _steps(horizon, dt), dt, rng))


def _walk(model, d0, n, dt, rng) -> np.ndarray:
    slopes = rng.uniform(-1.0, 1.0, size=(n, 3)) * model.beta
    values = np.empty((n + 1, 3))
    values[0] = d0
    for k in range(n):
        values[k + 1] = _reflect(values[k] + slopes[k] * dt, model.L)
    return values


def sample_disturbance_batch(model, d0s, horizon, dt, seed: int, t0: float = 0.0) -> DisturbancePath:
    """Stack of paths; path ``i`` uses the RNG stream ``default_rng([seed, i])``."""
    d0s = np.asarray(d0s, dtype=float)
    paths = [sample_disturbance(model, d0, horizon, dt, seed=[seed, i], t0=t0).values for i, d0 in enumerate(d0s)]
    return DisturbancePath(t0, dt, np.stack(paths))


def sample_paths_in_box(model: DisturbanceModel, center, halfwidth, n_paths: int, horizon: float, dt: float,
                        seed, t0: float = 0.0, first_index: int = 0) -> DisturbancePath:
    """Paths whose initial value is uniform in ``center +- halfwidth`` (a subset of ``+-L``).

    Path ``i`` draws its initial value and then its slopes from the single
    stream ``default_rng([*seed, first_index + i])`` (``seed`` is an int or a
    list of ints), so any path can be regenerated on its own.
    """
    center = np.asarray(center, dtype=float).reshape(3)
    halfwidth = np.asarray(halfwidth, dtype=float).reshape(3)
    if np.any(halfwidth < 0) or not model.admits(np.abs(center) + halfwidth, slack=1e-12):
        raise ValueError("initial box must lie inside |d| <= L")
    n = _steps(horizon, dt)
    out = np.empty((n_paths, n + 1, 3))
    for i in range(n_paths):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), first_index + i])
        d0 = np.clip(center + rng.uniform(-1.0, 1.0, 3) * halfwidth, -model.L, model.L)
        out[i] = _walk(model, d0, n, dt, rng)
    return DisturbancePath(t0, dt, out)


@dataclass(frozen=True)
class ObserverState:
    """Internal state ``z`` of the disturbance observer ``d_hat = z + alpha_d v``."""

    z: np.ndarray
    alpha_d: float

    def __post_init__(self):
        if self.alpha_d <= 0:
            raise ValueError("observer gain alpha_d must be positive")
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))

    @classmethod
    def initialize(cls, x, alpha_d: float, d_hat0=None) -> "ObserverState":
        """Observer whose estimate starts at ``d_hat0`` (zero by default)."""
        x = np.asarray(x, dtype=float)
        d_hat0 = np.zeros(x.shape[:-1] + (3,)) if d_hat0 is None else np.asarray(d_hat0, dtype=float)
        return cls(d_hat0 - alpha_d * x[..., 3:6], alpha_d)


def estimated_disturbance(obs: ObserverState, x) -> np.ndarray:
    return obs.z + obs.alpha_d * np.asarray(x, dtype=float)[..., 3:6]


def observer_rhs(z, x, u, alpha_d: float) -> np.ndarray:
    """``z_dot = -alpha_d z - alpha_d (-g e3 + F R e3 + alpha_d v)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    acc = u[..., 0:1] * thrust_direction(x[..., 6:9])
    acc[..., 2] -= GRAVITY
    return -alpha_d * z - alpha_d * (acc + alpha_d * x[..., 3:6])


def ndob_step(obs: ObserverState, x, u, dt: float) -> ObserverState:
    """Advance the observer alone with ``x`` and ``u`` held over ``dt`` (RK4).

    The closed-loop simulator co-integrates observer and plant instead; this
    is for driving the observer from externally logged state/input samples.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = obs.alpha_d
    z = obs.z
    k1 = observer_rhs(z, x, u, a)
    k2 = observer_rhs(z + 0.5 * dt * k1, x, u, a)
    k3 = observer_rhs(z + 0.5 * dt * k2, x, u, a)
    k4 = observer_rhs(z + dt * k3, x, u, a)
    return ObserverState(z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), a)


def error_radius(model: DisturbanceModel, alpha_d: float, theta1: float, t) -> np.ndarray | float:
    """Bound on ``||d - d_hat||`` at time ``t`` after starting the observer at ``d_hat = 0``.

    ``max(||L|| exp(-(1 - theta1) alpha_d t), ||beta|| / (theta1 alpha_d))``.
    """
    if not 0.0 < theta1 < 1.0:
        raise ValueError("theta1 must lie in (0, 1)")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    decay = np.linalg.norm(model.L) * np.exp(-(1.0 - theta1) * alpha_d * t)
    r = np.maximum(decay, np.linalg.norm(model.beta) / (theta1 * alpha_d))
    return float(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class DisturbancePrediction:
    """Data needed to bound future disturbances from an estimate taken at ``t0``."""

    t0: float
    d_hat_t0: np.ndarray
    r0: float
    model: DisturbanceModel
    theta1: float = 0.8

    def __post_init__(self):
        if self.r0 < 0:
            raise ValueError("r0 must be nonnegative")
        if not 0.0 < self.theta1 < 1.0:
            raise ValueError("theta1 must lie in (0, 1)")
        object.__setattr__(self, "d_hat_t0", np.asarray(self.d_hat_t0, dtype=float).reshape(3))

    @classmethod
    def from_observer(cls, t0, d_hat_t0, model, alpha_d, theta1, observed_for=None):
        """Prediction using the error radius after ``observed_for`` seconds of observation (default ``t0``)."""
        elapsed = t0 if observed_for is None else observed_for
        return cls(t0, d_hat_t0, error_radius(model, alpha_d, theta1, elapsed), model, theta1)


def predict_bounds(pred: DisturbancePrediction, tau) -> tuple[np.ndarray, np.ndarray]:
    """Center ``d_m`` and half-width ``d_M`` of the admissible disturbance interval at ``tau``.

    The interval is ``[d_hat(t0) -+ (r0 + beta (tau - t0))]`` intersected with
    ``[-L, L]``.  Vectorized over ``tau``: arrays of shape ``tau.shape + (3,)``.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < pred.t0 - 1e-12):
        raise ValueError("prediction time precedes t0")
    L = pred.model.L
    if np.any(np.abs(pred.d_hat_t0) > L + pred.r0):
        raise ValueError("estimate lies farther than r0 from the admissible box; prediction is empty")
    grow = pred.r0 + np.multiply.outer(np.maximum(tau - pred.t0, 0.0), pred.model.beta)
    lo = np.maximum(pred.d_hat_t0 - grow, -L)
    hi = np.minimum(pred.d_hat_t0 + grow, L)
    return 0.5 * (lo + hi), 0.5 * (hi - lo)


def static_bounds(model: DisturbanceModel, tau) -> tuple[np.ndarray, np.ndarray]:
    """Bounds without any estimate: center zero, half-width ``L``."""
    tau = np.asarray(tau, dtype=float)
    shape = tau.shape + (3,)
    return np.zeros(shape), np.broadcast_to(model.L, shape).copy()
