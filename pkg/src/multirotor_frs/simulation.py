"""Ground-truth closed-loop simulation: plant, observer and controller co-integrated by RK4."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controller import ControllerGains, FlatOutput, adaptive_control, control_terms
from .disturbance import DisturbancePath, observer_rhs
from .dynamics import check_state, dynamics_rhs, rk4_step


@dataclass
class ClosedLoopLog:
    """Grid samples of a (batch of) closed-loop run(s); leading axis of arrays is the batch if any."""

    times: np.ndarray
    x: np.ndarray
    d_hat: np.ndarray
    d: np.ndarray


def simulate_closed_loop(
    x0,
    d_hat0,
    path: DisturbancePath,
    reference: Callable[[float], FlatOutput],
    gains: ControllerGains,
    alpha_d: float,
    use_estimate: bool = True,
    feedforward: bool = True,
    n_steps: int | None = None,
) -> ClosedLoopLog:
    """Integrate the closed loop along ``path``'s grid.

    With ``use_estimate=False`` the controller is fed ``d_hat = 0`` and the
    observer is not run (the logged estimate is zero).
    """
    dt = path.dt
    n = path.n_steps if n_steps is None else n_steps
    batch = path.values.shape[:-2]
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), batch + (9,))
    d_hat0 = np.broadcast_to(np.asarray(d_hat0, dtype=float), batch + (3,))
    s = np.concatenate([x0, d_hat0 - alpha_d * x0[..., 3:6]], axis=-1)

    def rhs(t, s):
        x, z = s[..., :9], s[..., 9:]
        sigma = reference(t)
        d = path(t)
        if use_estimate:
            u = adaptive_control(x, z + alpha_d * x[..., 3:6], sigma, gains, feedforward)
            z_dot = observer_rhs(z, x, u, alpha_d)
        else:
            u = adaptive_control(x, np.zeros(3), sigma, gains, feedforward)
            z_dot = np.zeros_like(z)
        return np.concatenate([dynamics_rhs(x, u, d), z_dot], axis=-1)

    states = np.empty((n + 1,) + s.shape)
    states[0] = s
    t = path.t0
    for k in range(n):
        s = rk4_step(rhs, t, s, dt)
        check_state(s[..., :9])
        states[k + 1] = s
        t = path.t0 + (k + 1) * dt
    states = np.moveaxis(states, 0, -2)
    x = states[..., :9]
    if use_estimate:
        d_hat = states[..., 9:] + alpha_d * x[..., 3:6]
    else:
        d_hat = np.zeros(x.shape[:-1] + (3,))
    return ClosedLoopLog(path.t0 + dt * np.arange(n + 1), x, d_hat, path.values[..., : n + 1, :])


def thrust_log(log: ClosedLoopLog, reference, gains, feedforward=True):
    """Recompute controller internals (``f_d``, ``z_b``, ``u``) along a logged run."""
    sigma = reference(log.times)
    if log.x.ndim == 3:
        sigma = sigma.map(lambda a: a[None] if a.ndim >= 1 else a)
    return control_terms(log.x, log.d_hat, sigma, gains, feedforward)
