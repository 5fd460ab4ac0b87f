"""Simplified 9-state multirotor model.

State ``x = [p, v, Phi]`` (position, velocity, ZYX Euler angles roll/pitch/yaw),
input ``u = [F, omega]`` with ``F`` the mass-normalized thrust and ``omega`` the
body angular velocity.  All functions broadcast over leading axes so that many
rollouts can be integrated at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GimbalLockError, NumericalFault

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])
GIMBAL_MARGIN = 1e-6


@dataclass(frozen=True)
class MultirotorState:
    position: np.ndarray
    velocity: np.ndarray
    euler: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.euler]).astype(float)

    @classmethod
    def from_array(cls, x) -> "MultirotorState":
        x = np.asarray(x, dtype=float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:9].copy())


@dataclass(frozen=True)
class ControlInput:
    thrust: float
    omega: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.thrust], self.omega]).astype(float)


def _check_pitch(euler: np.ndarray) -> None:
    if np.any(np.abs(euler[..., 1]) >= np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLockError("pitch angle at or beyond +-pi/2")


def rotation_matrix(euler) -> np.ndarray:
    """Body-to-inertial rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    euler = np.asarray(euler, dtype=float)
    cr, cp, cy = np.cos(euler[..., 0]), np.cos(euler[..., 1]), np.cos(euler[..., 2])
    sr, sp, sy = np.sin(euler[..., 0]), np.sin(euler[..., 1]), np.sin(euler[..., 2])
    r = np.empty(euler.shape[:-1] + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def thrust_direction(euler) -> np.ndarray:
    """Third column of the rotation matrix, ``R(Phi) e3``."""
    euler = np.asarray(euler, dtype=float)
    cr, cp, cy = np.cos(euler[..., 0]), np.cos(euler[..., 1]), np.cos(euler[..., 2])
    sr, sp, sy = np.sin(euler[..., 0]), np.sin(euler[..., 1]), np.sin(euler[..., 2])
    return np.stack([cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr], axis=-1)


def euler_rate_map(euler) -> np.ndarray:
    """Matrix ``C(Phi)`` with ``Phi_dot = C(Phi) omega``."""
    euler = np.asarray(euler, dtype=float)
    _check_pitch(euler)
    sr, cr = np.sin(euler[..., 0]), np.cos(euler[..., 0])
    tp, cp = np.tan(euler[..., 1]), np.cos(euler[..., 1])
    c = np.zeros(euler.shape[:-1] + (3, 3))
    c[..., 0, 0] = 1.0
    c[..., 0, 1] = sr * tp
    c[..., 0, 2] = cr * tp
    c[..., 1, 1] = cr
    c[..., 1, 2] = -sr
    c[..., 2, 1] = sr / cp
    c[..., 2, 2] = cr / cp
    return c


def euler_rate_map_inv(euler) -> np.ndarray:
    """Closed-form inverse of :func:`euler_rate_map` (``omega = C^{-1} Phi_dot``)."""
    euler = np.asarray(euler, dtype=float)
    _check_pitch(euler)
    sr, cr = np.sin(euler[..., 0]), np.cos(euler[..., 0])
    sp, cp = np.sin(euler[..., 1]), np.cos(euler[..., 1])
    c = np.zeros(euler.shape[:-1] + (3, 3))
    c[..., 0, 0] = 1.0
    c[..., 0, 2] = -sp
    c[..., 1, 1] = cr
    c[..., 1, 2] = sr * cp
    c[..., 2, 1] = -sr
    c[..., 2, 2] = cr * cp
    return c


def dynamics_rhs(x, u, d) -> np.ndarray:
    """``x_dot = [v; -g e3 + F R(Phi) e3 + d; C(Phi) omega]``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    v, euler = x[..., 3:6], x[..., 6:9]
    acc = u[..., 0:1] * thrust_direction(euler) + d
    acc[..., 2] -= GRAVITY
    euler_dot = np.einsum("...ij,...j->...i", euler_rate_map(euler), u[..., 1:4])
    return np.concatenate([np.broadcast_to(v, acc.shape), acc, euler_dot], axis=-1)


def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``y' = rhs(t, y)``."""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def check_state(x) -> None:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericalFault("state became non-finite")
    _check_pitch(x[..., 6:9])


def integrate_step(x, u, d_fn: Callable[[float], np.ndarray], t: float, dt: float) -> np.ndarray:
    """Advance the open-loop plant by ``dt`` with ``u`` held and ``d`` sampled at stage times."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    x_next = rk4_step(lambda s, y: dynamics_rhs(y, u, d_fn(s)), t, np.asarray(x, dtype=float), dt)
    check_state(x_next)
    return x_next
