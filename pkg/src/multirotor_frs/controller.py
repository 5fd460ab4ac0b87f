"""Flat-output reference and the disturbance-compensating tracking controller."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .dynamics import E3, GRAVITY, GIMBAL_MARGIN, euler_rate_map_inv, thrust_direction
from .errors import DegenerateThrustError, GimbalLockError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlatOutput:
    """Reference position (with three derivatives) and yaw at time(s) ``t``.

    Fields broadcast: for a vector of times each array gains a leading axis.
    """

    t: float | np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    yaw: float | np.ndarray = 0.0
    yaw_rate: float | np.ndarray = 0.0
    euler_rate_ff: np.ndarray | None = None

    def with_feedforward(self) -> "FlatOutput":
        """Copy carrying the reference attitude rate (see :func:`reference_attitude`)."""
        _, rate = reference_attitude(self)
        return FlatOutput(**{**{f.name: getattr(self, f.name) for f in fields(self)}, "euler_rate_ff": rate})

    def map(self, fn) -> "FlatOutput":
        """Apply ``fn`` to every array field (e.g. to add broadcasting axes)."""
        return FlatOutput(
            **{
                f.name: None if getattr(self, f.name) is None else fn(np.asarray(getattr(self, f.name), dtype=float))
                for f in fields(self)
            }
        )

    def __getitem__(self, idx) -> "FlatOutput":
        return self.map(lambda a: a[idx])


@dataclass(frozen=True)
class CircularTrajectory:
    """Circle of ``radius`` traversed at ``rate`` rad/s, tilted by a roll then a yaw rotation."""

    radius: float = 10.0
    rate: float = 0.6
    tilt_roll: float = np.deg2rad(30.0)
    tilt_yaw: float = np.deg2rad(30.0)
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def tilt(self) -> np.ndarray:
        cr, sr = np.cos(self.tilt_roll), np.sin(self.tilt_roll)
        cy, sy = np.cos(self.tilt_yaw), np.sin(self.tilt_yaw)
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        return rz @ rx


@dataclass(frozen=True)
class ControllerGains:
    k_p: float = 18.0
    k_v: float = 6.0
    k_phi: tuple = (7.0, 7.0, 21.0)
    s_m: float | None = None

    def __post_init__(self):
        if self.k_p <= 0 or self.k_v <= 0 or min(self.k_phi) <= 0:
            raise ValueError("controller gains must be positive")


def circular_reference(t, trajectory: CircularTrajectory = CircularTrajectory()) -> FlatOutput:
    """Flat output of the tilted circle; yaw reference is held at zero."""
    t = np.asarray(t, dtype=float)
    rho, om = trajectory.radius, trajectory.rate
    c, s = np.cos(om * t), np.sin(om * t)
    z = np.zeros_like(t)
    rt = trajectory.tilt

    def tilt(a, b):
        return np.stack([a, b, z], axis=-1) @ rt.T

    return FlatOutput(
        t=t,
        position=np.asarray(trajectory.center, dtype=float) + tilt(rho * c, rho * s),
        velocity=tilt(-rho * om * s, rho * om * c),
        acceleration=tilt(-rho * om**2 * c, -rho * om**2 * s),
        jerk=tilt(rho * om**3 * s, -rho * om**3 * c),
        yaw=z,
        yaw_rate=z,
    ).with_feedforward()


def _yaw_frame(vec, yaw):
    """Express inertial vectors in the frame rotated by ``yaw`` about z."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.stack(
        [cy * vec[..., 0] + sy * vec[..., 1], -sy * vec[..., 0] + cy * vec[..., 1], vec[..., 2]], axis=-1
    )


def desired_attitude(f_d, yaw) -> np.ndarray:
    """Roll/pitch aligning the body z axis with ``f_d``; yaw passes through."""
    f_d = np.asarray(f_d, dtype=float)
    norm = np.linalg.norm(f_d, axis=-1, keepdims=True)
    if np.any(norm < 1e-6):
        raise DegenerateThrustError("desired thrust vector has vanishing norm")
    yaw = np.asarray(yaw, dtype=float)
    zb = _yaw_frame(f_d / norm, yaw)
    roll = np.arctan2(-zb[..., 1], np.hypot(zb[..., 0], zb[..., 2]))
    pitch = np.arctan2(zb[..., 0], zb[..., 2])
    if np.any(np.abs(pitch) >= np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLockError("desired pitch at or beyond +-pi/2")
    return np.stack([roll, pitch, np.broadcast_to(yaw, roll.shape)], axis=-1)


def reference_attitude(sigma: FlatOutput) -> tuple[np.ndarray, np.ndarray]:
    """Attitude of the disturbance-free reference and its analytic time derivative.

    Used as the attitude feed-forward: the thrust direction is ``g e3 + p_r''``
    and its rate follows from the reference jerk.
    """
    f = GRAVITY * E3 + np.asarray(sigma.acceleration, dtype=float)
    f_dot = np.asarray(sigma.jerk, dtype=float)
    yaw = np.asarray(sigma.yaw, dtype=float)
    yaw_rate = np.asarray(sigma.yaw_rate, dtype=float)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    z = f / norm
    z_dot = (f_dot - z * np.sum(z * f_dot, axis=-1, keepdims=True)) / norm
    zy = _yaw_frame(z, yaw)
    cy, sy = np.cos(yaw), np.sin(yaw)
    # d/dt of the yaw-frame rotation applied to z, plus the rotated z_dot
    zy_dot = _yaw_frame(z_dot, yaw) + yaw_rate[..., None] * np.stack(
        [-sy * z[..., 0] + cy * z[..., 1], -cy * z[..., 0] - sy * z[..., 1], np.zeros_like(cy)], axis=-1
    )
    horiz = zy[..., 0] ** 2 + zy[..., 2] ** 2
    roll = np.arctan2(-zy[..., 1], np.sqrt(horiz))
    pitch = np.arctan2(zy[..., 0], zy[..., 2])
    roll_dot = -zy_dot[..., 1] / np.sqrt(horiz)
    pitch_dot = (zy[..., 2] * zy_dot[..., 0] - zy[..., 0] * zy_dot[..., 2]) / horiz
    euler = np.stack([roll, pitch, np.broadcast_to(yaw, roll.shape)], axis=-1)
    euler_dot = np.stack([roll_dot, pitch_dot, np.broadcast_to(yaw_rate, roll.shape)], axis=-1)
    return euler, euler_dot


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def attitude_law(euler, euler_r, euler_r_dot, gains: ControllerGains) -> np.ndarray:
    """Body rates giving ``d/dt (Phi - Phi_r) = -k_phi * (Phi - Phi_r)``."""
    err = wrap_angle(np.asarray(euler, dtype=float) - euler_r)
    rate = np.asarray(euler_r_dot, dtype=float) - np.asarray(gains.k_phi) * err
    return np.einsum("...ij,...j->...i", euler_rate_map_inv(euler), rate)


class ControlTerms(NamedTuple):
    u: np.ndarray
    f_d: np.ndarray
    z_b: np.ndarray
    euler_r: np.ndarray


def control_terms(x, d_hat, sigma: FlatOutput, gains: ControllerGains, feedforward: bool = True) -> ControlTerms:
    """Full controller evaluation, exposing the intermediate thrust quantities."""
    x = np.asarray(x, dtype=float)
    e_p = x[..., 0:3] - sigma.position
    e_v = x[..., 3:6] - sigma.velocity
    f_d = -gains.k_p * e_p - gains.k_v * e_v + GRAVITY * E3 + sigma.acceleration - d_hat
    euler = x[..., 6:9]
    euler_r = desired_attitude(f_d, sigma.yaw)
    if feedforward:
        euler_r_dot = sigma.euler_rate_ff
        if euler_r_dot is None:
            _, euler_r_dot = reference_attitude(sigma)
    else:
        euler_r_dot = np.zeros(3)
    z_b = thrust_direction(euler)
    thrust = np.sum(f_d * z_b, axis=-1)
    if np.any(thrust < 0.0):
        logger.warning("thrust command saturated at zero for %d state(s)", int(np.sum(thrust < 0.0)))
        thrust = np.maximum(thrust, 0.0)
    omega = attitude_law(euler, euler_r, euler_r_dot, gains)
    u = np.concatenate([thrust[..., None], omega], axis=-1)
    return ControlTerms(u, f_d, z_b, euler_r)


def adaptive_control(x, d_hat, sigma: FlatOutput, gains: ControllerGains, feedforward: bool = True) -> np.ndarray:
    """Control input ``[F, omega]`` compensating the estimated disturbance ``d_hat``."""
    return control_terms(x, d_hat, sigma, gains, feedforward).u


def reference_state(sigma: FlatOutput) -> np.ndarray:
    """Plant state sitting exactly on the reference (position, velocity, attitude)."""
    euler, _ = reference_attitude(sigma)
    return np.concatenate([sigma.position, sigma.velocity, euler], axis=-1)
