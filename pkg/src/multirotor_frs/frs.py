"""Forward reachable set tubes for the observer-augmented closed loop.

The augmented state is ``y = [x (9), d_hat (3), d (3)]``.  A tube is built by
rolling out a disturbance-free reference ``y_r``, linearizing the closed loop
along it, and propagating an ellipsoid over the error ``e_y = y - y_r`` one
grid step at a time:

1. transport to integrator coordinates with the step's transition matrix,
2. add the outer ellipsoid of the input set (closed-form Hopf solution),
3. map back and intersect with the predicted disturbance box.

The 9-dim state tube is the Schur-complement shadow of each error ellipsoid,
translated by ``x_r``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.linalg

from .controller import ControllerGains, FlatOutput, adaptive_control
from .disturbance import DisturbanceModel
from .dynamics import GIMBAL_MARGIN, GRAVITY, dynamics_rhs
from .ellipsoid import (
    Ellipsoid,
    fuse_intersection,
    linear_map,
    min_trace_box_ellipsoid,
    min_trace_sum,
    project,
    propagate_to_space,
)
from .errors import (DegenerateThrustError, EmptyIntersectionError, GimbalLockError, NotPositiveDefiniteError,
                     NumericalFault)

STATE_DIM = 15
X_IDX = np.arange(9)
DHAT_IDX = np.arange(9, 12)
D_IDX = np.arange(12, 15)
D_M_FLOOR = 1e-9

# input matrix of the disturbance rate w
F_W = np.zeros((STATE_DIM, 3))
F_W[12:15, :] = np.eye(3)
# input matrix of the linearization residual (position, velocity, attitude rows)
F_LIN = np.zeros((STATE_DIM, 9))
F_LIN[:9, :] = np.eye(9)

# composite trapezoid on (t, t + dt/2, t + dt), as fractions of dt
QUAD_WEIGHTS = np.array([0.25, 0.5, 0.25])


class Mode(str, Enum):
    BASELINE = "baseline"
    PROPOSED_NOLIN = "proposed_nolin"
    PROPOSED_LIN = "proposed_lin"

    @property
    def uses_estimate(self) -> bool:
        return self is not Mode.BASELINE


@dataclass(frozen=True)
class LinearizationBound:
    """Componentwise bounds on the linearization residual of the position, velocity and attitude rows."""

    M_p: tuple = (0.001, 0.001, 0.001)
    M_v: tuple = (0.01, 0.01, 0.01)
    M_Phi: tuple = (0.01, 0.01, 0.01)

    def __post_init__(self):
        if min(self.M_p + self.M_v + self.M_Phi) < 0:
            raise ValueError("linearization bounds must be nonnegative")

    @property
    def M_y(self) -> np.ndarray:
        return np.concatenate([self.M_p, self.M_v, self.M_Phi, np.zeros(6)]).astype(float)


@dataclass(frozen=True)
class FrsSettings:
    gains: ControllerGains = ControllerGains()
    alpha_d: float = 2.0
    dt: float = 0.02
    b: float = 0.99
    epsilon: float = 1e-9
    model: DisturbanceModel = DisturbanceModel([3.0, 3.0, 1.0], [2.0, 2.0, 2.0])
    linearization: LinearizationBound = LinearizationBound()
    feedforward: bool = True
    jacobian_step: float = 1e-6
    baseline_linearization: bool = True


def input_channels(mode: Mode, settings: FrsSettings) -> tuple[np.ndarray, np.ndarray]:
    """Input matrix ``Fbar`` and per-column bounds ``betabar`` for a mode."""
    beta = settings.model.beta
    if mode is Mode.PROPOSED_LIN or (mode is Mode.BASELINE and settings.baseline_linearization):
        lin = settings.linearization
        return np.hstack([F_LIN, F_W]), np.concatenate([lin.M_p, lin.M_v, lin.M_Phi, beta]).astype(float)
    return F_W.copy(), beta.copy()


# --------------------------------------------------------------------------- dynamics


def augmented_rhs(y, sigma: FlatOutput, w, gains: ControllerGains, alpha_d: float,
                  estimate: bool = True, feedforward: bool = True) -> np.ndarray:
    """Closed-loop augmented dynamics ``xi(y; sigma) + F w``.

    With ``estimate=False`` the controller ignores ``d_hat`` and the estimate
    channel is frozen (zero derivative).
    """
    y = np.asarray(y, dtype=float)
    x, d_hat, d = y[..., :9], y[..., 9:12], y[..., 12:15]
    if estimate:
        u = adaptive_control(x, d_hat, sigma, gains, feedforward)
        d_hat_dot = alpha_d * (d - d_hat)
    else:
        u = adaptive_control(x, np.zeros(3), sigma, gains, feedforward)
        d_hat_dot = np.zeros_like(d_hat)
    x_dot = dynamics_rhs(x, u, d)
    d_dot = np.broadcast_to(np.asarray(w, dtype=float), d.shape)
    return np.concatenate([x_dot, d_hat_dot, d_dot], axis=-1)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _xi_scalar(y, ref, kp, kv, kphi, alpha_d, estimate):
    """Single-state ``xi`` in plain floats for the sequential reference rollout.

    ``ref`` is ``(p_r, v_r, a_r, yaw, euler_rate_ff)`` as float tuples.  Same
    math as :func:`augmented_rhs` with ``w = 0``; ``C(Phi) C(Phi)^{-1}`` is
    cancelled analytically.
    """
    p_r, v_r, a_r, yaw, ff = ref
    if estimate:
        dh0, dh1, dh2 = y[9], y[10], y[11]
    else:
        dh0 = dh1 = dh2 = 0.0
    fx = -kp * (y[0] - p_r[0]) - kv * (y[3] - v_r[0]) + a_r[0] - dh0
    fy = -kp * (y[1] - p_r[1]) - kv * (y[4] - v_r[1]) + a_r[1] - dh1
    fz = -kp * (y[2] - p_r[2]) - kv * (y[5] - v_r[2]) + GRAVITY + a_r[2] - dh2
    n = math.sqrt(fx * fx + fy * fy + fz * fz)
    if n < 1e-6:
        raise DegenerateThrustError("desired thrust vector has vanishing norm")
    zx, zy, zz = fx / n, fy / n, fz / n
    cyr, syr = math.cos(yaw), math.sin(yaw)
    zpx, zpy = cyr * zx + syr * zy, -syr * zx + cyr * zy
    roll_r = math.atan2(-zpy, math.hypot(zpx, zz))
    pitch_r = math.atan2(zpx, zz)
    ph, th, ps = y[6], y[7], y[8]
    if abs(th) >= math.pi / 2 - GIMBAL_MARGIN or abs(pitch_r) >= math.pi / 2 - GIMBAL_MARGIN:
        raise GimbalLockError("pitch at or beyond +-pi/2")
    cr, sr = math.cos(ph), math.sin(ph)
    cp, sp = math.cos(th), math.sin(th)
    cps, sps = math.cos(ps), math.sin(ps)
    bx, by, bz = cps * sp * cr + sps * sr, sps * sp * cr - cps * sr, cp * cr
    thrust = max(fx * bx + fy * by + fz * bz, 0.0)
    d0, d1, d2 = y[12], y[13], y[14]
    out = [
        y[3], y[4], y[5],
        thrust * bx + d0, thrust * by + d1, thrust * bz + d2 - GRAVITY,
        ff[0] - kphi[0] * _wrap(ph - roll_r),
        ff[1] - kphi[1] * _wrap(th - pitch_r),
        ff[2] - kphi[2] * _wrap(ps - yaw),
    ]
    if estimate:
        out += [alpha_d * (d0 - dh0), alpha_d * (d1 - dh1), alpha_d * (d2 - dh2)]
    else:
        out += [0.0, 0.0, 0.0]
    out += [0.0, 0.0, 0.0]
    return out


@dataclass(frozen=True)
class ReferenceRollout:
    times: np.ndarray
    y: np.ndarray           # (n + 1, 15) grid states
    y_mid: np.ndarray       # (n, 15) states at step midpoints
    sigma_mid: FlatOutput   # reference at step midpoints


def reference_rollout(y0, reference: Callable[[np.ndarray], FlatOutput], t0: float, horizon: float,
                      settings: FrsSettings, estimate: bool = True) -> ReferenceRollout:
    """Disturbance-free rollout from ``y0`` (true-disturbance channel forced to zero).

    RK4 on the ``dt`` grid; midpoint states come from cubic Hermite
    interpolation using the end-point derivatives.
    """
    dt = settings.dt
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9:
        raise ValueError("horizon must be a positive multiple of dt")
    times = t0 + dt * np.arange(n + 1)
    stage_t = t0 + 0.5 * dt * np.arange(2 * n + 1)
    sig = reference(stage_t)
    ff = sig.euler_rate_ff if settings.feedforward else np.zeros_like(sig.position)
    yaw = np.broadcast_to(np.asarray(sig.yaw, dtype=float), stage_t.shape)
    refs = list(zip(sig.position.tolist(), sig.velocity.tolist(), sig.acceleration.tolist(),
                    yaw.tolist(), ff.tolist()))
    g = settings.gains
    kp, kv, kphi = g.k_p, g.k_v, tuple(float(k) for k in g.k_phi)
    a = settings.alpha_d

    y = [float(v) for v in np.asarray(y0, dtype=float)]
    y[12:15] = [0.0, 0.0, 0.0]
    if not estimate:
        y[9:12] = [0.0, 0.0, 0.0]
    ys = [y]
    fs = [_xi_scalar(y, refs[0], kp, kv, kphi, a, estimate)]
    h = dt
    for k in range(n):
        r0, rm, r1 = refs[2 * k], refs[2 * k + 1], refs[2 * k + 2]
        k1 = fs[-1]
        k2 = _xi_scalar([yi + 0.5 * h * ki for yi, ki in zip(y, k1)], rm, kp, kv, kphi, a, estimate)
        k3 = _xi_scalar([yi + 0.5 * h * ki for yi, ki in zip(y, k2)], rm, kp, kv, kphi, a, estimate)
        k4 = _xi_scalar([yi + h * ki for yi, ki in zip(y, k3)], r1, kp, kv, kphi, a, estimate)
        y = [yi + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4) for yi, a1, a2, a3, a4 in zip(y, k1, k2, k3, k4)]
        ys.append(y)
        fs.append(_xi_scalar(y, r1, kp, kv, kphi, a, estimate))
    y_arr = np.array(ys)
    f_arr = np.array(fs)
    if not np.all(np.isfinite(y_arr)):
        raise NumericalFault("reference rollout diverged")
    y_mid = 0.5 * (y_arr[:-1] + y_arr[1:]) + (dt / 8.0) * (f_arr[:-1] - f_arr[1:])
    return ReferenceRollout(times, y_arr, y_mid, sig[1::2])


def jacobian(y_r, sigma: FlatOutput, gains: ControllerGains, alpha_d: float, h: float = 1e-6,
             estimate: bool = True, feedforward: bool = True) -> np.ndarray:
    """Central-difference Jacobian ``d xi / d y`` at ``y_r``.

    Broadcasts over leading axes of ``y_r`` (and of ``sigma``'s fields), so a
    whole horizon of linearization points is differentiated in one call.
    """
    y_r = np.asarray(y_r, dtype=float)
    lead = y_r.shape[:-1]
    steps = h * np.eye(STATE_DIM)
    pts = np.concatenate([y_r[..., None, :] + steps, y_r[..., None, :] - steps], axis=-2)
    nlead = len(lead)
    sig = sigma.map(lambda v: np.expand_dims(v, nlead) if nlead and v.ndim >= nlead else v)
    try:
        f = augmented_rhs(pts, sig, 0.0, gains, alpha_d, estimate, feedforward)
    except (GimbalLockError, DegenerateThrustError) as exc:
        raise NumericalFault(f"closed loop not smooth at linearization point: {exc}") from exc
    diff = (f[..., :STATE_DIM, :] - f[..., STATE_DIM:, :]) / (2.0 * h)
    return np.swapaxes(diff, -1, -2)


# --------------------------------------------------------------------------- per-step propagation


@dataclass(frozen=True)
class LinearizedStep:
    """Linearization data for one grid step ``[t, t + dt]``."""

    t: float
    dt: float
    A: np.ndarray
    Fbar: np.ndarray
    betabar: np.ndarray
    Psi: np.ndarray
    Psi_inv: np.ndarray
    F_eta: np.ndarray  # (3, 15, n_wbar): Psi^{-1}(tau) Fbar at tau = t, t + dt/2, t + dt
    B_eta: np.ndarray | None = None

    @property
    def n_wbar(self) -> int:
        return self.Fbar.shape[1]


def _transition_arrays(A, Fbar, dt: float):
    """``Psi``, ``Psi^{-1}`` and ``F_eta`` for one or a stack of midpoint Jacobians."""
    A = np.asarray(A, dtype=float)
    half = scipy.linalg.expm(0.5 * dt * A)
    half_inv = scipy.linalg.expm(-0.5 * dt * A)
    psi = half @ half
    psi_inv = half_inv @ half_inv
    dev = np.abs(psi @ psi_inv - np.eye(A.shape[-1])).max()
    if dev > 1e-6:
        raise NumericalFault(f"transition matrix badly conditioned (|Psi Psi^-1 - I| = {dev:.2e})")
    F_eta = np.stack([np.broadcast_to(Fbar, half_inv.shape[:-1] + Fbar.shape[-1:]),
                      half_inv @ Fbar, psi_inv @ Fbar], axis=-3)
    return psi, psi_inv, F_eta


def state_transition(A, Fbar, dt: float, t: float = 0.0, betabar=None) -> LinearizedStep:
    """Transition matrix over one step and the transported input columns.

    ``A`` is the Jacobian at the step midpoint; the transition over
    ``[t, t + s]`` is ``expm(A s)`` (second-order Magnus), which makes
    ``Psi`` and ``Psi^{-1}`` exact inverses of each other.
    """
    Fbar = np.asarray(Fbar, dtype=float)
    psi, psi_inv, F_eta = _transition_arrays(A, Fbar, dt)
    if betabar is None:
        betabar = np.zeros(Fbar.shape[1])
    return LinearizedStep(t, dt, np.asarray(A, dtype=float), Fbar, np.asarray(betabar, dtype=float),
                          psi, psi_inv, F_eta)


def _quad_weights(n_nodes: int, dt: float) -> np.ndarray:
    if n_nodes < 2:
        raise ValueError("need at least two quadrature samples")
    if n_nodes == 3:
        return dt * QUAD_WEIGHTS
    return dt * np.r_[0.5, np.ones(n_nodes - 2), 0.5] / (n_nodes - 1)


def hopf_step_shape(F_eta, betabar, dt: float, epsilon: float) -> np.ndarray:
    """Inverse shape ``B_eta`` of an outer ellipsoid of the input-driven set over one step.

    Per column ``B_i = dt * int (betabar_i^2 f_i f_i^T + eps I) dtau`` by the
    three-point trapezoid rule, then combined with minimal-trace weights.
    ``F_eta`` is ``(nodes, n, n_wbar)``, optionally with leading batch axes.
    """
    F_eta = np.asarray(F_eta, dtype=float)
    w = _quad_weights(F_eta.shape[-3], dt)
    beta2 = np.asarray(betabar, dtype=float) ** 2
    n = F_eta.shape[-2]
    outer = np.einsum("j,...jai,...jbi->...iab", w, F_eta, F_eta)
    b_i = dt * (beta2[:, None, None] * outer + (epsilon * dt) * np.eye(n))
    # same weights as min_trace_sum, applied per batch entry
    roots = np.sqrt(np.trace(b_i, axis1=-2, axis2=-1))
    scale = roots.sum(axis=-1, keepdims=True) / roots
    out = np.einsum("...k,...kij->...ij", scale, b_i)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def support_oracle_G(F_eta, betabar, direction, dt: float) -> float:
    """Exact support of the input-driven set: ``sum_i betabar_i int |nu^T f_i(tau)| dtau``.

    Uses the same quadrature nodes as :func:`hopf_step_shape`.
    """
    nu = np.asarray(direction, dtype=float)
    if not np.any(nu):
        raise ValueError("direction must be nonzero")
    F_eta = np.asarray(F_eta, dtype=float)
    w = _quad_weights(F_eta.shape[0], dt)
    proj = np.abs(np.einsum("a,jai->ji", nu, F_eta))
    return float(np.asarray(betabar, dtype=float) @ (w @ proj))


def disturbance_cylinder(d_m, d_M) -> tuple[Ellipsoid, object]:
    """Axis-aligned ellipsoid over the disturbance box and its 15-dim cylinder."""
    d_M = np.maximum(np.asarray(d_M, dtype=float), D_M_FLOOR)
    box = Ellipsoid(d_m, min_trace_box_ellipsoid(d_M))
    return box, propagate_to_space(box, STATE_DIM, D_IDX)


def propagate_step(S_t: Ellipsoid, step: LinearizedStep, d_m, d_M, b: float, epsilon: float) -> tuple[Ellipsoid, np.ndarray]:
    """One recursion step: returns ``S(t + dt)`` and the step's ``B_eta``."""
    B = hopf_step_shape(step.F_eta, step.betabar, step.dt, epsilon)
    Q_eta = min_trace_sum([S_t.shape_inverse, B])
    E_y = linear_map(Ellipsoid.from_inverse(S_t.center, Q_eta), step.Psi, step.Psi_inv)
    _, cyl = disturbance_cylinder(d_m, d_M)
    return fuse_intersection(E_y, cyl, b), B


# --------------------------------------------------------------------------- tubes


def initial_set(d_m0, d_M0, radius: float | np.ndarray = 0.05, disturbance_scale: float = 3.0) -> Ellipsoid:
    """Initial error ellipsoid: semi-axes ``radius`` on state/estimate, ``scale * d_M`` on the disturbance."""
    radii = np.concatenate([np.broadcast_to(np.asarray(radius, dtype=float), (12,)),
                            disturbance_scale * np.maximum(np.asarray(d_M0, dtype=float), D_M_FLOOR)])
    center = np.concatenate([np.zeros(12), np.asarray(d_m0, dtype=float)])
    return Ellipsoid(center, np.diag(1.0 / radii**2))


@dataclass
class FrsTube:
    """Propagated tube.  Matrices are stored as stacked arrays; ellipsoid and
    step objects are built on demand."""

    mode: Mode
    times: np.ndarray
    y_r: np.ndarray
    centers: np.ndarray        # (n + 1, 15) error-space centers of S
    shapes: np.ndarray         # (n + 1, 15, 15) forward shapes of S
    shapes_inv: np.ndarray     # (n + 1, 15, 15) inverse shapes of S
    trace_inv: np.ndarray      # of the projected 9-dim inverse shape
    logdet_inv: np.ndarray
    step_ns: np.ndarray
    wall_ns: int = 0
    linearization: dict = field(default_factory=dict, repr=False)

    @property
    def x_r(self) -> np.ndarray:
        return self.y_r[:, :9]

    def __len__(self):
        return len(self.times)

    @property
    def S(self) -> list[Ellipsoid]:
        return [Ellipsoid(c, k) for c, k in zip(self.centers, self.shapes)]

    def projected_center(self, k: int) -> np.ndarray:
        return self.y_r[k, :9] + self.centers[k, :9]

    def projected_shape_inv(self, k: int) -> np.ndarray:
        # the shadow's inverse shape is the kept block of the inverse shape
        return self.shapes_inv[k][:9, :9]

    @property
    def projected(self) -> list[Ellipsoid]:
        """9-dim state tube in absolute coordinates (Schur-complement shadow of ``S``)."""
        return [project_shifted(Ellipsoid(c, k), self.y_r[i, :9]) for i, (c, k) in enumerate(zip(self.centers, self.shapes))]

    @property
    def steps(self) -> list[LinearizedStep]:
        lin = self.linearization
        return [LinearizedStep(self.times[k], lin["dt"], lin["A"][k], lin["Fbar"], lin["betabar"], lin["Psi"][k],
                               lin["Psi_inv"][k], lin["F_eta"][k], lin["B"][k]) for k in range(len(self.times) - 1)]

    def error_margin(self, k: int, e_y) -> np.ndarray:
        """Quadratic form of errors (stacked on the last axis) in ``S[k]``; ``<= 1`` means inside."""
        r = np.asarray(e_y, dtype=float) - self.centers[k]
        return np.einsum("...i,ij,...j->...", r, self.shapes[k], r)

    def state_margin(self, k: int, x) -> np.ndarray:
        r = np.asarray(x, dtype=float) - self.projected_center(k)
        q = self.projected_shape_inv(k)
        sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(q), r.reshape(-1, 9).T).T
        return np.sum(r.reshape(-1, 9) * sol, axis=-1).reshape(r.shape[:-1])

    def halfwidths(self) -> np.ndarray:
        """Per-coordinate extents of the projected tube, ``sqrt(diag(K^{-1}))``."""
        return np.sqrt(np.diagonal(self.shapes_inv[:, :9, :9], axis1=1, axis2=2))


def project_shifted(e: Ellipsoid, offset) -> Ellipsoid:
    P = project(e, X_IDX)
    return Ellipsoid(np.asarray(offset) + P.center, P.shape)


def _chol_inverse(a: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Inverse of an SPD matrix and its log-determinant."""
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc
    li = scipy.linalg.solve_triangular(low, np.eye(a.shape[0]), lower=True, check_finite=False)
    return li.T @ li, 2.0 * float(np.sum(np.log(np.diagonal(low))))


def run_tube(
    y0,
    t0: float,
    horizon: float,
    mode: Mode | str,
    settings: FrsSettings,
    reference: Callable[[np.ndarray], FlatOutput],
    bounds: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    S0: Ellipsoid,
) -> FrsTube:
    """Propagate the error ellipsoid over ``horizon`` and project it to the state space.

    ``bounds(tau)`` returns the predicted disturbance center and half-width
    arrays for a vector of times; ``S0`` is the initial error set.  The
    per-step linear algebra is the same as :func:`propagate_step`, with the
    step-independent parts (transition matrices, input shapes) batched.
    """
    mode = Mode(mode)
    start = time.perf_counter_ns()
    estimate = mode.uses_estimate
    b = settings.b
    roll = reference_rollout(np.asarray(y0, dtype=float), reference, t0, horizon, settings, estimate)
    n = len(roll.times) - 1
    A_all = jacobian(roll.y_mid, roll.sigma_mid, settings.gains, settings.alpha_d,
                     settings.jacobian_step, estimate, settings.feedforward)
    Fbar, betabar = input_channels(mode, settings)
    Psi, Psi_inv, F_eta = _transition_arrays(A_all, Fbar, settings.dt)
    B_all = hopf_step_shape(F_eta, betabar, settings.dt, settings.epsilon)
    tr_B = np.trace(B_all, axis1=1, axis2=2)
    d_m, d_M = bounds(roll.times[1:])
    d_M = np.maximum(d_M, D_M_FLOOR)
    lam = 1.0 / (d_M * d_M.sum(axis=-1, keepdims=True))  # diagonal of Lambda*

    centers = np.empty((n + 1, STATE_DIM))
    shapes = np.empty((n + 1, STATE_DIM, STATE_DIM))
    shapes_inv = np.empty_like(shapes)
    trace_inv = np.empty(n + 1)
    logdet_inv = np.empty(n + 1)
    step_ns = np.zeros(n + 1, dtype=np.int64)
    centers[0], shapes[0], shapes_inv[0] = S0.center, S0.shape, S0.shape_inverse
    q0 = shapes_inv[0][:9, :9]
    trace_inv[0] = np.trace(q0)
    logdet_inv[0] = np.linalg.slogdet(q0)[1]
    step_ns[0] = time.perf_counter_ns() - start
    d_sl = slice(12, 15)
    for k in range(n):
        tic = time.perf_counter_ns()
        Q = shapes_inv[k]
        r1, r2 = math.sqrt(np.trace(Q)), math.sqrt(tr_B[k])
        Q_eta = Q * ((r1 + r2) / r1) + B_all[k] * ((r1 + r2) / r2)
        Q_y = Psi[k] @ Q_eta @ Psi[k].T
        c_y = Psi[k] @ centers[k]
        K_y, _ = _chol_inverse(0.5 * (Q_y + Q_y.T), "propagated inverse shape")
        # fusion with the disturbance cylinder
        N = b * K_y
        N[d_sl, d_sl] += np.diag((1.0 - b) * lam[k])
        rhs = b * (K_y @ c_y)
        rhs[d_sl] += (1.0 - b) * lam[k] * d_m[k]
        N_inv, _ = _chol_inverse(N, "fused quadratic form")
        c = N_inv @ rhs
        delta = b * (c_y @ K_y @ c_y) + (1.0 - b) * float(np.sum(lam[k] * d_m[k] ** 2)) - c @ N @ c
        if delta >= 1.0:
            raise EmptyIntersectionError(f"fusion delta = {delta:.6g} >= 1")
        centers[k + 1] = c
        shapes[k + 1] = N / (1.0 - delta)
        shapes_inv[k + 1] = N_inv * (1.0 - delta)
        q = shapes_inv[k + 1][:9, :9]
        trace_inv[k + 1] = np.trace(q)
        sign, logdet_inv[k + 1] = np.linalg.slogdet(q)
        if sign <= 0:
            raise NumericalFault("projected inverse shape lost positive definiteness")
        step_ns[k + 1] = time.perf_counter_ns() - tic
    lin = dict(dt=settings.dt, A=A_all, Fbar=Fbar, betabar=betabar, Psi=Psi, Psi_inv=Psi_inv, F_eta=F_eta, B=B_all)
    return FrsTube(mode, roll.times, roll.y, centers, shapes, shapes_inv, trace_inv, logdet_inv,
                   step_ns, time.perf_counter_ns() - start, lin)


def hopf_certificate_margins(tube: FrsTube, n_directions: int = 100, seed=0) -> np.ndarray:
    """Per-step worst margin ``h_B(nu) - h_G(nu)`` over random unit directions.

    ``h_B`` is the support of the step's outer ellipsoid ``E(0, B_eta^{-1})``
    and ``h_G`` the exact support of the input-driven set on the same
    quadrature nodes.  Nonnegative margins certify the over-approximation.
    """
    lin = tube.linearization
    rng = np.random.default_rng(seed)
    nu = rng.standard_normal((n_directions, STATE_DIM))
    nu /= np.linalg.norm(nu, axis=1, keepdims=True)
    w = _quad_weights(lin["F_eta"].shape[1], lin["dt"])
    out = np.empty(len(lin["B"]))
    for k, (B, F_eta) in enumerate(zip(lin["B"], lin["F_eta"])):
        h_b = np.sqrt(np.einsum("ni,ij,nj->n", nu, B, nu))
        h_g = np.einsum("mji,i,j->m", np.abs(np.einsum("ma,jai->mji", nu, F_eta)), lin["betabar"], w)
        out[k] = float(np.min(h_b - h_g))
    return out
