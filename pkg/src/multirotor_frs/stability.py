"""Ultimate-boundedness certificate for the observer/controller pair and empirical audits.

The certificate collects the gain conditions for boundedness of the
translational errors ``e_p, e_v`` together with the observer error ``e_d``,
and the resulting radii.  The audits check those statements against logged
closed-loop simulations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .controller import CircularTrajectory, ControllerGains, control_terms
from .disturbance import DisturbanceModel, observer_rhs
from .dynamics import GRAVITY, dynamics_rhs
from .simulation import ClosedLoopLog


@dataclass(frozen=True)
class StabilityCertificate:
    Q1: np.ndarray
    Q2: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    lambda_min_Q1: float
    lambda_min_Q2: float
    lambda_min_Q: float
    s_m: float
    s_m_limit: float           # -lambda_min(Q1) / lambda_min(Q2), inf when lambda_min(Q2) >= 0
    N_bound: float
    M_bound: float
    theta1: float
    theta2: float
    hypothesis_1: bool         # k_v > 1
    hypothesis_2: bool         # alpha_d > (1/k_p + 1/(k_v - 1)) / 4
    hypothesis_2_threshold: float
    hypothesis_3: str          # "satisfied", "violated" or "vacuous"
    uub_radius_translational: float
    uub_radius_disturbance: float
    disturbance_rate: float    # exponential rate alpha_d (1 - theta1) of ||e_d||
    conditions_ok: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        return out


def default_M_bound(trajectory: CircularTrajectory, model: DisturbanceModel) -> float:
    """``g + max ||p_r''|| + ||L||``, a bound on ``||g e3 + p_r'' + d||`` for the circle."""
    return GRAVITY + trajectory.radius * trajectory.rate**2 + float(np.linalg.norm(model.L))


def gain_matrices(k_p: float, k_v: float, alpha_d: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q1 = np.array([[k_p, 0.0, -0.5], [0.0, k_v - 1.0, -0.5], [-0.5, -0.5, alpha_d]])
    q2 = np.array([[-k_p, -0.5 * (k_p + k_v), -0.5], [-0.5 * (k_p + k_v), -k_v, -0.5], [-0.5, -0.5, 0.0]])
    i3 = np.eye(3)
    p = np.block([[(k_p + k_v) * i3, i3], [i3, i3]])
    return q1, q2, p


def build_certificate(
    gains: ControllerGains,
    alpha_d: float,
    model: DisturbanceModel,
    s_m: float,
    theta1: float = 0.8,
    theta2: float = 0.8,
    M_bound: float | None = None,
) -> StabilityCertificate:
    """Evaluate the three gain hypotheses and the ultimate-bound radii.

    Never raises for infeasible gains; failing hypotheses are reported and the
    translational radius is ``inf`` whenever ``Q`` is not positive definite.
    """
    if not (0.0 < theta1 < 1.0 and 0.0 < theta2 < 1.0):
        raise ValueError("theta1 and theta2 must lie in (0, 1)")
    if s_m < 0:
        raise ValueError("s_m must be nonnegative")
    if M_bound is None:
        M_bound = default_M_bound(CircularTrajectory(), model)
    k_p, k_v = gains.k_p, gains.k_v
    q1, q2, p = gain_matrices(k_p, k_v, alpha_d)
    q = q1 + s_m * q2
    l1 = float(np.linalg.eigvalsh(q1)[0])
    l2 = float(np.linalg.eigvalsh(q2)[0])
    lq = float(np.linalg.eigvalsh(q)[0])

    h1 = k_v > 1.0
    thresh = 0.25 * (1.0 / k_p + 1.0 / (k_v - 1.0)) if h1 else np.inf
    h2 = bool(alpha_d > thresh)
    if l2 < 0.0:
        limit = -l1 / l2
        h3 = "satisfied" if s_m < limit else "violated"
    else:
        # Q2 is PSD: Q stays PD for any s_m once Q1 is, so the ratio test has nothing to say
        limit = np.inf
        h3 = "vacuous"

    beta_norm = float(np.linalg.norm(model.beta))
    n_bound = float(np.sqrt(2.0 * s_m**2 * M_bound**2 + beta_norm**2))
    r_t = n_bound / (lq * theta2) if lq > 0.0 else np.inf
    ok = bool(h1 and h2 and h3 != "violated" and lq > 0.0)
    return StabilityCertificate(
        Q1=q1, Q2=q2, Q=q, P=p,
        lambda_min_Q1=l1, lambda_min_Q2=l2, lambda_min_Q=lq,
        s_m=float(s_m), s_m_limit=float(limit),
        N_bound=n_bound, M_bound=float(M_bound),
        theta1=theta1, theta2=theta2,
        hypothesis_1=bool(h1), hypothesis_2=h2, hypothesis_2_threshold=float(thresh), hypothesis_3=h3,
        uub_radius_translational=float(r_t),
        uub_radius_disturbance=beta_norm / (alpha_d * theta1),
        disturbance_rate=alpha_d * (1.0 - theta1),
        conditions_ok=ok,
    )


# --------------------------------------------------------------------------- log helpers


def _sigma_for(log: ClosedLoopLog, reference):
    sigma = reference(log.times)
    if log.x.ndim == 3:
        sigma = sigma.map(lambda a: a[None] if a.ndim >= 1 else a)
    return sigma


def tilt_sine(log: ClosedLoopLog, reference, gains: ControllerGains, feedforward: bool = True,
              use_estimate: bool = True) -> np.ndarray:
    """``|sin phi_b|`` between desired and actual thrust directions along a log."""
    d_hat = log.d_hat if use_estimate else np.zeros_like(log.d_hat)
    ct = control_terms(log.x, d_hat, _sigma_for(log, reference), gains, feedforward)
    z_bd = ct.f_d / np.linalg.norm(ct.f_d, axis=-1, keepdims=True)
    return np.linalg.norm(np.cross(z_bd, ct.z_b), axis=-1)


def measure_s_m(log: ClosedLoopLog, reference, gains: ControllerGains, feedforward: bool = True) -> float:
    return float(np.max(tilt_sine(log, reference, gains, feedforward)))


# --------------------------------------------------------------------------- audits


@dataclass
class DisturbanceAudit:
    radius: float
    rate_bound: float                 # 2 alpha_d (1 - theta1), for V1
    min_decay_rate: float             # smallest per-step V1 decay rate while outside the ball
    outside_steps: int
    ultimate_max: float               # largest ||e_d|| after the settling time
    ultimate_tolerance: float
    rate_tolerance: float
    rate_violations: int
    ultimate_violations: int
    per_path_ultimate: list = field(default_factory=list, repr=False)

    @property
    def rate_ok(self) -> bool:
        return self.rate_violations == 0

    @property
    def ultimate_ok(self) -> bool:
        return self.ultimate_violations == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("per_path_ultimate")
        out.update(rate_ok=self.rate_ok, ultimate_ok=self.ultimate_ok)
        return out


def audit_disturbance_convergence(
    log: ClosedLoopLog,
    model: DisturbanceModel,
    alpha_d: float,
    theta1: float,
    rate_tolerance: float = 0.2,
    ultimate_tolerance: float = 0.05,
) -> DisturbanceAudit:
    """Check the observer error against its exponential decay and ultimate ball.

    ``V1 = ||e_d||^2 / 2`` must shrink at least at ``2 alpha_d (1 - theta1)``
    (times ``1 - rate_tolerance``) on every step that starts and ends outside
    the ball of radius ``||beta|| / (alpha_d theta1)``.  After the settling
    time implied by the path's own initial error and that rate, ``||e_d||``
    must stay within ``radius * (1 + ultimate_tolerance)``.
    """
    e = np.linalg.norm(log.d - log.d_hat, axis=-1)
    e = e.reshape(-1, e.shape[-1])
    dt = float(log.times[1] - log.times[0])
    radius = float(np.linalg.norm(model.beta)) / (alpha_d * theta1)
    rate_bound = 2.0 * alpha_d * (1.0 - theta1)

    outside = (e[:, :-1] >= radius) & (e[:, 1:] >= radius)
    with np.errstate(divide="ignore"):
        rates = -2.0 * (np.log(e[:, 1:]) - np.log(e[:, :-1])) / dt
    out_rates = rates[outside]
    min_rate = float(out_rates.min()) if out_rates.size else np.inf
    rate_viol = int(np.sum(out_rates < (1.0 - rate_tolerance) * rate_bound))

    t = log.times - log.times[0]
    if radius > 0.0:
        settle = np.log(np.maximum(e[:, 0], radius) / radius) / (0.5 * rate_bound)
    else:
        # no ball to settle into (beta = 0): only the decay rate is checked
        settle = np.full(e.shape[0], np.inf)
    per_path = []
    for i in range(e.shape[0]):
        tail = e[i, t >= settle[i]]
        per_path.append(float(tail.max()) if tail.size else 0.0)
    limit = radius * (1.0 + ultimate_tolerance)
    return DisturbanceAudit(
        radius=radius, rate_bound=rate_bound, min_decay_rate=min_rate, outside_steps=int(outside.sum()),
        ultimate_max=max(per_path), ultimate_tolerance=ultimate_tolerance, rate_tolerance=rate_tolerance,
        rate_violations=rate_viol, ultimate_violations=int(sum(p > limit for p in per_path)),
        per_path_ultimate=per_path,
    )


@dataclass
class ErrorDynamicsAudit:
    residual_p: float     # max |e_p' from the vector fields - right-hand side|, pointwise on the grid
    residual_v: float
    residual_d: float
    increment_residual: float  # max |(e_{k+1} - e_k)/dt - trapezoid of rhs|, O(dt^2)
    max_tilt_sine: float
    saturated_samples: int
    error_norm_ultimate: float
    radius: float
    radius_tolerance: float
    settle_time: float

    @property
    def residual(self) -> float:
        return max(self.residual_p, self.residual_v, self.residual_d)

    @property
    def bounded_ok(self) -> bool:
        return self.error_norm_ultimate <= self.radius * (1.0 + self.radius_tolerance)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(residual=self.residual, bounded_ok=self.bounded_ok)
        return out


def error_dynamics_rhs(log: ClosedLoopLog, reference, gains: ControllerGains, alpha_d: float,
                       w: np.ndarray, feedforward: bool = True):
    """Right-hand sides of the translational/observer error equations on the log grid.

    ``e_v' = -k_p e_p - k_v e_v + e_d + ||f_d|| sin(phi_b) w_hat`` with
    ``w_hat`` the unit vector along ``(z_b . z_bd) z_b - z_bd``, and
    ``e_d' = w - alpha_d e_d``.  ``w`` is the disturbance rate per grid point.
    Returns the errors, the three right-hand sides, ``sin phi_b`` and the
    number of samples where the thrust floor was active.
    """
    sigma = _sigma_for(log, reference)
    ct = control_terms(log.x, log.d_hat, sigma, gains, feedforward)
    e_p = log.x[..., 0:3] - sigma.position
    e_v = log.x[..., 3:6] - sigma.velocity
    e_d = log.d - log.d_hat
    fn = np.linalg.norm(ct.f_d, axis=-1, keepdims=True)
    z_bd = ct.f_d / fn
    tilt = np.sum(z_bd * ct.z_b, axis=-1, keepdims=True) * ct.z_b - z_bd
    s = np.linalg.norm(tilt, axis=-1, keepdims=True)
    w_hat = np.divide(tilt, s, out=np.zeros_like(tilt), where=s > 0)
    rhs_p = e_v
    rhs_v = -gains.k_p * e_p - gains.k_v * e_v + e_d + fn * s * w_hat
    rhs_d = w - alpha_d * e_d
    saturated = np.sum(np.sum(ct.f_d * ct.z_b, axis=-1) < 0.0)
    return (e_p, e_v, e_d), (rhs_p, rhs_v, rhs_d), s[..., 0], int(saturated)


def error_derivatives(log: ClosedLoopLog, reference, gains: ControllerGains, alpha_d: float,
                      w: np.ndarray, feedforward: bool = True):
    """Time derivatives of ``e_p, e_v, e_d`` from the plant and observer vector fields at the logged states."""
    sigma = _sigma_for(log, reference)
    u = control_terms(log.x, log.d_hat, sigma, gains, feedforward).u
    x_dot = dynamics_rhs(log.x, u, log.d)
    z = log.d_hat - alpha_d * log.x[..., 3:6]
    d_hat_dot = observer_rhs(z, log.x, u, alpha_d) + alpha_d * x_dot[..., 3:6]
    return (x_dot[..., 0:3] - sigma.velocity, x_dot[..., 3:6] - sigma.acceleration, w - d_hat_dot)


def audit_error_dynamics(
    log: ClosedLoopLog,
    reference,
    gains: ControllerGains,
    alpha_d: float,
    disturbance_rate: np.ndarray,
    certificate: StabilityCertificate,
    settle_time: float | None = None,
    radius_tolerance: float = 0.10,
    feedforward: bool = True,
) -> ErrorDynamicsAudit:
    """Check a logged run against the error equations and the certificate radius.

    The residuals compare the error equations with the derivatives given by
    the plant and observer vector fields at each logged state, so they do not
    depend on the step size.  ``increment_residual`` additionally compares
    logged increments with the trapezoid average of the equations.
    ``disturbance_rate`` holds the per-step slope of ``d`` (shape
    ``(..., n_steps, 3)``); ``settle_time`` defaults to half the run.
    """
    dt = float(log.times[1] - log.times[0])
    w = np.asarray(disturbance_rate, dtype=float)
    # slope of the step that ends at each grid point, padded at t0
    w_grid = np.concatenate([w[..., :1, :], w], axis=-2)
    errs, rhs, sine, sat = error_dynamics_rhs(log, reference, gains, alpha_d, w_grid, feedforward)
    derivs = error_derivatives(log, reference, gains, alpha_d, w_grid, feedforward)
    res = [float(np.abs(dv - f).max()) for dv, f in zip(derivs, rhs)]
    inc = 0.0
    for idx, (e, f) in enumerate(zip(errs, rhs)):
        fd = np.diff(e, axis=-2) / dt
        if idx == 2:
            # e_d' uses the slope of the interval itself, not the grid-point one
            trap = w - alpha_d * 0.5 * (e[..., :-1, :] + e[..., 1:, :])
        else:
            trap = 0.5 * (f[..., :-1, :] + f[..., 1:, :])
        inc = max(inc, float(np.abs(fd - trap).max()))
    norms = np.sqrt(sum(np.sum(e**2, axis=-1) for e in errs))
    t = log.times - log.times[0]
    settle = 0.5 * t[-1] if settle_time is None else settle_time
    tail = norms[..., t >= settle]
    return ErrorDynamicsAudit(
        residual_p=res[0], residual_v=res[1], residual_d=res[2], increment_residual=inc,
        max_tilt_sine=float(sine.max()), saturated_samples=sat,
        error_norm_ultimate=float(tail.max()) if tail.size else 0.0,
        radius=certificate.uub_radius_translational, radius_tolerance=radius_tolerance,
        settle_time=float(settle),
    )
