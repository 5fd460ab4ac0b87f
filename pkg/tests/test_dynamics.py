import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.transform import Rotation

from multirotor_frs.dynamics import (
    GRAVITY,
    ControlInput,
    MultirotorState,
    check_state,
    dynamics_rhs,
    euler_rate_map,
    euler_rate_map_inv,
    integrate_step,
    rk4_step,
    rotation_matrix,
    thrust_direction,
)
from multirotor_frs.errors import GimbalLockError, NumericalFault


def random_euler(rng, n):
    return rng.uniform([-1.2, -1.2, -np.pi], [1.2, 1.2, np.pi], (n, 3))


def hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def test_rotation_matches_scipy_intrinsic_zyx(rng):
    euler = random_euler(rng, 50)
    expected = Rotation.from_euler("ZYX", euler[:, ::-1]).as_matrix()
    np.testing.assert_allclose(rotation_matrix(euler), expected, atol=1e-14)


def test_rotation_is_orthonormal(rng):
    r = rotation_matrix(random_euler(rng, 50))
    np.testing.assert_allclose(r @ np.swapaxes(r, 1, 2), np.broadcast_to(np.eye(3), r.shape), atol=1e-14)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-14)


def test_thrust_direction_is_third_column(rng):
    euler = random_euler(rng, 20)
    np.testing.assert_allclose(thrust_direction(euler), rotation_matrix(euler)[..., 2], atol=1e-15)


def test_euler_rate_map_against_rotation_kinematics(rng):
    """Finite difference of the Euler angles of ``R expm(h [w]x)`` recovers ``C(Phi) w``."""
    h = 1e-6
    for euler in random_euler(rng, 10):
        w = rng.standard_normal(3)
        r = rotation_matrix(euler)
        plus = Rotation.from_matrix(r @ scipy.linalg.expm(h * hat(w))).as_euler("ZYX")[::-1]
        minus = Rotation.from_matrix(r @ scipy.linalg.expm(-h * hat(w))).as_euler("ZYX")[::-1]
        rate = (plus - minus) / (2 * h)
        np.testing.assert_allclose(euler_rate_map(euler) @ w, rate, atol=1e-7)


def test_euler_rate_map_inverse(rng):
    euler = random_euler(rng, 50)
    prod = euler_rate_map(euler) @ euler_rate_map_inv(euler)
    np.testing.assert_allclose(prod, np.broadcast_to(np.eye(3), prod.shape), atol=1e-12)


def test_gimbal_lock_raises():
    with pytest.raises(GimbalLockError):
        euler_rate_map([0.0, np.pi / 2, 0.0])
    with pytest.raises(GimbalLockError):
        check_state(np.r_[np.zeros(7), -np.pi / 2, 0.0])


def test_nonfinite_state_raises():
    with pytest.raises(NumericalFault):
        check_state(np.full(9, np.nan))


def test_state_containers_round_trip(rng):
    x = rng.standard_normal(9)
    np.testing.assert_array_equal(MultirotorState.from_array(x).as_array(), x)
    np.testing.assert_array_equal(ControlInput(2.0, np.ones(3)).as_array(), [2.0, 1.0, 1.0, 1.0])


def test_hover_is_equilibrium():
    x = np.zeros(9)
    np.testing.assert_allclose(dynamics_rhs(x, [GRAVITY, 0, 0, 0], np.zeros(3)), 0.0, atol=1e-15)


def test_rhs_broadcasts(rng):
    x = np.concatenate([rng.standard_normal((4, 6)), random_euler(rng, 4)], axis=1)
    u = rng.standard_normal((4, 4))
    d = rng.standard_normal((4, 3))
    batch = dynamics_rhs(x, u, d)
    for i in range(4):
        np.testing.assert_allclose(batch[i], dynamics_rhs(x[i], u[i], d[i]))


@pytest.mark.parametrize("thrust", [0.0, 12.0])
def test_rk4_ballistic_flight(rng, thrust):
    """Constant attitude and thrust give constant acceleration; RK4 is exact for the quadratic."""
    euler = np.array([0.2, -0.1, 0.7])
    x = np.r_[rng.standard_normal(3), rng.standard_normal(3), euler]
    d = np.array([0.5, -1.0, 0.3])
    acc = thrust * thrust_direction(euler) + d - GRAVITY * np.array([0.0, 0.0, 1.0])
    p0, v0 = x[:3].copy(), x[3:6].copy()
    dt, n = 0.02, 150
    for k in range(n):
        x = integrate_step(x, [thrust, 0.0, 0.0, 0.0], lambda t: d, k * dt, dt)
    t = n * dt
    np.testing.assert_allclose(x[:3], p0 + v0 * t + 0.5 * acc * t**2, atol=1e-8, rtol=0)
    np.testing.assert_allclose(x[3:6], v0 + acc * t, atol=1e-8, rtol=0)
    np.testing.assert_allclose(x[6:], euler, atol=1e-15)


def test_rk4_fourth_order():
    # y' = -y^2, y(0) = 1 has y(t) = 1 / (1 + t)
    def err(dt):
        y = np.array([1.0])
        for k in range(int(round(1.0 / dt))):
            y = rk4_step(lambda t, s: -s**2, k * dt, y, dt)
        return abs(y[0] - 0.5)

    ratio = err(0.1) / err(0.05)
    assert 14.0 < ratio < 18.0


def test_integrate_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        integrate_step(np.zeros(9), np.zeros(4), lambda t: np.zeros(3), 0.0, 0.0)


def test_rotation_examples():
    np.testing.assert_allclose(rotation_matrix([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(rotation_matrix([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(euler_rate_map([0, 0, 0]), np.eye(3))


def test_vector_field_examples():
    np.testing.assert_allclose(dynamics_rhs(np.zeros(9), np.zeros(4), np.zeros(3))[3:6], [0, 0, -GRAVITY])
    np.testing.assert_allclose(dynamics_rhs(np.zeros(9), [GRAVITY, 0, 0, 0], [1, 2, 3]),
                               [0, 0, 0, 1, 2, 3, 0, 0, 0], atol=1e-15)


def test_hover_step_keeps_state():
    x = np.r_[1.0, 2.0, 3.0, np.zeros(6)]
    out = integrate_step(x, [GRAVITY, 0, 0, 0], lambda t: np.zeros(3), 0.0, 0.02)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_one_second_of_free_fall():
    x = np.zeros(9)
    for k in range(50):
        x = integrate_step(x, np.zeros(4), lambda t: np.zeros(3), k * 0.02, 0.02)
    assert x[5] == pytest.approx(-GRAVITY, abs=1e-9)
    assert x[2] == pytest.approx(-0.5 * GRAVITY, abs=1e-9)


def test_euler_angles_follow_rate_map(rng):
    """Simulated angles under constant body rates: finite differences match ``C(Phi) w`` to O(dt^2)."""
    w = np.array([0.3, -0.2, 0.5])
    dt = 0.01
    xs = [np.r_[np.zeros(6), 0.1, 0.2, -0.3]]
    for k in range(40):
        xs.append(integrate_step(xs[-1], np.r_[GRAVITY, w], lambda t: np.zeros(3), k * dt, dt))
    xs = np.array(xs)
    fd = (xs[2:, 6:] - xs[:-2, 6:]) / (2 * dt)
    pred = euler_rate_map(xs[1:-1, 6:]) @ w
    assert np.abs(fd - pred).max() < 1e-3
