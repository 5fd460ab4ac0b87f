import numpy as np
import pytest
import scipy.linalg

from multirotor_frs.config import ScenarioConfig
from multirotor_frs.controller import circular_reference, reference_state
from multirotor_frs.dynamics import rk4_step
from multirotor_frs.ellipsoid import Ellipsoid, min_trace_sum, project, quadratic_form, support
from multirotor_frs.frs import (
    augmented_rhs,
    D_IDX,
    DHAT_IDX,
    F_W,
    FrsSettings,
    Mode,
    hopf_certificate_margins,
    hopf_step_shape,
    initial_set,
    input_channels,
    jacobian,
    propagate_step,
    reference_rollout,
    state_transition,
    support_oracle_G,
)
from multirotor_frs.disturbance import predict_bounds, sample_paths_in_box
from multirotor_frs.scenarios import build_tube, warm_up
from multirotor_frs.simulation import simulate_closed_loop

CFG = ScenarioConfig()
SETTINGS = CFG.frs_settings()
REF = lambda t: circular_reference(t, CFG.trajectory_obj())  # noqa: E731


@pytest.fixture(scope="module")
def start():
    return warm_up(CFG, True)


@pytest.fixture(scope="module")
def tubes(start):
    return {mode: build_tube(CFG, mode, start if mode.uses_estimate else warm_up(CFG, False)) for mode in Mode}


def expm_taylor(a, terms=30):
    """Scaling and squaring with a plain Taylor series, independent of scipy's Pade scheme."""
    s = max(0, int(np.ceil(np.log2(max(np.abs(a).sum(axis=1).max(), 1e-300)))) + 1)
    b = a / 2.0**s
    out, term = np.eye(a.shape[0]), np.eye(a.shape[0])
    for k in range(1, terms):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


class TestLinearization:
    def test_step_halving_agreement(self, tubes):
        roll = reference_rollout(tubes[Mode.PROPOSED_LIN].y_r[0], REF, CFG.warm_up, CFG.horizon, SETTINGS)
        a1 = jacobian(roll.y_mid, roll.sigma_mid, SETTINGS.gains, SETTINGS.alpha_d, h=1e-6)
        a2 = jacobian(roll.y_mid, roll.sigma_mid, SETTINGS.gains, SETTINGS.alpha_d, h=5e-7)
        rel = np.linalg.norm(a1 - a2, axis=(1, 2)) / np.linalg.norm(a1, axis=(1, 2))
        assert rel.max() <= 1e-5

    def test_known_blocks(self, tubes):
        a = tubes[Mode.PROPOSED_LIN].linearization["A"]
        alpha = SETTINGS.alpha_d
        np.testing.assert_allclose(a[:, 0:3, :], np.broadcast_to(np.eye(3, 15, 3), (len(a), 3, 15)), atol=1e-8)
        expected = np.zeros((3, 15))
        expected[:, 9:12] = -alpha * np.eye(3)
        expected[:, 12:15] = alpha * np.eye(3)
        np.testing.assert_allclose(a[:, DHAT_IDX, :], np.broadcast_to(expected, (len(a), 3, 15)), atol=1e-10)
        np.testing.assert_allclose(a[:, D_IDX, :], 0.0, atol=1e-12)
        # the true disturbance enters the velocity rows with unit gain
        np.testing.assert_allclose(a[:, 3:6, 12:15], np.broadcast_to(np.eye(3), (len(a), 3, 3)), atol=1e-8)

    def test_baseline_ignores_estimate(self, tubes):
        a = tubes[Mode.BASELINE].linearization["A"]
        np.testing.assert_allclose(a[:, :, 9:12], 0.0, atol=1e-12)
        np.testing.assert_allclose(a[:, 9:12, :], 0.0, atol=1e-12)

    def test_estimate_decays_along_reference(self, start, tubes):
        tube = tubes[Mode.PROPOSED_LIN]
        tau = tube.times - tube.times[0]
        expected = start.d_hat * np.exp(-SETTINGS.alpha_d * tau)[:, None]
        np.testing.assert_allclose(tube.y_r[:, 9:12], expected, atol=1e-9)
        np.testing.assert_array_equal(tube.y_r[:, 12:15], 0.0)

    def test_rollout_rejects_bad_horizon(self, start):
        with pytest.raises(ValueError):
            reference_rollout(np.zeros(15), REF, 0.0, 0.031, SETTINGS)


class TestTransition:
    def test_inverse_pair(self, tubes):
        for tube in tubes.values():
            lin = tube.linearization
            dev = np.abs(lin["Psi"] @ lin["Psi_inv"] - np.eye(15)).max()
            assert dev <= 1e-8

    def test_against_taylor_exponential(self, tubes):
        lin = tubes[Mode.PROPOSED_LIN].linearization
        for k in (0, 60, len(lin["A"]) - 1):
            np.testing.assert_allclose(lin["Psi"][k], expm_taylor(lin["A"][k] * CFG.dt), rtol=1e-10, atol=1e-12)

    def test_against_integrated_variational_equation(self, tubes):
        a = tubes[Mode.PROPOSED_LIN].linearization["A"][40]
        psi = np.eye(15)
        n = 64
        for i in range(n):
            psi = rk4_step(lambda t, m: a @ m, 0.0, psi, CFG.dt / n)
        step = state_transition(a, F_W, CFG.dt)
        np.testing.assert_allclose(step.Psi, psi, atol=1e-12)
        np.testing.assert_allclose(step.F_eta[1], scipy.linalg.expm(-0.5 * CFG.dt * a) @ F_W, atol=1e-13)
        np.testing.assert_array_equal(step.F_eta[0], F_W)


class TestHopf:
    def test_shape_matches_loop_and_min_trace_sum(self, rng):
        a = rng.standard_normal((15, 15))
        fbar, betabar = input_channels(Mode.PROPOSED_LIN, SETTINGS)
        step = state_transition(a, fbar, 0.02)
        w = 0.02 * np.array([0.25, 0.5, 0.25])
        per_column = []
        for i in range(fbar.shape[1]):
            acc = sum(w[j] * (betabar[i] ** 2 * np.outer(step.F_eta[j][:, i], step.F_eta[j][:, i])
                              + SETTINGS.epsilon * np.eye(15)) for j in range(3))
            per_column.append(0.02 * acc)
        expected = min_trace_sum(per_column)
        got = hopf_step_shape(step.F_eta, betabar, 0.02, SETTINGS.epsilon)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_outer_bound_of_exact_support(self, rng):
        a = 0.5 * rng.standard_normal((15, 15))
        fbar, betabar = input_channels(Mode.PROPOSED_LIN, SETTINGS)
        step = state_transition(a, fbar, 0.02)
        B = hopf_step_shape(step.F_eta, betabar, 0.02, SETTINGS.epsilon)
        for nu in rng.standard_normal((1000, 15)):
            assert np.sqrt(nu @ B @ nu) >= support_oracle_G(step.F_eta, betabar, nu, 0.02) - 1e-12

    def test_tube_margins_nonnegative(self, tubes):
        for tube in tubes.values():
            assert hopf_certificate_margins(tube, 100, seed=0).min() >= -1e-9


class TestTube:
    def test_batched_run_matches_reference_steps(self, tubes, start):
        tube = tubes[Mode.PROPOSED_LIN]
        d_m, d_M = predict_bounds(start.prediction, tube.times[1:])
        S = Ellipsoid(tube.centers[0], tube.shapes[0])
        for k, step in enumerate(tube.steps[:40]):
            S, _ = propagate_step(S, step, d_m[k], d_M[k], SETTINGS.b, SETTINGS.epsilon)
            np.testing.assert_allclose(S.center, tube.centers[k + 1], rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(S.shape, tube.shapes[k + 1], rtol=1e-7)

    def test_projection_block(self, tubes):
        tube = tubes[Mode.BASELINE]
        for k in (0, 50, len(tube) - 1):
            p = project(Ellipsoid(tube.centers[k], tube.shapes[k]), range(9))
            np.testing.assert_allclose(p.shape_inverse, tube.projected_shape_inv(k), rtol=1e-8)
            x = tube.projected_center(k) + 0.3 * np.sqrt(np.diag(tube.projected_shape_inv(k)))
            assert tube.state_margin(k, x) == pytest.approx(quadratic_form(tube.projected[k], x), rel=1e-8)

    def test_halfwidths_are_axis_supports(self, tubes):
        tube = tubes[Mode.PROPOSED_NOLIN]
        k = 70
        e = tube.projected[k]
        for i in range(9):
            axis = np.eye(9)[i]
            assert tube.halfwidths()[k, i] == pytest.approx(support(e, axis) - e.center[i], rel=1e-8)

    def test_metrics_are_projected(self, tubes):
        tube = tubes[Mode.PROPOSED_LIN]
        q = tube.shapes_inv[:, :9, :9]
        np.testing.assert_allclose(tube.trace_inv, np.trace(q, axis1=1, axis2=2), rtol=1e-12)
        np.testing.assert_allclose(tube.logdet_inv, np.linalg.slogdet(q)[1], rtol=1e-10)

    def test_linear_error_dynamics_stay_inside(self, tubes, start):
        """Errors driven through the exact linear model (zero-order-hold rates) remain in ``S``."""
        rng = np.random.default_rng(3)
        for mode in (Mode.PROPOSED_NOLIN, Mode.PROPOSED_LIN):
            tube = tubes[mode]
            lin = tube.linearization
            fbar, betabar = lin["Fbar"], lin["betabar"]
            d_m0, d_M0 = predict_bounds(start.prediction, tube.times[0])
            paths = sample_paths_in_box(SETTINGS.model, d_m0, d_M0, 40, CFG.horizon, CFG.dt, [99], t0=tube.times[0])
            slopes = paths.slopes()
            for i in range(40):
                e = np.zeros(15)
                e[:12] = 0.025 * rng.uniform(-1, 1, 12) / np.sqrt(12)
                e[12:] = paths.values[i, 0]
                assert tube.error_margin(0, e) <= 1.0
                for k in range(len(tube) - 1):
                    wbar = rng.uniform(-1, 1, fbar.shape[1]) * betabar
                    wbar[-3:] = slopes[i, k]
                    big = np.zeros((16, 16))
                    big[:15, :15] = lin["A"][k]
                    big[:15, 15] = fbar @ wbar
                    e = (scipy.linalg.expm(big * CFG.dt) @ np.r_[e, 1.0])[:15]
                    assert tube.error_margin(k + 1, e) <= 1.0 + 1e-6


class TestSettings:
    def test_channels(self):
        assert input_channels(Mode.PROPOSED_NOLIN, SETTINGS)[0].shape == (15, 3)
        assert input_channels(Mode.PROPOSED_LIN, SETTINGS)[0].shape == (15, 12)
        assert input_channels(Mode.BASELINE, SETTINGS)[0].shape == (15, 12)
        plain = FrsSettings(baseline_linearization=False)
        assert input_channels(Mode.BASELINE, plain)[0].shape == (15, 3)
        fbar, beta = input_channels(Mode.PROPOSED_LIN, SETTINGS)
        np.testing.assert_allclose(beta, [0.001] * 3 + [0.01] * 6 + [2.0] * 3)

    def test_initial_set_radii(self):
        s0 = initial_set([0.1, 0.0, -0.1], [1.0, 2.0, 0.5], radius=0.05, disturbance_scale=3.0)
        radii = np.sqrt(np.diag(s0.shape_inverse))
        np.testing.assert_allclose(radii, [0.05] * 12 + [3.0, 6.0, 1.5])
        np.testing.assert_allclose(s0.center[12:], [0.1, 0.0, -0.1])


class TestSmallCases:
    def test_augmented_field_examples(self):
        sig = REF(0.7)
        y = np.r_[reference_state(sig), np.zeros(6)]
        f = augmented_rhs(y, sig, np.zeros(3), SETTINGS.gains, SETTINGS.alpha_d)
        np.testing.assert_array_equal(f[9:12], 0.0)
        y[9:12] = y[12:15] = [0.5, -0.5, 0.1]
        f = augmented_rhs(y, sig, np.zeros(3), SETTINGS.gains, SETTINGS.alpha_d)
        np.testing.assert_allclose(f[9:], 0.0, atol=1e-15)

    def test_augmented_matches_closed_loop_simulation(self, rng):
        """Integrating the augmented field with the sampled rate reproduces plant + observer simulation."""
        path = sample_paths_in_box(SETTINGS.model, np.zeros(3), SETTINGS.model.L, 1, 1.0, 0.02, [4])
        x0 = reference_state(REF(0.0))
        log = simulate_closed_loop(x0, np.zeros(3), path, REF, SETTINGS.gains, SETTINGS.alpha_d)
        slopes = path.slopes()[0]
        y = np.r_[x0, np.zeros(3), path.values[0, 0]]
        for k in range(path.n_steps):
            y = rk4_step(lambda t, s: augmented_rhs(s, REF(t), slopes[k], SETTINGS.gains, SETTINGS.alpha_d),
                         0.02 * k, y, 0.02)
        np.testing.assert_allclose(y[:9], log.x[0, -1], atol=1e-8)
        np.testing.assert_allclose(y[9:12], log.d_hat[0, -1], atol=1e-8)
        np.testing.assert_allclose(y[12:], path.values[0, -1], atol=1e-12)

    def test_zero_jacobian_transition(self):
        step = state_transition(np.zeros((15, 15)), F_W, 0.02)
        np.testing.assert_array_equal(step.Psi, np.eye(15))
        for node in step.F_eta:
            np.testing.assert_array_equal(node, F_W)

    def test_regularization_floor(self):
        step = state_transition(np.zeros((15, 15)), F_W, 0.02)
        B = hopf_step_shape(step.F_eta, np.zeros(3), 0.02, 1e-3)
        # three equal summands dt^2 eps I, each weighted by 1/a_i = 3
        np.testing.assert_allclose(B, 9 * 0.02**2 * 1e-3 * np.eye(15), rtol=1e-12)
        assert support_oracle_G(step.F_eta, np.zeros(3), np.ones(15), 0.02) == 0.0

    def test_single_constant_column(self):
        u0 = np.zeros((15, 1))
        u0[4, 0] = 2.0
        F_eta = np.repeat(u0[None], 3, axis=0)
        dt, beta, eps = 0.02, 1.5, 1e-12
        B = hopf_step_shape(F_eta, [beta], dt, eps)
        np.testing.assert_allclose(B, dt**2 * beta**2 * u0 @ u0.T + dt**2 * eps * np.eye(15), atol=1e-15)
        nu = u0[:, 0] / np.linalg.norm(u0)
        exact = beta * dt * np.linalg.norm(u0)
        assert np.sqrt(nu @ B @ nu) == pytest.approx(exact, rel=1e-9)
        assert support_oracle_G(F_eta, [beta], nu, dt) == pytest.approx(exact, rel=1e-12)

    def test_no_growth_without_inputs(self):
        """``A = 0``, no rate, vanishing regularization and ``b = 1``: the step returns ``S`` itself."""
        S = initial_set(np.zeros(3), np.ones(3))
        step = state_transition(np.zeros((15, 15)), F_W, 0.02, betabar=np.zeros(3))
        out, _ = propagate_step(S, step, np.zeros(3), np.ones(3), b=1.0, epsilon=1e-300)
        np.testing.assert_allclose(out.shape, S.shape, rtol=1e-9)

    def test_linearization_channels_only_enlarge(self, start, tubes):
        rng = np.random.default_rng(1)
        lin, nolin = tubes[Mode.PROPOSED_LIN], tubes[Mode.PROPOSED_NOLIN]
        for k in range(0, len(lin), 5):
            e_lin = Ellipsoid(lin.centers[k], lin.shapes[k])
            e_nolin = Ellipsoid(nolin.centers[k], nolin.shapes[k])
            for nu in rng.standard_normal((100, 15)):
                assert support(e_lin, nu) >= support(e_nolin, nu) - 1e-9
