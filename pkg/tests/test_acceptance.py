"""Acceptance criteria at their stated tolerances; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The lines are printed even
when output capture is on.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import random_spd, sample_ellipsoid
from multirotor_frs.config import ScenarioConfig, default_config_dict
from multirotor_frs.controller import reference_state
from multirotor_frs.dynamics import GRAVITY, integrate_step, thrust_direction
from multirotor_frs.ellipsoid import (
    Ellipsoid,
    fuse_intersection,
    linear_map,
    min_trace_box_ellipsoid,
    project,
    quadratic_form,
    support,
)
from multirotor_frs.frs import Mode, jacobian, reference_rollout
from multirotor_frs.scenarios import _reference, check_gains, run_scenario1

SLACK = 1e-6


@pytest.fixture(scope="module")
def cfg():
    return ScenarioConfig()


@pytest.fixture(scope="module")
def scenario1(cfg):
    tic = time.perf_counter()
    result = run_scenario1(cfg, n_samples=500, hopf_directions=100)
    return result, time.perf_counter() - tic


@pytest.fixture(scope="module")
def gains_report(cfg):
    return check_gains(cfg)


@pytest.fixture
def report(capsys, request):
    def emit(ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_soundness(scenario1, report):
    result, wall = scenario1
    parts, ok = [], wall < 120.0
    for mode in (Mode.BASELINE, Mode.PROPOSED_LIN):
        run = result.runs[mode]
        viol = int(np.sum(run.state_margin > 1.0 + SLACK))
        ok &= viol == 0
        parts.append(f"{mode.value} {viol}/{run.state_margin.size} outside (max margin {run.state_margin.max():.3f})")
    report(ok, "; ".join(parts) + f"; runtime {wall:.1f} s")


def test_criterion_2_ordering(scenario1, report):
    result, _ = scenario1
    base = result.runs[Mode.BASELINE].tube
    parts, ok = [], True
    for mode in (Mode.PROPOSED_LIN, Mode.PROPOSED_NOLIN):
        t = result.runs[mode].tube
        tr = bool(np.all(t.trace_inv[1:] < base.trace_inv[1:]))
        det = bool(np.all(t.logdet_inv[1:] < base.logdet_inv[1:]))
        ratio = float(np.exp(base.logdet_inv[-1] - t.logdet_inv[-1]))
        ok &= tr and det and ratio >= 10.0
        parts.append(f"{mode.value} trace below={tr} det below={det} det ratio end={ratio:.3g}")
    report(ok, "; ".join(parts))


def test_criterion_3_bench(tmp_path, report):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(default_config_dict()))
    cmd = [sys.executable, "-c", "import sys; from multirotor_frs.cli import main; sys.exit(main())",
           "bench", "--config", str(cfg_path), "--iters", "20"]
    res = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    bench = json.loads(res.stdout)
    budgets = {"baseline": 100.0, "proposed_lin": 200.0, "proposed_nolin": 200.0}
    ok = all(bench[m]["median_ms"] <= b and bench[m]["iters"] >= 20 for m, b in budgets.items())
    report(ok, "; ".join(f"{m} median {bench[m]['median_ms']:.1f} ms (budget {b:.0f})" for m, b in budgets.items()))


def test_criterion_4_observer_convergence(gains_report, report):
    audit = gains_report["disturbance_audit"]
    radius = 2.165
    ultimate_ok = audit["ultimate_max"] <= radius * 1.05
    rate_ok = audit["min_decay_rate"] >= 0.8 * audit["rate_bound"]
    report(ultimate_ok and rate_ok and gains_report["n_paths"] >= 100,
           f"{gains_report['n_paths']} paths; ultimate max |e_d| {audit['ultimate_max']:.4f} <= {radius * 1.05:.4f}; "
           f"min V1 decay rate {audit['min_decay_rate']:.3f} >= {0.8 * audit['rate_bound']:.3f}")


def test_criterion_5_check_gains(gains_report, report):
    cert = gains_report["certificate"]
    err = gains_report["error_dynamics_audit"]
    h12 = cert["hypothesis_1"] and cert["hypothesis_2"] and abs(cert["hypothesis_2_threshold"] - 0.0639) < 5e-5
    h3 = gains_report["s_m_source"] == "measured" and cert["hypothesis_3"] in ("satisfied", "violated", "vacuous")
    bounded = err["error_norm_ultimate"] <= err["radius"] * 1.10
    report(h12 and h3 and bounded,
           f"H1={cert['hypothesis_1']} H2={cert['hypothesis_2']} (2 > {cert['hypothesis_2_threshold']:.4f}); "
           f"H3 {cert['hypothesis_3']} at measured s_m={cert['s_m']:.4f} (limit {cert['s_m_limit']:.4f}); "
           f"ultimate |e| {err['error_norm_ultimate']:.4f} <= {err['radius'] * 1.10:.4f}")


def test_criterion_6_hopf_certificate(scenario1, report):
    result, _ = scenario1
    worst = {m.value: float(r.hopf_margins.min()) for m, r in result.runs.items()}
    steps = {m.value: r.hopf_margins.size for m, r in result.runs.items()}
    ok = all(v >= -1e-9 for v in worst.values()) and all(n == 135 for n in steps.values())
    report(ok, "; ".join(f"{m} min margin {v:.3e} over {steps[m]} steps" for m, v in worst.items()))


def test_criterion_7_ellipsoid_oracles(report):
    rng = np.random.default_rng(7)
    n = 1000
    e1 = Ellipsoid(rng.standard_normal(6), random_spd(rng, 6))
    e2 = Ellipsoid(rng.standard_normal(6), random_spd(rng, 6))
    fusion_err = 0.0
    for b, ref in ((1.0, e1), (0.0, e2)):
        f = fuse_intersection(e1, e2, b)
        fusion_err = max(fusion_err, np.abs(f.shape - ref.shape).max() / np.abs(ref.shape).max(),
                         np.abs(f.center - ref.center).max())
    pts = sample_ellipsoid(rng, e1.center, e1.shape, n, surface=True)
    kept = [0, 2, 5]
    proj_max = float(quadratic_form(project(e1, kept), pts[:, kept]).max())
    dirs = rng.standard_normal((n, 6))
    supp_gap = float(min(support(e1, nu) - np.max(pts @ nu) for nu in dirs))
    t = rng.standard_normal((6, 6)) + 3.0 * np.eye(6)
    lin_max = float(np.abs(quadratic_form(linear_map(e1, t), pts @ t.T) - 1.0).max())
    d = np.array([3.0, 3.0, 1.0])
    best = np.trace(np.linalg.inv(min_trace_box_ellipsoid(d)))
    lam = rng.uniform(1e-3, 1.0, (10_000, 3))
    lam /= (lam @ d**2)[:, None]
    box_gap = float(np.min(np.sum(1.0 / lam, axis=1)) - best)
    ok = fusion_err <= 1e-12 and proj_max <= 1 + 1e-12 and supp_gap >= -1e-12 and lin_max <= 1e-10 and box_gap >= -1e-6
    report(ok, f"fusion endpoint error {fusion_err:.1e}; projection max {proj_max:.12f}; support gap {supp_gap:.2e}; "
               f"linear map boundary error {lin_max:.1e}; box competitor gap {box_gap:.3e}")


def test_criterion_8_numerical_consistency(scenario1, report):
    result, _ = scenario1
    cfg = result.config
    settings = cfg.frs_settings()
    tube = result.runs[Mode.PROPOSED_LIN].tube
    roll = reference_rollout(tube.y_r[0], _reference(cfg), tube.times[0], cfg.horizon, settings)
    a1 = jacobian(roll.y_mid, roll.sigma_mid, settings.gains, settings.alpha_d, h=1e-6)
    a2 = jacobian(roll.y_mid, roll.sigma_mid, settings.gains, settings.alpha_d, h=5e-7)
    jac_rel = float((np.linalg.norm(a1 - a2, axis=(1, 2)) / np.linalg.norm(a1, axis=(1, 2))).max())
    psi_dev = max(float(np.abs(r.tube.linearization["Psi"] @ r.tube.linearization["Psi_inv"] - np.eye(15)).max())
                  for r in result.runs.values())
    x = reference_state(_reference(cfg)(0.0))
    x[6:] = [0.1, -0.2, 0.3]
    p0, v0 = x[:3].copy(), x[3:6].copy()
    u = np.array([11.0, 0.0, 0.0, 0.0])
    dist = np.array([0.4, -0.3, 0.2])
    acc = u[0] * thrust_direction(x[6:]) + dist - np.array([0.0, 0.0, GRAVITY])
    for k in range(135):
        x = integrate_step(x, u, lambda t: dist, k * 0.02, 0.02)
    t_end = 135 * 0.02
    rk4_err = float(max(np.abs(x[:3] - (p0 + v0 * t_end + 0.5 * acc * t_end**2)).max(),
                        np.abs(x[3:6] - (v0 + acc * t_end)).max()))
    ok = jac_rel <= 1e-5 and psi_dev <= 1e-8 and rk4_err <= 1e-8
    report(ok, f"Jacobian step-halving {jac_rel:.2e}; |Psi Psi^-1 - I| {psi_dev:.2e}; RK4 ballistic {rk4_err:.2e}")
