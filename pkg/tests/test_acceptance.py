"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from conftest import random_lti, simulate_lti
from oracles import dare_value_iteration, dmdc_oracle, measured_rk4_order, scalar_dare_value_iteration
from test_koopman import tls_vs_ls_errors

from koopquad import cli
from koopquad import evaluation as ev
from koopquad import koopman as km
from koopquad import lqr
from koopquad import quadsim as qs
from koopquad import reference as rf
from koopquad.cli import PipelineConfig

# Closed-loop NRMSE means (percent) of the reference results table.
TABLE = {"position": 3.2529, "velocity": 4.8129, "euler": 2.4398, "angular_velocity": 7.8525}
BAND = 3.0


def verdict(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    print("\n" + line)
    return ok


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    code = cli.main(["pipeline", "--out", str(out), "--no-predict"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return out, json.loads((out / "report.json").read_text()), elapsed


def test_criterion_1_closed_loop_nrmse(pipeline_run, capsys):
    _, rep, elapsed = pipeline_run
    rows = rep["nrmse_percent"]["koopman_tls"]
    parts, ok = [], True
    for g, target in TABLE.items():
        m = rows[g]["mean"]
        inside = target / BAND <= m <= target * BAND
        ok &= inside
        parts.append(f"{g} {m:.4f}±{rows[g]['std']:.4f} vs {target} [{target / BAND:.3f}, "
                     f"{target * BAND:.3f}] {'in' if inside else 'OUT'}")
    mean_ok = rows["mean"]["mean"] <= 15.0
    time_ok = elapsed <= 120.0
    parts.append(f"mean {rows['mean']['mean']:.4f} <= 15 {'ok' if mean_ok else 'NO'}")
    parts.append(f"runs {rep['meta']['runs']}, runtime {elapsed:.1f}s")
    with capsys.disabled():
        passed = verdict(1, ok and mean_ok and time_ok and rep["meta"]["runs"] >= 5, "; ".join(parts))
    assert passed


def test_criterion_2_spectra(pipeline_run, capsys):
    _, rep, _ = pipeline_run
    sp = rep["spectra"]["tls"]
    rho_a = sp["A"]["spectral_radius"]
    # the constant observable is uncontrollable with eigenvalue exactly 1
    rho_cl = sp["A_minus_BK_without_constant"]["spectral_radius"]
    const_mode = sp["A_minus_BK"]["spectral_radius"]
    checks = [(0, rho_a, rho_cl)]
    # the same check on fits from other root seeds
    for seed in (1, 2):
        cfg = PipelineConfig(seed=seed)
        ds = rf.collect_dataset(cfg.train_specs(), cfg.pd_gains(), cfg.quad_params())
        model, _ = km.fit(ds)
        gain = lqr.design(model, cfg.weights())
        checks.append((seed, ev.spectrum(model.A).spectral_radius,
                       ev.spectrum((model.A - model.B @ gain.K)[1:, 1:]).spectral_radius))
    ok = all(a > 1.0 and c < 1.0 for _, a, c in checks)
    detail = "; ".join(f"seed {s}: rho(A) {a:.5f}, rho(A-BK) {c:.7f}" for s, a, c in checks)
    detail += f"; constant mode of A-BK {const_mode:.15f}"
    with capsys.disabled():
        passed = verdict(2, ok, detail)
    assert passed


def test_criterion_3_prediction(tls_model, default_config, params, capsys):
    pd = default_config.pd_gains()
    pos200, short, long_ = [], [], []
    for spec in default_config.eval_specs():
        traj = rf.gen_helix(spec)
        log = rf.simulate_tracking(traj, rf.PidController(pd, params, traj.dt), params, steps=300)
        pred = km.predict(tls_model, log.states[0], log.inputs, 300)
        pos200.append(ev.nrmse(pred[:201, :3], log.states[:201, :3]))
        mean_err = lambda n: np.mean(list(ev.group_nrmse(pred[: n + 1], log.states[: n + 1]).values()))
        short.append(mean_err(150))
        long_.append(mean_err(300))
    pos_ok = pos200[0] <= 15.0 and max(pos200) <= 15.0
    horizon_ok = np.mean(short) <= np.mean(long_)
    detail = (f"200-step position NRMSE % per helix {[round(v, 3) for v in pos200]} <= 15; "
              f"mean group NRMSE 150 steps {np.mean(short):.3f} <= 300 steps {np.mean(long_):.3f}")
    with capsys.disabled():
        passed = verdict(3, pos_ok and horizon_ok, detail)
    assert passed


def test_criterion_4_exact_recovery(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    p, l = 12, 4
    A0, B0 = random_lti(rng, p, l)
    X, Xp, U = simulate_lti(A0, B0, rng, 10 * (p + l))
    m = km.fit_ls(X, Xp, U, km.LiftingDictionary("identity"))
    err = np.linalg.norm(np.hstack([m.A - A0, m.B - B0]))
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        passed = verdict(4, err <= 1e-8 and elapsed <= 5.0,
                         f"Frobenius error {err:.2e} <= 1e-8, T={X.shape[1]}, {elapsed:.3f}s <= 5s")
    assert passed


def test_criterion_5_identity_reduction(capsys):
    rng = np.random.default_rng(5)
    A0, B0 = random_lti(rng, 12, 4)
    X, Xp, U = simulate_lti(A0, B0, rng, 500)
    Xp = Xp + 1e-2 * rng.standard_normal(Xp.shape)
    m = km.fit_ls(X, Xp, U, km.LiftingDictionary("identity"))
    diff = np.abs(np.hstack([m.A, m.B]) - dmdc_oracle(X, Xp, U)).max()
    with capsys.disabled():
        passed = verdict(5, diff <= 1e-10, f"max |EDMD - DMDc| {diff:.2e} <= 1e-10")
    assert passed


def test_criterion_6_tls(capsys):
    tls_err, ls_err = tls_vs_ls_errors(20)
    rng = np.random.default_rng(6)
    A0, B0 = random_lti(rng, 12, 4)
    X, Xp, U = simulate_lti(A0, B0, rng, 400)
    ident = km.LiftingDictionary("identity")
    t = km.fit_tls(X, Xp, U, ident, variant="classical")
    s = km.fit_ls(X, Xp, U, ident)
    clean = np.linalg.norm(np.hstack([t.A - s.A, t.B - s.B]))
    ok = tls_err.mean() <= ls_err.mean() and clean <= 1e-6
    with capsys.disabled():
        passed = verdict(6, ok, f"mean error over 20 seeds TLS {tls_err.mean():.4e} <= LS "
                                f"{ls_err.mean():.4e}; noise-free |TLS - LS| {clean:.2e} <= 1e-6")
    assert passed


def test_criterion_7_dare(tls_gain, capsys):
    solves = [("default lifted model", tls_gain.residual, np.linalg.norm(tls_gain.P))]
    oracle_err = []
    for a, b, q, r in [(1.0, 1.0, 1.0, 1.0), (1.2, 0.5, 2.0, 0.3), (0.9, 0.1, 1.0, 1.0)]:
        for init in ("schur", "doubling"):
            g = lqr.solve_dare([[a]], [[b]], [[q]], [[r]], init=init)
            solves.append((f"scalar {a},{b}", g.residual, np.linalg.norm(g.P)))
            oracle_err.append(abs(g.P[0, 0] - scalar_dare_value_iteration(a, b, q, r)))
    dt = 0.1
    A = np.array([[1, dt], [0, 1]])
    B = np.array([[0.5 * dt ** 2], [dt]])
    P_vi, K_vi = dare_value_iteration(A, B, np.eye(2), np.eye(1))
    for init in ("schur", "doubling"):
        g = lqr.solve_dare(A, B, np.eye(2), np.eye(1), init=init)
        solves.append(("double integrator", g.residual, np.linalg.norm(g.P)))
        oracle_err += [np.abs(g.K - K_vi).max(), np.abs(g.P - P_vi).max()]
    rel = max(res / nP for _, res, nP in solves)
    ok = all(res <= 1e-8 * nP for _, res, nP in solves) and max(oracle_err) <= 1e-8
    with capsys.disabled():
        passed = verdict(7, ok, f"{len(solves)} solves, worst residual/||P|| {rel:.2e} <= 1e-8; "
                                f"worst oracle deviation {max(oracle_err):.2e} <= 1e-8")
    assert passed


def test_criterion_8_numerics(default_config, params, capsys):
    order = measured_rk4_order()
    # unit norm after every step of a PD-tracked helix and a free tumble
    traj = rf.gen_helix(default_config.eval_specs()[0])
    log = rf.simulate_tracking(traj, rf.PidController(default_config.pd_gains(), params), params, steps=500)
    norms = [np.linalg.norm(x[6:10]) for x in log.quat_states]
    x = qs.make_state(q=qs.euler_to_quat(0.3, 0.2, -1.0), omega=(3.0, -2.0, 5.0))
    for _ in range(2000):
        x = qs.rk4_step(x, np.array([0.3, 0.6, 0.2, 0.5]), 0.01, params)
        norms.append(np.linalg.norm(x[6:10]))
    unit_dev = max(abs(n - 1.0) for n in norms)
    ref = np.arange(1.0, 13.0)
    trivial_ok = ev.nrmse(ref, ref) == 0.0 and ev.nrmse(np.zeros(12), ref) == 100.0
    rng = np.random.default_rng(8)
    rt = 0.0
    for _ in range(1000):
        e = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.4, 1.4), rng.uniform(-np.pi, np.pi)])
        rt = max(rt, np.abs(qs.quat_to_euler(qs.euler_to_quat(*e)) - e).max())
    ok = order >= 3.9 and unit_dev <= 1e-12 and trivial_ok and rt <= 1e-9
    with capsys.disabled():
        passed = verdict(8, ok, f"RK4 order {order:.3f} >= 3.9; max | |q| - 1 | {unit_dev:.1e} "
                                f"over {len(norms)} states; nrmse 0/100 exact {trivial_ok}; "
                                f"Euler roundtrip {rt:.1e} <= 1e-9")
    assert passed


def test_criterion_9_rank_reports(pipeline_run, capsys):
    out, rep, _ = pipeline_run
    rk = rep["rank"]["tls"]
    needed = ("controllability", "observability", "regressor")
    exists = all(k in rk and rk[k] and rk[k]["singular_values"] for k in needed)
    info = ", ".join(f"{k} {rk[k]['rank']}/{rk[k].get('dim', rk[k].get('rows'))} "
                     f"{rk[k].get('verdict', 'full' if rk[k].get('full_row_rank') else 'deficient')}"
                     for k in rk)
    with capsys.disabled():
        passed = verdict(9, exists, f"reports with singular-value profiles in report.json: {info}")
    assert passed
