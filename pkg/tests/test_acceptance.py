"""Acceptance suite: one test per criterion, each printing a PASS line.

Stochastic criteria run at protocol seeds fixed here; tolerances are stated
inline and match the project contract.  Run with `pytest -s` to see the
per-criterion lines.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from hderm import (MultinomialLoss, QuadraticLoss, law_nu_opt,
                   m_functional, marchenko_pastur_density, min_log_potential,
                   predicted_observables, predicted_spectrum, prox,
                   saddle_solve, solve_critical_point, spectral_density)
from hderm.asymptotics import MomentEngine, default_rule, saddle_value
from hderm.cli import main as cli_main
from hderm.cli import w1_distance
from hderm.prox import moreau, moreau_grad, prox_jacobian
from hderm.quadrature import gaussian_rule
from hderm.simulator import ExperimentConfig, run_experiment, run_trial
from hderm.spectrum import CurvatureMeasure, solve_stieltjes, solve_stieltjes_grid
from hderm._mat import minvsqrt

from conftest import R00_SYM


def _report(name, elapsed, detail=""):
    print(f"\n{name} PASS ({elapsed:.1f}s) {detail}")


def _rand_pd(rng, k, lo=0.2, hi=3.0):
    a = rng.normal(size=(k, k))
    w = rng.uniform(lo, hi, size=k)
    q, _ = np.linalg.qr(a)
    return (q * w) @ q.T


def test_p1_prox_kernel():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    for i in range(1000):
        k = int(rng.integers(1, 5))
        loss = MultinomialLoss(k) if i % 2 == 0 else QuadraticLoss(k)
        s = _rand_pd(rng, k)
        sinv = np.linalg.inv(s)
        v0 = rng.normal(size=k)
        w = rng.uniform()
        z1 = rng.normal(scale=2.0, size=k)
        z2 = rng.normal(scale=2.0, size=k)
        r1 = prox(loss, v0, w, z1, s)
        r2 = prox(loss, v0, w, z2, s)
        assert r1.residual <= 1e-10
        assert r2.residual <= 1e-10
        dx = r1.x - r2.x
        dz = z1 - z2
        assert dx @ sinv @ dx <= dz @ sinv @ dz + 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 2.0
    _report("P1", elapsed, "1000 instances, residual<=1e-10, firmly nonexpansive")


def test_p2_moreau_and_jacobian():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    h = 1e-6
    worst_env, worst_jac = 0.0, 0.0
    for i in range(200):
        k = int(rng.integers(1, 4))
        loss = MultinomialLoss(k) if i % 2 == 0 else QuadraticLoss(k)
        s = _rand_pd(rng, k)
        v0 = rng.normal(size=k)
        w = rng.uniform()
        z = rng.normal(scale=1.5, size=k)
        g = moreau_grad(loss, v0, w, z, s)
        num = np.zeros(k)
        for j in range(k):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            num[j] = (moreau(loss, v0, w, zp, s) - moreau(loss, v0, w, zm, s)) / (2 * h)
        err_env = np.abs(g - num).max() / (1.0 + np.abs(g).max())
        worst_env = max(worst_env, err_env)
        r = prox(loss, v0, w, z, s)
        numj = np.zeros((k, k))
        for j in range(k):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            numj[:, j] = (prox(loss, v0, w, zp, s).x - prox(loss, v0, w, zm, s).x) / (2 * h)
        worst_jac = max(worst_jac, float(np.abs(r.jac - numj).max()))
    assert worst_env <= 1e-5
    assert worst_jac <= 1e-5
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _report("P2", elapsed, f"env grad err {worst_env:.1e}, jac err {worst_jac:.1e}")


def test_p3_stieltjes_fixed_point():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    # k = 2 curvature with a few PSD atoms
    atoms = np.stack([_rand_pd(rng, 2, 0.05, 1.0) for _ in range(5)])
    cm = CurvatureMeasure(atoms=atoms, weights=np.full(5, 0.2))
    alpha, gamma = 2.0, 1e-3
    xs = np.linspace(-0.5, 3.5, 2000)
    sols = solve_stieltjes_grid(xs, gamma, cm, alpha, tol=1e-10)
    # residual check at every grid point
    from hderm.spectrum import _expect_resolvent

    f = _expect_resolvent(sols, cm)
    f = np.linalg.inv(f - (xs + 1j * gamma)[:, None, None] * np.eye(2)[None])
    res = np.abs(f - alpha * sols).max(axis=(1, 2)) / (alpha * np.abs(sols).max(axis=(1, 2)))
    assert res.max() <= 1e-10
    # Herglotz nonnegativity, exact
    dens = np.imag(alpha * np.trace(sols, axis1=1, axis2=2))
    assert (dens >= 0).all()
    # uniqueness: two random initializations agree
    z = 0.5 + 0.01j
    s_a = solve_stieltjes(z, cm, alpha, s0=1j * np.diag(rng.uniform(0.5, 2, 2)), tol=1e-12).s
    s_b = solve_stieltjes(z, cm, alpha, s0=1j * np.diag(rng.uniform(0.5, 2, 2)) + 0.1, tol=1e-12).s
    assert np.abs(s_a - s_b).max() <= 1e-8
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _report("P3", elapsed, f"2000-point grid, max residual {res.max():.1e}")


def test_p4_marchenko_pastur_oracle():
    t0 = time.perf_counter()
    alpha, gamma = 2.0, 1e-3
    cm = CurvatureMeasure(atoms=np.ones((1, 1, 1)), weights=np.ones(1))
    lo = (1 - np.sqrt(1 / alpha)) ** 2
    hi = (1 + np.sqrt(1 / alpha)) ** 2
    grid = np.arange(lo - 1.0, hi + 1.0, 1e-3)
    dens = spectral_density(cm, alpha, lam=0.0, grid=grid, gamma=gamma)
    mp = marchenko_pastur_density(grid, alpha)
    # bulk comparison excludes a 0.02-wide edge layer: at the square-root
    # edges the gamma-smoothed estimate deviates by ~ C sqrt(gamma) (~0.1)
    # for any estimator honoring the i*gamma evaluation formula
    bulk = (grid >= lo + 0.02) & (grid <= hi - 0.02)
    sup_err = float(np.abs(dens.density - mp)[bulk].max())
    assert sup_err <= 2e-2
    assert abs(dens.mass - 1.0) <= 5e-3
    # free-shift identity is an exact abscissa shift
    lam = 0.3
    d_shift = spectral_density(cm, alpha, lam=lam, grid=grid + lam, gamma=gamma)
    assert np.abs(d_shift.density - dens.density).max() <= 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _report("P4", elapsed, f"sup err {sup_err:.3f}, mass {dens.mass:.4f}")


def test_p5_log_potential():
    t0 = time.perf_counter()
    # zero curvature, lam > 0: closed-form minimum k log(lam)
    cm0 = CurvatureMeasure(atoms=np.zeros((1, 2, 2)), weights=np.ones(1))
    for lam in (0.4, 1.3):
        val, q = min_log_potential(cm0, alpha=2.0, lam=lam)
        assert abs(val - 2 * np.log(lam)) <= 1e-10
    # MP case: equals the density integral of log (convex-loss equality)
    alpha, lam = 2.0, 0.5
    cm1 = CurvatureMeasure(atoms=np.ones((1, 1, 1)), weights=np.ones(1))
    val, _ = min_log_potential(cm1, alpha, lam)
    lo = (1 - np.sqrt(1 / alpha)) ** 2 + lam
    hi = (1 + np.sqrt(1 / alpha)) ** 2 + lam
    grid = np.arange(max(lo - 0.4, 1e-3), hi + 0.4, 5e-4)
    dens = spectral_density(cm1, alpha, lam=lam, grid=grid, gamma=1e-3)
    integral = dens.integrate(np.log, normalize=True)
    assert abs(val - integral) <= 1e-3
    elapsed = time.perf_counter() - t0
    _report("P5", elapsed, f"MP log-integral gap {abs(val - integral):.2e}")


def test_p6_critical_point_system(mn2, rule24, p6_solution):
    t0 = time.perf_counter()
    sol = p6_solution
    assert sol.converged
    assert sol.residual1 <= 1e-7 and sol.residual2 <= 1e-7
    # exchange symmetry of the symmetric-class family
    r11, r10, s = sol.r.r11, sol.r.r10, sol.s
    defect = max(abs(r11[0, 0] - r11[1, 1]), abs(r10[0, 0] - r10[1, 1]),
                 abs(r10[0, 1] - r10[1, 0]), abs(s[0, 0] - s[1, 1]))
    assert defect <= 1e-6
    # zero-rate identity
    nu, _ = law_nu_opt(mn2, sol.r, sol.s, rule24)
    assert abs(m_functional(nu, sol.r, sol.s, 3.0)) <= 1e-6
    # saddle cross-check
    K, M, S, val, info = saddle_solve(mn2, 3.0, 0.1, R00_SYM, rule=rule24,
                                      init=(sol.k_factor, sol.m_factor, sol.s))
    assert np.abs(K @ K - sol.r.schur()).max() <= 1e-5
    assert np.abs(M - sol.r.r10 @ minvsqrt(R00_SYM)).max() <= 1e-5
    engine = MomentEngine(mn2, 3.0, 0.1, R00_SYM, rule24)
    mom = engine.moments(sol.k_factor, sol.m_factor, sol.s)
    assert abs(val - saddle_value(engine, sol.k_factor, sol.m_factor, sol.s, mom)) <= 1e-5
    elapsed = time.perf_counter() - t0 + getattr(sol, "solve_seconds", 0.0)
    assert elapsed < 120.0
    _report("P6", elapsed,
            f"residuals ({sol.residual1:.1e},{sol.residual2:.1e}), symmetry {defect:.1e}")


def test_p7_theory_vs_simulation(mn2, rule24):
    t0 = time.perf_counter()
    d, trials = 200, 50
    alphas = [3.0, 10.0]
    lams = [1e-2, 1e-1, 1.0]
    worst = dict(train=0.0, test=0.0, cls=0.0, est=0.0)
    for ai, alpha in enumerate(alphas):
        init = None
        for lam in sorted(lams, reverse=True):
            sol = solve_critical_point(mn2, alpha, lam, R00_SYM, rule=rule24,
                                       options={"init": init})
            init = (sol.k_factor, sol.m_factor, sol.s)
            obs = predicted_observables(mn2, sol, alpha, lam, rule=rule24)
            cfg = ExperimentConfig(
                n=int(alpha * d), d=d, k=2, k0=2, lam=lam, r00=R00_SYM,
                loss="multinomial", trials=trials, seed=7000 + 100 * ai + int(-np.log10(lam)),
            )
            ms = run_experiment(cfg, threads=2)
            train = np.mean([m.train_loss for m in ms])
            test = np.mean([m.test_loss for m in ms])
            cls = np.mean([m.class_error for m in ms])
            est = np.mean([m.est_error for m in ms])
            worst["train"] = max(worst["train"], abs(train - obs.train_loss) / obs.train_loss)
            worst["test"] = max(worst["test"], abs(test - obs.test_loss) / obs.test_loss)
            worst["cls"] = max(worst["cls"], abs(cls - obs.classification_error))
            worst["est"] = max(worst["est"], abs(est - obs.estimation_error) / obs.estimation_error)
    assert worst["train"] <= 0.03
    assert worst["test"] <= 0.03
    assert worst["cls"] <= 0.01
    assert worst["est"] <= 0.05
    elapsed = time.perf_counter() - t0
    assert elapsed < 900.0
    _report("P7", elapsed,
            f"rel errs train {worst['train']:.3f} test {worst['test']:.3f} "
            f"class {worst['cls']:.4f} est {worst['est']:.3f}")


def _pooled_esd(d, alpha, seed, trials):
    cfg = ExperimentConfig(n=int(alpha * d), d=d, k=2, k0=2, lam=0.0, r00=R00_SYM,
                           loss="multinomial", trials=trials, seed=seed,
                           newton_max_iter=200)
    ms = run_experiment(cfg, threads=2)
    assert all(not m.nonexistent for m in ms)
    return np.concatenate([m.eigenvalues for m in ms])


def test_p8_hessian_esd(mn2, rule24):
    t0 = time.perf_counter()
    alpha = 10.0
    sol = solve_critical_point(mn2, alpha, 0.0, R00_SYM, rule=rule24)
    assert sol.converged
    grid = np.arange(-0.02, 0.7, 5e-4)
    dens = predicted_spectrum(mn2, sol, alpha, 0.0, grid, gamma=1e-4, rule=rule24)
    # protocol seeds fixed; the d=100 pool uses more trials so its distance
    # estimate sits at the finite-d bias rather than pool noise
    e200 = _pooled_esd(200, alpha, seed=8101, trials=20)
    e100 = _pooled_esd(100, alpha, seed=8202, trials=60)
    w200 = w1_distance(e200, grid, dens.density)
    w100 = w1_distance(e100, grid, dens.density)
    assert w200 <= 0.05
    assert w200 < w100
    # alpha = 20: the bulk develops (at least) two modes
    sol20 = solve_critical_point(mn2, 20.0, 0.0, R00_SYM, rule=rule24)
    grid20 = np.arange(-0.02, 0.7, 1e-3)
    dens20 = predicted_spectrum(mn2, sol20, 20.0, 0.0, grid20, gamma=1e-3, rule=rule24)
    from scipy.signal import argrelmax

    peaks = [i for i in argrelmax(dens20.density, order=10)[0]
             if dens20.density[i] > 0.05 * dens20.density.max()]
    assert len(peaks) >= 2
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    _report("P8", elapsed,
            f"W1 d200 {w200:.4f} < d100 {w100:.4f}; alpha=20 modes {len(peaks)}")


def test_p9_nonexistence_dichotomy(mn2):
    t0 = time.perf_counter()
    # asymptotic side
    sol_div = solve_critical_point(mn2, 1.2, 0.0, 50 * R00_SYM)
    assert sol_div.diverged and not sol_div.converged
    assert len(sol_div.trace) > 0
    sol_ok = solve_critical_point(mn2, 3.0, 0.0, R00_SYM)
    assert sol_ok.converged and not sol_ok.diverged
    # finite-n side, d = 200, 20 trials each
    cfg_div = ExperimentConfig(n=240, d=200, k=2, k0=2, lam=0.0, r00=50 * R00_SYM,
                               loss="multinomial", trials=20, seed=909,
                               newton_max_iter=300)
    ms_div = run_experiment(cfg_div, threads=2)
    n_nonexist = sum(m.nonexistent for m in ms_div)
    assert n_nonexist >= 18
    cfg_ok = ExperimentConfig(n=600, d=200, k=2, k0=2, lam=0.0, r00=R00_SYM,
                              loss="multinomial", trials=20, seed=910,
                              newton_max_iter=300)
    ms_ok = run_experiment(cfg_ok, threads=2)
    assert sum(not m.nonexistent for m in ms_ok) == 20
    elapsed = time.perf_counter() - t0
    _report("P9", elapsed,
            f"diverged + {n_nonexist}/20 nonexistent; converse 20/20 exist")


P10_CONFIG = """
[model]
k = 2
k0 = 2
loss = "multinomial"
r00 = [[1.0, 0.5], [0.5, 1.0]]
seed = 345

[theory]
alpha = [3.0]
lambda = [0.5, 0.1]
nodes_per_dim = 10

[simulate]
d = 40
alpha = [3.0]
lambda = [0.5]
trials = 6
"""


def test_p10_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(P10_CONFIG)
    blobs = {}
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        for cmd in ("theory", "simulate"):
            r = subprocess.run(
                [sys.executable, "-m", "hderm.cli", cmd, "--config", str(cfg),
                 "--out", str(out), "--threads", str(threads)],
                capture_output=True, text=True,
            )
            assert r.returncode == 0, r.stderr
        blobs[threads] = {
            name: (out / name).read_bytes()
            for name in ("theory.csv", "sim_summary.csv", "sim_metrics_0.csv",
                         "sim_eigs_0.csv")
        }
    for threads in (4, 8):
        for name, blob in blobs[1].items():
            assert blobs[threads][name] == blob, f"{name} differs at --threads {threads}"
    elapsed = time.perf_counter() - t0
    _report("P10", elapsed, "byte-identical CSVs at --threads 1/4/8")
