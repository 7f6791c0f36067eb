import numpy as np
import pytest

from hderm import ExperimentConfig, aggregate, hessian_esd, run_experiment, run_trial
from hderm.linmodel import MultinomialLoss, QuadraticLoss, build_theta0
from hderm.simulator import (IngestError, assemble_hessian, ingest_features,
                             newton_erm)

R00 = np.array([[1.0, 0.5], [0.5, 1.0]])


def _cfg(**kw):
    base = dict(n=250, d=50, k=2, k0=2, lam=0.1, r00=R00, loss="multinomial",
                trials=1, seed=1234)
    base.update(kw)
    return ExperimentConfig(**base)


def test_heavy_ridge_norm_bound():
    # objective at 0 is log(k+1), so (lam/2) ||theta||^2 <= log(k+1)
    cfg = _cfg(lam=1e3)
    m = run_trial(cfg, 0)
    # recover theta norm from the est_error identity is indirect; refit instead
    loss = cfg.make_loss()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((cfg.n, cfg.d))
    th0 = build_theta0(cfg.r00, cfg.d, 7)
    y = loss.onehot(loss.sample_label(x @ th0, rng.uniform(size=cfg.n)))
    theta, gn, _, _ = newton_erm(loss, x, y, 1e3, tol=1e-10)
    assert np.sum(theta**2) <= 2 * np.log(3) / 1e3
    assert gn <= 1e-10


def test_determinism_bitwise():
    cfg = _cfg(trials=3, seed=777)
    a = run_experiment(cfg, threads=1)
    b = run_experiment(cfg, threads=3)
    for ma, mb in zip(a, b):
        assert ma.train_loss == mb.train_loss
        assert ma.test_loss == mb.test_loss
        assert ma.est_error == mb.est_error
        np.testing.assert_array_equal(ma.eigenvalues, mb.eigenvalues)


def test_newton_reaches_tolerance():
    cfg = _cfg(seed=5, newton_tol=1e-8)
    m = run_trial(cfg, 0)
    assert m.grad_norm <= 1e-8
    assert not m.nonexistent


def test_quadratic_ridge_closed_form():
    # noiseless quadratic loss: theta_hat solves (X'X/n + lam I) theta = X'V0/n
    loss = QuadraticLoss(2)
    rng = np.random.default_rng(11)
    n, d, lam = 300, 40, 0.1
    x = rng.standard_normal((n, d))
    th0 = build_theta0(R00, d, 3)
    y = x @ th0
    theta, gn, _, _ = newton_erm(loss, x, y, lam, tol=1e-12)
    oracle = np.linalg.solve(x.T @ x / n + lam * np.eye(d), x.T @ y / n)
    assert np.abs(theta - oracle).max() <= 1e-8


def test_hessian_quadratic_is_shifted_gram():
    # unit curvature: eigenvalues are the k-fold copies of spec(X'X/n) + lam
    loss = QuadraticLoss(2)
    rng = np.random.default_rng(12)
    n, d, lam = 120, 30, 0.25
    x = rng.standard_normal((n, d))
    theta = rng.standard_normal((d, 2))
    h = assemble_hessian(loss, x, theta, lam)
    eigs = np.sort(np.linalg.eigvalsh(h))
    gram = np.sort(np.linalg.eigvalsh(x.T @ x / n))
    expected = np.sort(np.concatenate([gram, gram]) + lam)
    np.testing.assert_allclose(eigs, expected, atol=1e-10)


def test_hessian_lambda_shift_exact():
    cfg = _cfg(seed=42)
    loss = cfg.make_loss()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((cfg.n, cfg.d))
    th = rng.standard_normal((cfg.d, cfg.k)) * 0.3
    y = loss.onehot(rng.integers(0, 3, size=cfg.n))
    e0 = np.linalg.eigvalsh(assemble_hessian(loss, x, th, 0.0, labels=y))
    e3 = np.linalg.eigvalsh(assemble_hessian(loss, x, th, 0.3, labels=y))
    np.testing.assert_allclose(np.sort(e3), np.sort(e0) + 0.3, atol=1e-13)


def test_hessian_ordering_invariance():
    loss = MultinomialLoss(2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 8))
    th = rng.standard_normal((8, 2)) * 0.5
    y = loss.onehot(rng.integers(0, 3, size=40))
    h1 = assemble_hessian(loss, x, th, 0.05, labels=y, ordering="coordinate")
    h2 = assemble_hessian(loss, x, th, 0.05, labels=y, ordering="sample")
    np.testing.assert_allclose(
        np.sort(np.linalg.eigvalsh(h1)), np.sort(np.linalg.eigvalsh(h2)), atol=1e-12
    )


def test_convexity_certificate_at_minimizer():
    cfg = _cfg(seed=9, lam=0.1)
    m = run_trial(cfg, 0)
    assert m.eigenvalues.min() >= cfg.lam - 1e-8


def test_nonexistence_detection():
    # lam = 0 near-separable: strong signal, alpha close to 1
    cfg = _cfg(n=60, d=50, lam=0.0, r00=50 * R00, seed=31, newton_max_iter=200)
    m = run_trial(cfg, 0)
    assert m.nonexistent
    assert np.isnan(m.train_loss)


def test_existence_at_moderate_alpha():
    cfg = _cfg(n=250, d=50, lam=0.0, r00=R00, seed=13, newton_max_iter=200)
    m = run_trial(cfg, 0)
    assert not m.nonexistent
    assert m.grad_norm <= cfg.newton_tol


def test_aggregate_basics():
    cfg = _cfg(trials=2, seed=88)
    ms = run_experiment(cfg)
    single = aggregate([ms[0]])
    assert single.means["train_loss"] == ms[0].train_loss
    assert single.stds["train_loss"] == 0.0
    dup = aggregate([ms[0], ms[0]])
    assert dup.stds["test_loss"] == 0.0
    both = aggregate(ms)
    assert both.n_trials == 2
    edges, counts = both.histogram
    assert counts.sum() == 2 * cfg.d * cfg.k
    with pytest.raises(ValueError):
        aggregate([])


def test_trial_metrics_fields(tmp_path):
    m = run_trial(_cfg(seed=3), 5)
    assert m.trial == 5
    assert m.est_error >= 0
    assert 0 <= m.class_error <= 1
    assert len(m.eigenvalues) == 50 * 2
    assert m.wall_time > 0


def test_ingest_whitening_property(tmp_path):
    rng = np.random.default_rng(17)
    raw = rng.normal(size=(400, 30))
    labels = rng.integers(0, 3, size=400)
    fpath = tmp_path / "raw.csv"
    lpath = tmp_path / "labels.csv"
    np.savetxt(fpath, raw, delimiter=",")
    np.savetxt(lpath, labels, fmt="%d")
    res = ingest_features(str(fpath), str(lpath), width=20, activation="tanh", seed=5)
    second = res.features.T @ res.features / len(res.features)
    assert np.abs(second - np.eye(20)).max() <= 1e-8
    assert res.r00.shape == (2, 2)
    assert np.linalg.eigvalsh(res.r00).min() > 0
    # downstream comparison runs: the fitted truth reproduces labels decently
    pred = np.concatenate(
        [np.zeros((len(raw), 1)), res.features @ res.theta0], axis=1
    ).argmax(axis=1)
    assert (pred == res.labels).mean() > 0.3  # above chance on random labels is not required; sanity only


def test_ingest_error_diagnostics(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("1.0,2.0\n1.0,oops\n")
    l = tmp_path / "lab.csv"
    l.write_text("0\n1\n")
    with pytest.raises(IngestError, match="bad.csv:2"):
        ingest_features(str(f), str(l), width=2, seed=0)
    f2 = tmp_path / "short.csv"
    f2.write_text("1.0,2.0\n")
    with pytest.raises(IngestError, match="mismatch"):
        ingest_features(str(f2), str(l), width=2, seed=0)
    f3 = tmp_path / "ragged.csv"
    f3.write_text("1.0,2.0\n1.0\n")
    with pytest.raises(IngestError, match="ragged.csv:2"):
        ingest_features(str(f3), str(l), width=2, seed=0)
