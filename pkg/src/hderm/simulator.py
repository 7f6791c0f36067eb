"""Finite-n experiments: Gaussian designs, Newton ERM, empirical observables.

Each trial owns derived RNG streams (design / ground truth / labels / test),
so identical (config, seed) reproduce bit-identical metrics regardless of
how trials are scheduled across threads.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._mat import minvsqrt, msqrt
from .linmodel import MultinomialLoss, QuadraticLoss, build_theta0

NONEXISTENCE_NORM = 1e3  # ||theta||_F beyond which a lam = 0 fit is declared escaping


class TrialError(RuntimeError):
    def __init__(self, msg, iterate_trace=None):
        super().__init__(msg)
        self.iterate_trace = iterate_trace or []


class IngestError(ValueError):
    pass


def loss_from_tag(tag, k, sigma=0.0):
    if tag == "multinomial":
        return MultinomialLoss(k)
    if tag == "quadratic":
        return QuadraticLoss(k, sigma=sigma)
    raise ValueError(f"unknown loss family tag: {tag!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    d: int
    k: int
    k0: int
    lam: float
    r00: np.ndarray
    loss: str = "multinomial"
    trials: int = 1
    seed: int = 0
    newton_tol: float = 1e-8
    newton_max_iter: int = 100
    test_size: int = 0  # 0 -> max(10^4, 10 n)
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "r00", np.atleast_2d(np.asarray(self.r00, dtype=float)))
        if self.n < 1 or self.d < 1:
            raise ValueError("need n >= 1 and d >= 1")
        if self.r00.shape != (self.k0, self.k0):
            raise ValueError(f"r00 shape {self.r00.shape} != ({self.k0}, {self.k0})")

    @property
    def alpha(self):
        return self.n / self.d

    @property
    def effective_test_size(self):
        return self.test_size if self.test_size > 0 else max(10**4, 10 * self.n)

    def make_loss(self):
        return loss_from_tag(self.loss, self.k, self.noise_sigma)


@dataclass
class TrialMetrics:
    trial: int
    train_loss: float
    test_loss: float
    class_error: float
    est_error: float
    grad_norm: float
    eigenvalues: np.ndarray
    newton_iters: int
    wall_time: float
    nonexistent: bool = False


def _rngs(cfg, trial_index):
    root = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(trial_index,))
    lanes = root.spawn(4)
    return tuple(np.random.default_rng(l) for l in lanes)  # design, truth, labels, test


def _draw_labels(loss, v0, rng):
    if loss.label_kind == "categorical":
        u = rng.uniform(size=len(v0))
        return loss.onehot(loss.sample_label(v0, u))
    if getattr(loss, "sigma", 0.0):
        return loss.labels_from(v0, rng.standard_normal(v0.shape))
    return loss.labels_from(v0)


def assemble_hessian(loss, x, theta, lam, labels=None, ordering="coordinate"):
    """dk x dk Hessian of the regularized empirical risk at theta.

    "coordinate" ordering corresponds to vec-by-columns of theta: block (j, j')
    is X' Diag(W[:, j, j']) X / n.  "sample" interleaves output coordinates
    fastest; both have the same spectrum.
    """
    n, d = x.shape
    k = loss.k
    v = x @ theta
    w = loss.hess(v, labels)
    h = np.zeros((d * k, d * k))
    for a in range(k):
        for b in range(a, k):
            blk = x.T @ (x * w[:, a, b][:, None]) / n
            h[a * d : (a + 1) * d, b * d : (b + 1) * d] = blk
            if b > a:
                h[b * d : (b + 1) * d, a * d : (a + 1) * d] = blk
    h[np.arange(d * k), np.arange(d * k)] += lam
    if ordering == "coordinate":
        return h
    if ordering == "sample":
        perm = np.arange(d * k).reshape(k, d).T.ravel()
        return h[np.ix_(perm, perm)]
    raise ValueError(f"unknown ordering {ordering!r}")


def _objective(loss, v, y, theta, lam):
    return float(loss.value(v, y).mean() + 0.5 * lam * np.sum(theta**2))


def _escapes_along_ray(loss, x, y, theta):
    """Nonexistence certificate: the loss decreases monotonically along
    t -> t * theta until ||t theta||_F exceeds NONEXISTENCE_NORM."""
    norm = np.linalg.norm(theta)
    if norm == 0:
        return False
    ts = np.geomspace(1.0, max(NONEXISTENCE_NORM / norm, 1.0 + 1e-9), 24)
    vals = [float(loss.value(t * (x @ theta), y).mean()) for t in ts]
    return all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def newton_erm(loss, x, y, lam, tol=1e-8, max_iter=100, theta0=None):
    """Damped Newton minimizer of the regularized empirical risk.

    Returns (theta, grad_norm, iterations, nonexistent).  For lam = 0 a fit
    is reported as nonexistent when either an iterate escapes past
    NONEXISTENCE_NORM with a decreasing objective, or the gradient stalls at
    a near-zero loss whose scaling ray certifies escape to infinity (the
    gradient of a separable fit underflows long before the norm threshold).
    """
    n, d = x.shape
    k = loss.k
    theta = np.zeros((d, k)) if theta0 is None else np.array(theta0, dtype=float)
    obj_trace = []
    gn = np.inf
    it = 0
    for it in range(max_iter):
        v = x @ theta
        g = x.T @ loss.grad(v, y) / n + lam * theta
        gn = float(np.linalg.norm(g))
        obj_trace.append(_objective(loss, v, y, theta, lam))
        if gn <= tol:
            if (lam == 0 and obj_trace[-1] < 1e-3
                    and _escapes_along_ray(loss, x, y, theta)):
                return theta, gn, it, True
            return theta, gn, it, False
        if lam == 0 and np.linalg.norm(theta) > NONEXISTENCE_NORM:
            decreasing = all(b <= a + 1e-12 for a, b in zip(obj_trace, obj_trace[1:]))
            if decreasing:
                return theta, gn, it, True
        h = assemble_hessian(loss, x, theta, lam, labels=y)
        gvec = g.T.reshape(-1)  # vec-by-columns, matching "coordinate" ordering
        try:
            cond_guard = np.linalg.cond(h) if d * k <= 400 else None
        except np.linalg.LinAlgError:
            cond_guard = np.inf
        if cond_guard is not None and cond_guard > 1e12:
            step = gvec / max(np.abs(h).max(), 1.0)  # gradient fallback
        else:
            try:
                step = np.linalg.solve(h, gvec)
            except np.linalg.LinAlgError:
                step = gvec / max(np.abs(h).max(), 1.0)
        step = step.reshape(k, d).T
        t = 1.0
        f0 = obj_trace[-1]
        slope = float(np.sum(g * step))
        for _ in range(60):
            cand = theta - t * step
            if _objective(loss, x @ cand, y, cand, lam) <= f0 - 1e-4 * t * slope:
                break
            # roundoff floor: Armijo is meaningless once the objective is flat,
            # accept on sufficient gradient contraction instead
            g_cand = x.T @ loss.grad(x @ cand, y) / n + lam * cand
            if np.linalg.norm(g_cand) <= 0.9 * gn:
                break
            t *= 0.5
        else:
            raise TrialError(f"Newton line search failed at iteration {it}",
                             iterate_trace=obj_trace)
        theta = theta - t * step
    v = x @ theta
    gn = float(np.linalg.norm(x.T @ loss.grad(v, y) / n + lam * theta))
    if gn <= tol:
        if (lam == 0 and float(loss.value(v, y).mean()) < 1e-3
                and _escapes_along_ray(loss, x, y, theta)):
            return theta, gn, it, True
        return theta, gn, it, False
    if lam == 0 and (np.linalg.norm(theta) > NONEXISTENCE_NORM
                     or _escapes_along_ray(loss, x, y, theta)):
        return theta, gn, it, True
    raise TrialError(
        f"Newton did not reach tol {tol:.1e}: grad norm {gn:.3e} after {max_iter} iterations",
        iterate_trace=obj_trace,
    )


def run_trial(cfg: ExperimentConfig, trial_index: int) -> TrialMetrics:
    """One synthetic experiment: design, fit, metrics on a fresh test set."""
    t_start = time.perf_counter()
    loss = cfg.make_loss()
    rng_x, rng_t, rng_l, rng_test = _rngs(cfg, trial_index)
    x = rng_x.standard_normal((cfg.n, cfg.d))
    theta0 = build_theta0(cfg.r00, cfg.d, rng_t.integers(2**63))
    v0 = x @ theta0
    y = _draw_labels(loss, v0, rng_l)
    theta, gn, iters, nonexistent = newton_erm(
        loss, x, y, cfg.lam, tol=cfg.newton_tol, max_iter=cfg.newton_max_iter
    )
    if nonexistent:
        return TrialMetrics(
            trial=trial_index, train_loss=float("nan"), test_loss=float("nan"),
            class_error=float("nan"), est_error=float("nan"), grad_norm=gn,
            eigenvalues=np.full(cfg.d * cfg.k, np.nan), newton_iters=iters,
            wall_time=time.perf_counter() - t_start, nonexistent=True,
        )
    v = x @ theta
    train = float(loss.value(v, y).mean())  # bare log loss, no ridge term
    m = cfg.effective_test_size
    xt = rng_test.standard_normal((m, cfg.d))
    v0t = xt @ theta0
    yt = _draw_labels(loss, v0t, rng_test)
    vt = xt @ theta
    test = float(loss.value(vt, yt).mean())
    if loss.label_kind == "categorical":
        scores = np.concatenate([np.zeros((m, 1)), vt], axis=1)
        pred = scores.argmax(axis=1)
        truth = np.concatenate([np.zeros((m, 1)), yt], axis=1).argmax(axis=1)
        cerr = float((pred != truth).mean())
    else:
        cerr = float("nan")
    est = float(np.sum((theta - theta0) ** 2))
    eigs = hessian_esd(cfg, theta, (x, y))
    return TrialMetrics(
        trial=trial_index, train_loss=train, test_loss=test, class_error=cerr,
        est_error=est, grad_norm=gn, eigenvalues=eigs, newton_iters=iters,
        wall_time=time.perf_counter() - t_start,
    )


def hessian_esd(cfg, theta_hat, data):
    """Sorted eigenvalues of the dk x dk empirical-risk Hessian at theta_hat."""
    x, y = data
    loss = cfg.make_loss()
    h = assemble_hessian(loss, x, theta_hat, cfg.lam, labels=y)
    return np.sort(np.linalg.eigvalsh(h))


def run_experiment(cfg: ExperimentConfig, threads=1):
    """All trials of a config; deterministic order regardless of thread count."""
    indices = list(range(cfg.trials))
    if threads <= 1:
        return [run_trial(cfg, i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda i: run_trial(cfg, i), indices))
    return results


@dataclass
class AggregateResult:
    means: dict
    stds: dict
    histogram: tuple  # (bin_edges, counts) pooled over trials
    n_trials: int
    n_nonexistent: int


def aggregate(metrics, bin_width=None):
    """Per-field mean/std over trials and a pooled eigenvalue histogram.

    Trials reporting nonexistence are excluded from the moment fields but
    counted in ``n_nonexistent``.  Input order does not matter: trials are
    sorted by index before reduction.
    """
    if not metrics:
        raise ValueError("aggregate requires at least one trial")
    metrics = sorted(metrics, key=lambda m: m.trial)
    ok = [m for m in metrics if not m.nonexistent]
    fields = ["train_loss", "test_loss", "class_error", "est_error", "grad_norm",
              "newton_iters", "wall_time"]
    means, stds = {}, {}
    for f in fields:
        vals = np.array([getattr(m, f) for m in ok], dtype=float)
        means[f] = float(vals.mean()) if len(vals) else float("nan")
        stds[f] = float(vals.std()) if len(vals) else float("nan")
    pooled = (np.concatenate([m.eigenvalues for m in ok])
              if ok else np.array([]))
    if len(pooled):
        if bin_width is None:
            iqr = np.subtract(*np.percentile(pooled, [75, 25]))
            bin_width = 2 * iqr / len(pooled) ** (1 / 3) if iqr > 0 else 0.01
        lo, hi = pooled.min(), pooled.max() + bin_width
        edges = np.arange(lo, hi + bin_width, bin_width)
        counts, edges = np.histogram(pooled, bins=edges)
    else:
        edges, counts = np.array([0.0, 1.0]), np.array([0])
    return AggregateResult(
        means=means, stds=stds, histogram=(edges, counts),
        n_trials=len(metrics), n_nonexistent=len(metrics) - len(ok),
    )


# ---------------------------------------------------------------------------
# random-features ingestion (whitened one-layer features from raw data)
# ---------------------------------------------------------------------------
_ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda t: np.maximum(t, 0.0),
    "identity": lambda t: t,
}


@dataclass
class IngestResult:
    features: np.ndarray
    labels: np.ndarray
    theta0: np.ndarray
    r00: np.ndarray


def _parse_csv_rows(path):
    rows = []
    width = None
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise IngestError(f"{path}:{ln}: unparsable row ({exc})") from exc
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise IngestError(
                    f"{path}:{ln}: expected {width} columns, got {len(vals)}"
                )
            rows.append(vals)
    if not rows:
        raise IngestError(f"{path}: no data rows")
    return np.asarray(rows, dtype=float)


def ingest_features(path, labels_path, width, activation="tanh", seed=0,
                    center=False, fit_lam=1e-8):
    """Random-features pipeline: standardize, random layer, whiten, fit truth.

    Rows of the raw CSV are standardized individually, passed through a seeded
    random layer W with N(0, 1/d0) entries and the chosen activation, then
    whitened with the inverse symmetric square root of the empirical second
    moment (uncentered, matching the protocol; ``center=True`` subtracts the
    mean first).  The ground truth is estimated by fitting multinomial
    regression on the full set, and r00 = theta0' theta0.
    """
    if activation not in _ACTIVATIONS:
        raise IngestError(f"unknown activation {activation!r}")
    raw = _parse_csv_rows(path)
    labels = []
    with open(labels_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError as exc:
                raise IngestError(f"{labels_path}:{ln}: unparsable label") from exc
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(raw):
        raise IngestError(
            f"row count mismatch: {len(raw)} feature rows vs {len(labels)} labels"
        )
    mu = raw.mean(axis=1, keepdims=True)
    sd = raw.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    z = (raw - mu) / sd
    d0 = z.shape[1]
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((width, d0)) / np.sqrt(d0)
    xbar = _ACTIVATIONS[activation](z @ w.T)
    if center:
        xbar = xbar - xbar.mean(axis=0, keepdims=True)
    second = xbar.T @ xbar / len(xbar)
    x = xbar @ minvsqrt(second, floor=1e-12).T
    n_classes = int(labels.max()) + 1
    if labels.min() < 0:
        raise IngestError("labels must be nonnegative class indices")
    k = n_classes - 1
    loss = MultinomialLoss(k)
    y = loss.onehot(labels)
    theta0, _, _, _ = newton_erm(loss, x, y, fit_lam, tol=1e-8, max_iter=200)
    return IngestResult(features=x, labels=labels, theta0=theta0,
                        r00=theta0.T @ theta0)
