"""Matrix-valued Stieltjes transform fixed point and spectral densities.

The curvature measure is a finite-atomic law of k x k PSD matrices W.  For
Im(z) > 0 the map
    F_z(s) = ( E[(I + W s)^{-1} W] - z I )^{-1}
has a unique fixed point with F_z(s*) = alpha * s*, Im(s*) > 0, and
x -> Im Tr(alpha s*(x + i gamma)) / (k pi) approximates the limiting
spectral density of the loss Hessian.  Ridge regularization shifts the
density by lambda exactly (free additive convolution with a point mass).
"""

import io
from dataclasses import dataclass, field

import numpy as np

from ._mat import binv, is_symmetric, min_eig, triu_pack, triu_unpack


class StieltjesConvergenceError(RuntimeError):
    def __init__(self, residual, iterations, abscissa=None):
        where = f" at x={abscissa:.6g}" if abscissa is not None else ""
        super().__init__(
            f"Stieltjes iteration stagnated{where}: residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations
        self.abscissa = abscissa


@dataclass(frozen=True)
class CurvatureMeasure:
    """Finite-atomic law of PSD curvature matrices: atoms (n, k, k), weights (n,)."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 2:
            atoms = atoms[None]
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        if len(weights) != len(atoms):
            raise ValueError("atom/weight count mismatch")
        if weights.min() < 0:
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")

    @property
    def k(self):
        return self.atoms.shape[1]

    @property
    def norm_bound(self):
        """Recorded bound on the operator norms of the atoms."""
        return float(np.abs(np.linalg.eigvalsh(self.atoms)).max())

    def min_atom_eig(self):
        return float(np.linalg.eigvalsh(self.atoms).min())

    def compress(self, resolution=0.002):
        """Merge atoms whose entries agree after rounding at ``resolution``.

        Bucket averages are convex combinations, so PSD atoms stay PSD; each
        atom moves by at most resolution/2 per entry.
        """
        n, k, _ = self.atoms.shape
        iu = np.triu_indices(k)
        keys = np.round(self.atoms[:, iu[0], iu[1]] / resolution).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        w2 = np.zeros(len(uniq))
        np.add.at(w2, inv, self.weights)
        flat = np.zeros((len(uniq), k * k))
        for j in range(k * k):
            acc = np.zeros(len(uniq))
            np.add.at(acc, inv, self.weights * self.atoms.reshape(n, -1)[:, j])
            flat[:, j] = acc / np.maximum(w2, 1e-300)
        return CurvatureMeasure(atoms=flat.reshape(len(uniq), k, k), weights=w2)


@dataclass(frozen=True)
class MatrixStieltjes:
    """Solution of the fixed point at one spectral parameter z."""

    z: complex
    s: np.ndarray
    residual: float

    def imag_part(self):
        return 0.5j * (self.s.conj().T - self.s)


@dataclass(frozen=True)
class SpectralDensity:
    """Gridded spectral density with smoothing and mass bookkeeping."""

    grid: np.ndarray
    density: np.ndarray
    gamma: float
    alpha: float
    lam: float
    mass: float = field(default=None)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", dens)
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if dens.min() < 0:
            raise ValueError("density must be nonnegative")
        if self.mass is None:
            object.__setattr__(self, "mass", float(np.trapezoid(dens, grid)))

    def cdf(self):
        inc = np.concatenate(
            [[0.0], np.cumsum(0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid))]
        )
        return inc

    def integrate(self, f, normalize=False):
        """Trapezoid integral of f against the density."""
        vals = f(self.grid) * self.density
        total = float(np.trapezoid(vals, self.grid))
        return total / self.mass if normalize else total

    def to_csv(self, path_or_buf, meta=None):
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            buf = open(path_or_buf, "w")
            close = True
        else:
            buf = path_or_buf
        try:
            if meta:
                buf.write(f"#meta {meta}\n")
            buf.write("x,density,gamma,alpha,lambda,mass\n")
            for x, d in zip(self.grid, self.density):
                buf.write(
                    f"{x!r},{d!r},{self.gamma!r},{self.alpha!r},{self.lam!r},{self.mass!r}\n"
                )
        finally:
            if close:
                buf.close()


def _expect_resolvent(s_batch, cm):
    """E[(I + W s)^{-1} W] for a batch of symmetric complex s. Shape (b, k, k)."""
    k = cm.k
    w, wt = cm.atoms, cm.weights
    if k == 1:
        sv = s_batch[:, 0, 0][:, None]
        wv = w[:, 0, 0][None]
        e = (wv / (1.0 + wv * sv) * wt).sum(axis=1)
        return e.reshape(-1, 1, 1)
    if k == 2:
        s11 = s_batch[:, 0, 0][:, None]
        s12 = s_batch[:, 0, 1][:, None]
        s22 = s_batch[:, 1, 1][:, None]
        w11 = w[:, 0, 0][None]
        w12 = w[:, 0, 1][None]
        w22 = w[:, 1, 1][None]
        t11 = 1.0 + w11 * s11 + w12 * s12
        t12 = w11 * s12 + w12 * s22
        t21 = w12 * s11 + w22 * s12
        t22 = 1.0 + w12 * s12 + w22 * s22
        det = t11 * t22 - t12 * t21
        r11 = (t22 * w11 - t12 * w12) / det
        r12 = (t22 * w12 - t12 * w22) / det
        r22 = (t11 * w22 - t21 * w12) / det
        out = np.empty(s_batch.shape, dtype=complex)
        out[:, 0, 0] = (r11 * wt).sum(axis=1)
        out[:, 0, 1] = (r12 * wt).sum(axis=1)
        out[:, 1, 0] = out[:, 0, 1]
        out[:, 1, 1] = (r22 * wt).sum(axis=1)
        return out
    t = np.eye(k)[None, None] + np.einsum("aij,bjl->bail", w, s_batch)
    return np.einsum("a,bail,alj->bij", wt, binv(t), w)


def f_map(s, z, cm):
    """F_z(s) = (E[(I + W s)^{-1} W] - z I)^{-1} for one (s, z)."""
    s = np.atleast_2d(np.asarray(s, dtype=complex))
    e = _expect_resolvent(s[None], cm)[0]
    m = e - z * np.eye(cm.k)
    if abs(np.linalg.det(m)) == 0.0:
        raise FloatingPointError("singular resolvent in f_map: invalid (s, z)")
    return np.linalg.inv(m)


def _iterate_batch(s_batch, z_batch, cm, alpha, eta, tol, max_iter):
    """Damped iteration s <- (1-eta) s + (eta/alpha) F_z(s) on a batch.

    Converged entries are frozen; returns (states, worst residual, iterations).
    """
    s = s_batch.copy()
    act = np.arange(len(z_batch))
    res_all = np.full(len(z_batch), np.inf)
    it = 0
    for it in range(max_iter):
        f = _expect_resolvent(s[act], cm)
        f = binv(f - z_batch[act][:, None, None] * np.eye(cm.k)[None])
        res = np.abs(f - alpha * s[act]).max(axis=(1, 2)) / (
            alpha * np.abs(s[act]).max(axis=(1, 2))
        )
        s[act] = (1 - eta) * s[act] + (eta / alpha) * f
        res_all[act] = res
        act = act[res >= tol]
        if len(act) == 0:
            break
    return s, float(res_all.max()), it + 1


def solve_stieltjes(z, cm, alpha, s0=None, eta=0.5, tol=1e-10, max_iter=10000):
    """Solve F_z(s) = alpha s with Im(s) > 0 at a single z.

    Default start is (i / (alpha Im z)) I; any s0 with Im(s0) >= 0 works and
    converges to the same solution (the fixed point is unique).
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError("need Im(z) > 0")
    k = cm.k
    if s0 is None:
        s0 = (1j / (alpha * z.imag)) * np.eye(k)
    s = np.asarray(s0, dtype=complex)[None]
    zb = np.array([z])
    s, res, its = _iterate_batch(s, zb, cm, alpha, eta, tol, max_iter)
    if res > tol:
        raise StieltjesConvergenceError(res, its)
    return MatrixStieltjes(z=z, s=s[0], residual=res)


def solve_stieltjes_grid(xs, gamma, cm, alpha, eta=0.5, tol=1e-10,
                         max_iter=10000, chunk=64):
    """Fixed point along a real grid at height gamma, with warm starts.

    The grid is split into contiguous chunks of fixed length ``chunk``; within
    a chunk each point warm-starts from its predecessor, chunk heads start
    from a gamma-continuation of the default initializer.  The chunk layout
    is fixed, so results do not depend on any threading of the chunks.
    Returns the (n, k, k) array of solutions.
    """
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    k = cm.k
    nch = (n + chunk - 1) // chunk
    out = np.empty((n, k, k), dtype=complex)
    states = None
    for pos in range(chunk):
        ids = np.arange(nch)[(np.arange(nch) * chunk + pos) < n]
        if len(ids) == 0:
            break
        idx = ids * chunk + pos
        zb = xs[idx] + 1j * gamma
        if pos == 0:
            g = max(1.0, gamma)
            sb = np.tile((1j / (alpha * g)) * np.eye(k)[None], (len(ids), 1, 1)).astype(complex)
            while g > gamma:
                sb, res, _ = _iterate_batch(sb, xs[idx] + 1j * g, cm, alpha, eta,
                                            max(tol, 1e-9), max_iter)
                g = gamma if g / 2 < gamma else g / 2
            sb, res, its = _iterate_batch(sb, zb, cm, alpha, eta, tol, max_iter)
            states = np.empty((nch, k, k), dtype=complex)
        else:
            sb, res, its = _iterate_batch(states[ids], zb, cm, alpha, eta, tol, max_iter)
        if res > tol:
            raise StieltjesConvergenceError(res, its, abscissa=float(xs[idx[0]]))
        states[ids] = sb
        out[idx] = sb
    return out


def spectral_density(cm, alpha, lam=0.0, grid=None, gamma=1e-3, eta=0.5,
                     tol=1e-10, max_iter=10000, chunk=64):
    """Smoothed limiting spectral density with ridge shift lam.

    density(x) = Im Tr(alpha s*(x - lam + i gamma)) / (k pi); the ridge term
    contributes a point mass at lam under free additive convolution, realized
    as an exact abscissa shift.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    sols = solve_stieltjes_grid(grid - lam, gamma, cm, alpha, eta=eta, tol=tol,
                                max_iter=max_iter, chunk=chunk)
    dens = np.imag(alpha * np.trace(sols, axis1=1, axis2=2)) / (cm.k * np.pi)
    if dens.min() < 0:
        raise FloatingPointError("Herglotz violation: negative density")
    return SpectralDensity(grid=grid, density=dens, gamma=gamma, alpha=alpha, lam=lam)


def marchenko_pastur_density(x, alpha, scale=1.0):
    """Closed-form MP density (aspect 1/alpha) for unit curvature, as an oracle."""
    x = np.asarray(x, dtype=float)
    lo = scale * (1 - np.sqrt(1 / alpha)) ** 2
    hi = scale * (1 + np.sqrt(1 / alpha)) ** 2
    out = np.zeros_like(x)
    inside = (x > lo) & (x < hi)
    xi = x[inside]
    out[inside] = alpha * np.sqrt((hi - xi) * (xi - lo)) / (2 * np.pi * scale * xi)
    return out


def log_potential(q, cm, alpha, lam):
    """K_{-lam}(q) = alpha lam Tr(q) + alpha E[log det(I + W q)] - log det q - k(log alpha + 1)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k = cm.k
    if min_eig(q) <= 0 or not is_symmetric(q):
        raise ValueError("q must be symmetric positive definite")
    t = np.eye(k)[None] + np.einsum("aij,jl->ail", cm.atoms, q)
    e = float(cm.weights @ np.log(np.linalg.det(t)))
    sign, logdet_q = np.linalg.slogdet(q)
    return float(alpha * lam * np.trace(q) + alpha * e - logdet_q - k * (np.log(alpha) + 1.0))


class LogPotentialError(RuntimeError):
    pass


def min_log_potential(cm, alpha, lam, q0=None, tol=1e-12, max_iter=200):
    """Minimize K_{-lam} over symmetric PD q by Newton on the free entries.

    For convex losses (PSD atoms) the stationary point is the global
    minimizer; the value equals k * int log(zeta) d mu_{*,lam} whenever the
    latter is finite.  Returns (min value, argmin).
    """
    k = cm.k
    q = np.eye(k) / (alpha * max(lam, 0.05)) if q0 is None else np.array(q0, dtype=float)
    iu = np.triu_indices(k)
    m = len(iu[0])

    def grad_mat(qc):
        t = np.eye(k)[None] + np.einsum("aij,jl->ail", cm.atoms, qc)
        eta = np.einsum("a,ail,alj->ij", cm.weights, binv(t), cm.atoms)
        return alpha * lam * np.eye(k) + alpha * 0.5 * (eta + eta.T) - np.linalg.inv(qc)

    for _ in range(max_iter):
        g = grad_mat(q)
        gv = triu_pack(g) * np.where(iu[0] == iu[1], 1.0, 2.0)
        if np.abs(gv).max() < tol * (1.0 + alpha * lam):
            return log_potential(q, cm, alpha, lam), q
        qinv = np.linalg.inv(q)
        t = np.eye(k)[None] + np.einsum("aij,jl->ail", cm.atoms, q)
        eta_a = np.einsum("ail,alj->aij", binv(t), cm.atoms)  # (n, k, k)
        hess = np.zeros((m, m))
        basis = []
        for (i, j) in zip(*iu):
            e = np.zeros((k, k))
            e[i, j] = e[j, i] = 1.0
            basis.append(e)
        for a, ea in enumerate(basis):
            ga = qinv @ ea @ qinv
            ha = np.einsum("n,nij,jl,nlm->im", cm.weights, eta_a, ea, eta_a)
            for b, eb in enumerate(basis):
                hess[a, b] = np.trace(eb @ ga) - alpha * np.trace(eb @ ha)
        try:
            step_v = np.linalg.solve(hess, -gv)
        except np.linalg.LinAlgError as exc:
            raise LogPotentialError(f"singular Newton system: {exc}") from exc
        step = triu_unpack(step_v, k)
        damp = 1.0
        f0 = log_potential(q, cm, alpha, lam)
        for _ in range(60):
            qn = q + damp * step
            if min_eig(qn) > 0 and log_potential(qn, cm, alpha, lam) <= f0 + 1e-14 * abs(f0):
                break
            damp *= 0.5
        else:
            raise LogPotentialError("persistent non-PD or non-decreasing Newton step")
        q = qn
    raise LogPotentialError(f"no convergence in {max_iter} Newton iterations")
