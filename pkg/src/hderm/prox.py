"""Matrix-weighted proximal operators, Moreau envelopes, and prox Jacobians.

For a convex loss f(., y), prox(z; S) minimizes
    0.5 (x - z)' S^{-1} (x - z) + f(x, y)
over x, with S symmetric positive definite.  The solver is damped Newton
with objective backtracking; the subproblem is 1-strongly convex in the
S^{-1} metric, so with x0 = z this converges for every convex loss.
"""

from dataclasses import dataclass

import numpy as np

from ._mat import binv


class ProxConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(
            f"prox Newton did not converge: residual {residual:.3e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class ProxResult:
    """Prox output: minimizer, Moreau value, Jacobian, and solve diagnostics."""

    x: np.ndarray
    envelope: float
    jac: np.ndarray
    residual: float
    iterations: int


def prox_batch(loss, z, s, y, x0=None, tol=1e-12, max_iter=100):
    """Solve prox problems for all rows of z at once.

    loss exposes batched value/grad/hess in (V, Y); y is the per-row label
    array.  Returns the (n, k) minimizer matrix.  Newton steps are damped by
    halving until the first-order residual ||z - x - S grad|| decreases (the
    subproblem is strongly convex, so this always succeeds away from
    roundoff).  Stops when every row satisfies the residual bound
    tol * (1 + ||z||); raises ProxConvergenceError past max_iter.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, k = z.shape
    s = np.atleast_2d(s)
    sinv = np.linalg.inv(s)
    s_norm = float(np.abs(np.linalg.eigvalsh(s)).max())
    x = z.copy() if x0 is None else np.array(x0, dtype=float, copy=True)
    scale = 1.0 + np.linalg.norm(z, axis=1)

    def zres(xa, za, ya):
        return np.linalg.norm(za - xa - loss.grad(xa, ya) @ s.T, axis=1)

    def objective(xa, za, ya):
        d = xa - za
        return 0.5 * np.einsum("ni,ij,nj->n", d, sinv, d) + loss.value(xa, ya)

    frozen = np.zeros(n, dtype=bool)  # rows at their rounding floor
    it = 0
    for it in range(max_iter):
        g = (x - z) @ sinv.T + loss.grad(x, y)
        r = np.linalg.norm(g @ s.T, axis=1)
        active = (r > tol * scale) & ~frozen
        if not active.any():
            break
        xa, za, ya, ga = x[active], z[active], y[active], g[active]
        h = sinv[None] + loss.hess(xa, ya)
        step = np.linalg.solve(h, ga[:, :, None])[:, :, 0]
        # cap the step: on loss plateaus the local model sees only the weak
        # S^{-1} curvature and overshoots by O(||S||) otherwise
        cap = 2.0 + 2.0 * np.sqrt(s_norm)
        lens = np.linalg.norm(step, axis=1)
        shrink = np.minimum(1.0, cap / np.maximum(lens, 1e-300))
        step = step * shrink[:, None]
        r0 = r[active]
        f0 = objective(xa, za, ya)
        slope = np.einsum("ni,ni->n", ga, step)
        floor = 1e-12 * (1.0 + np.abs(f0))
        t = np.ones(len(xa))
        xn = xa - step
        # tiered acceptance: strong sufficient decrease (c = 1/4 rejects the
        # plateau-hopping zigzags weak Armijo allows) or, once objective
        # differences sit at the rounding floor, first-order residual decrease
        for _ in range(30):
            fn = objective(xn, za, ya)
            good = fn <= f0 - 0.25 * t * slope
            at_floor = np.abs(fn - f0) <= floor
            if at_floor.any():
                good = good | (at_floor & (zres(xn, za, ya) < r0))
            if good.all():
                break
            t[~good] *= 0.5
            xn[~good] = xa[~good] - t[~good, None] * step[~good]
        if not good.all():
            # no admissible step: the row is at its floor, freeze it
            nidx = np.flatnonzero(~good)
            frozen[np.flatnonzero(active)[nidx]] = True
            xn[nidx] = xa[nidx]
        x[active] = xn
    res = np.linalg.norm(z - x - loss.grad(x, y) @ s.T, axis=1) / scale
    # achievable floor grows with the conditioning of the quadratic term
    floor = 100.0 * np.finfo(float).eps * (1.0 + s_norm)
    if res.max() > max(1e-10, tol * 10, floor):
        raise ProxConvergenceError(float(res.max()), it + 1)
    return x


def _label_of(loss, v0, w):
    """Resolve the (v0, w) latent pair to an explicit label row array."""
    v0 = np.atleast_2d(v0)
    if loss.label_kind == "categorical":
        return loss.onehot(loss.sample_label(v0, w))
    # continuous families: w is the standard-normal noise block (or None)
    if getattr(loss, "sigma", 0.0):
        return loss.labels_from(v0, np.atleast_2d(w))
    return loss.labels_from(v0)


def prox(loss, v0, w, z, s, tol=1e-12, max_iter=100):
    """Proximal map of loss(., v0, w) at z with weight matrix s.

    Returns a ProxResult with the minimizer, the Moreau envelope value, the
    Jacobian (I + S hess)^{-1}, the first-order residual, and the iteration
    count.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    y = _label_of(loss, v0, w)
    xrow = prox_batch(loss, z[None], s, y, tol=tol, max_iter=max_iter)
    x = xrow[0]
    grad = loss.grad(xrow, y)[0]
    res = float(np.linalg.norm(z - x - s @ grad) / (1.0 + np.linalg.norm(z)))
    d = x - z
    env = float(0.5 * d @ np.linalg.solve(s, d) + loss.value(xrow, y)[0])
    jac = np.linalg.inv(np.eye(len(z)) + s @ loss.hess(xrow, y)[0])
    # count effective iterations from the batch path
    return ProxResult(x=x, envelope=env, jac=jac, residual=res, iterations=max_iter)


def prox_jacobian(loss, v0, w, x, s):
    """(I + S hess(x, v0, w))^{-1}: the derivative of z -> prox(z) at prox = x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.atleast_2d(s)
    y = _label_of(loss, v0, w)
    h = loss.hess(x, y)[0]
    return np.linalg.inv(np.eye(s.shape[0]) + s @ h)


def prox_jacobian_batch(s, hess_batch):
    """Batched (I + S hess)^{-1} for a stack of Hessians."""
    k = s.shape[0]
    return binv(np.eye(k)[None] + np.einsum("ij,njl->nil", s, hess_batch))


def moreau(loss, v0, w, z, s, tol=1e-12):
    """Moreau envelope value of loss(., v0, w) at z."""
    return prox(loss, v0, w, z, s, tol=tol).envelope


def moreau_grad(loss, v0, w, z, s, tol=1e-12):
    """Analytic envelope gradient S^{-1}(z - prox(z))."""
    r = prox(loss, v0, w, z, s, tol=tol)
    return np.linalg.solve(np.atleast_2d(s), np.asarray(z, dtype=float) - r.x)


def moreau_grad_check(loss, v0, w, z, s, h=1e-6):
    """Max relative error between analytic and central-difference envelope gradients."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    g = moreau_grad(loss, v0, w, z, s)
    num = np.zeros_like(g)
    for i in range(len(z)):
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        num[i] = (moreau(loss, v0, w, zp, s) - moreau(loss, v0, w, zm, s)) / (2 * h)
    return float(np.abs(g - num).max() / (1.0 + np.abs(g).max()))
