"""Critical-point system solver and predicted observables.

The unknowns are parametrized as (K, M, S) with
    R11 = K^2 + M M',   R10 = M R00^{1/2},   K^2 = R / R00,
and the Gaussian pair colored conditionally: g0 = R00^{1/2} z0 is fixed
across iterations (so are the label branches), g = K z1 + M z0.  The solved
equations are the stationarity conditions of
    G(K, M; S) = E[Moreau_{loss(., g0, w)}(g; S)] - Tr(S^{-1} K^2) / (2 alpha)
                 + (lam / 2) Tr(K^2 + M M'),
which coincide with the fixed-point system
    alpha E[grad grad'] = S^{-1} (R/R00) S^{-1}
    E[grad (v, v0)'] + lam (R11, R10) = 0
under the law nu_opt of (prox(g; S), g0, w).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._mat import eig_floor, minvsqrt, msqrt, sym, triu_pack, triu_unpack
from .linmodel import EffectiveNoise, OverlapMatrix
from .prox import prox_batch
from .quadrature import gaussian_rule
from .spectrum import CurvatureMeasure, spectral_density


class SolverError(RuntimeError):
    pass


class IndeterminateError(SolverError):
    """Neither convergence nor certified divergence within the iteration budget."""

    def __init__(self, msg, residual_trace=None, norm_trace=None):
        super().__init__(msg)
        self.residual_trace = residual_trace or []
        self.norm_trace = norm_trace or []


class RankError(SolverError):
    """Singular gradient second moment E[grad grad']."""


@dataclass(frozen=True)
class NuAtoms:
    """Weighted atoms of nu_opt: scores v, teacher scores v0, labels, latents."""

    v: np.ndarray
    v0: np.ndarray
    labels: np.ndarray
    w_latent: np.ndarray
    weights: np.ndarray
    loss: object

    def grad(self):
        return self.loss.grad(self.v, self.labels)

    def grad_second_moment(self):
        g = self.grad()
        return np.einsum("n,ni,nj->ij", self.weights, g, g)

    def mean_v(self):
        return self.weights @ self.v


@dataclass
class AsymptoticSolution:
    r: OverlapMatrix
    s: np.ndarray
    residual1: float
    residual2: float
    quadrature: str
    converged: bool
    diverged: bool
    trace: list = field(default_factory=list)
    k_factor: np.ndarray = None
    m_factor: np.ndarray = None
    alpha: float = None
    lam: float = None


@dataclass
class PredictedObservables:
    train_loss: float
    test_loss: float
    classification_error: float
    estimation_error: float
    spectrum: object = None


def _split_nodes(rule, k, k0, extra):
    z = rule.nodes
    if z.shape[1] != k + k0 + extra:
        raise ValueError(
            f"rule dimension {z.shape[1]} != k + k0 + extra = {k + k0 + extra}"
        )
    return z[:, :k], z[:, k : k + k0], z[:, k + k0 :]


class MomentEngine:
    """Expectations under nu_opt on fixed quadrature nodes with fixed labels."""

    def __init__(self, loss, alpha, lam, r00, rule):
        self.loss = loss
        self.alpha = float(alpha)
        self.lam = float(lam)
        self.r00 = np.atleast_2d(np.asarray(r00, dtype=float))
        self.rule = rule
        self.k, self.k0 = loss.k, loss.k0
        extra = getattr(loss, "extra_dim", 0) if loss.label_kind == "continuous" else 0
        self.z1, self.z0, self.zx = _split_nodes(rule, self.k, self.k0, extra)
        self.g0 = self.z0 @ msqrt(self.r00).T
        if loss.label_kind == "categorical":
            probs = loss.label_probs(self.g0)
            basis = loss.label_basis()
            self.branches = [
                (np.broadcast_to(basis[j], self.g0[:, :1].shape[:1] + (self.k,)).copy(),
                 rule.weights * probs[:, j])
                for j in range(loss.n_labels)
            ]
        else:
            y = loss.labels_from(self.g0, self.zx if extra else None)
            self.branches = [(y, rule.weights.copy())]
        self._warm = [None] * len(self.branches)
        self.passes = 0

    # ---- expectations ------------------------------------------------
    def moments(self, K, M, S, need_jac=False):
        k, k0 = self.k, self.k0
        g = self.z1 @ K.T + self.z0 @ M.T
        sinv = np.linalg.inv(S)
        out = {
            "G2": np.zeros((k, k)), "A1": np.zeros((k, k)), "A0": np.zeros((k, k0)),
            "C1": np.zeros((k, k)), "C0": np.zeros((k, k0)),
            "EM": 0.0, "Eell": 0.0,
        }
        store = [] if need_jac else None
        for j, (y, wj) in enumerate(self.branches):
            v = prox_batch(self.loss, g, S, y, x0=self._warm[j])
            self._warm[j] = v
            gl = self.loss.grad(v, y)
            wgl = gl * wj[:, None]
            out["G2"] += wgl.T @ gl
            out["A1"] += wgl.T @ self.z1
            out["A0"] += wgl.T @ self.z0
            out["C1"] += wgl.T @ v
            out["C0"] += wgl.T @ self.g0
            d = v - g
            out["EM"] += float(
                wj @ (0.5 * np.einsum("ni,ij,nj->n", d, sinv, d) + self.loss.value(v, y))
            )
            out["Eell"] += float(wj @ self.loss.value(v, y))
            if need_jac:
                h = self.loss.hess(v, y)
                jac = np.linalg.inv(
                    np.eye(k)[None] + np.einsum("ij,njl->nil", S, h)
                )
                store.append((wj, gl, h, jac))
        self.passes += 1
        if need_jac:
            out["store"] = store
        return out

    def atoms(self, K, M, S):
        """Materialize nu_opt atoms and the induced curvature measure."""
        g = self.z1 @ K.T + self.z0 @ M.T
        vs, ys, ws, hs = [], [], [], []
        for j, (y, wj) in enumerate(self.branches):
            v = prox_batch(self.loss, g, S, y, x0=self._warm[j])
            vs.append(v)
            ys.append(y)
            ws.append(wj)
            hs.append(self.loss.hess(v, y))
        v = np.concatenate(vs)
        y = np.concatenate(ys)
        w = np.concatenate(ws)
        h = np.concatenate(hs)
        v0 = np.tile(self.g0, (len(self.branches), 1))
        # latent coordinate: the label-branch cdf position (categorical) or noise
        if self.loss.label_kind == "categorical":
            lat = np.concatenate(
                [np.full(len(self.g0), j, dtype=float) for j in range(len(self.branches))]
            )
        else:
            lat = np.zeros(len(v))
        nu = NuAtoms(v=v, v0=v0, labels=y, w_latent=lat, weights=w, loss=self.loss)
        total = w.sum()
        cm = CurvatureMeasure(atoms=h, weights=w / total)
        return nu, cm

    # ---- residuals -----------------------------------------------------
    def equation_residuals(self, K, M, S, mom):
        """(residual1, residual2) in the fixed-point form of the system."""
        alpha, lam = self.alpha, self.lam
        k2 = K @ K
        lhs = alpha * mom["G2"]
        rhs = np.linalg.solve(S, np.linalg.solve(S, k2).T)
        r1 = np.linalg.norm(lhs - rhs) / (1.0 + np.linalg.norm(lhs))
        r11 = k2 + M @ M.T
        r10 = M @ msqrt(self.r00)
        c = np.hstack([mom["C1"], mom["C0"]])
        rr = np.hstack([r11, r10])
        r2 = np.linalg.norm(c + lam * rr) / (1.0 + lam * np.linalg.norm(rr))
        return float(r1), float(r2)

    def stationarity(self, K, M, S, mom):
        """Gradient of G(K, M; S) in (sym K, M, sym S)."""
        alpha, lam = self.alpha, self.lam
        sinv = np.linalg.inv(S)
        sk = sinv @ K
        rk = sym(mom["A1"]) - sym(sk) / alpha + lam * K
        rm = mom["A0"] + lam * M
        rs = -0.5 * mom["G2"] + 0.5 * (sinv @ K @ K @ sinv) / alpha
        return rk, rm, rs

    def pack(self, rk, rm, rs):
        return np.concatenate([triu_pack(rk), rm.ravel(), triu_pack(rs)])

    # ---- Newton on the stationarity system ------------------------------
    def _jacobian_columns(self, K, M, S, mom):
        alpha, lam = self.alpha, self.lam
        k, k0 = self.k, self.k0
        sinv = np.linalg.inv(S)
        k2 = K @ K
        iu = np.triu_indices(k)
        cols = []
        dirs = []
        for i, j in zip(*iu):
            e = np.zeros((k, k))
            e[i, j] = e[j, i] = 1.0
            dirs.append(("K", e))
        for i in range(k):
            for j in range(k0):
                e = np.zeros((k, k0))
                e[i, j] = 1.0
                dirs.append(("M", e))
        for i, j in zip(*iu):
            e = np.zeros((k, k))
            e[i, j] = e[j, i] = 1.0
            dirs.append(("S", e))
        for kind, e in dirs:
            da1 = np.zeros((k, k))
            da0 = np.zeros((k, k0))
            dg2 = np.zeros((k, k))
            for (wj, gl, h, jac), _ in zip(mom["store"], self.branches):
                if kind == "K":
                    dg = self.z1 @ e.T
                elif kind == "M":
                    dg = self.z0 @ e.T
                else:
                    dg = -gl @ e.T
                dx = np.einsum("nil,nl->ni", jac, dg)
                dgl = np.einsum("nil,nl->ni", h, dx)
                wdgl = dgl * wj[:, None]
                da1 += wdgl.T @ self.z1
                da0 += wdgl.T @ self.z0
                dg2 += wdgl.T @ gl + gl.T @ (dgl * wj[:, None])
            if kind == "K":
                drk = sym(da1) - sym(sinv @ e) / alpha + lam * e
                drm = da0
                drs = -0.5 * dg2 + 0.5 * (sinv @ (e @ K + K @ e) @ sinv) / alpha
            elif kind == "M":
                drk = sym(da1)
                drm = da0 + lam * e
                drs = -0.5 * dg2
            else:
                dsinv = -sinv @ e @ sinv
                drk = sym(da1) - sym(dsinv @ K) / alpha
                drm = da0
                drs = -0.5 * dg2 + 0.5 * (dsinv @ k2 @ sinv + sinv @ k2 @ dsinv) / alpha
            cols.append(self.pack(drk, drm, drs))
        return np.stack(cols, axis=1)

    def _unpack_step(self, step):
        k, k0 = self.k, self.k0
        nk = k * (k + 1) // 2
        dk = triu_unpack(step[:nk], k)
        dm = step[nk : nk + k * k0].reshape(k, k0)
        ds = triu_unpack(step[nk + k * k0 :], k)
        return dk, dm, ds

    def newton_solve(self, K, M, S, tol=1e-11, max_iter=50):
        """Damped Newton on the packed stationarity system. Returns success flag."""
        fn_prev = np.inf
        for _ in range(max_iter):
            mom = self.moments(K, M, S, need_jac=True)
            f = self.pack(*self.stationarity(K, M, S, mom))
            fn = np.linalg.norm(f)
            if fn < tol:
                return K, M, S, fn, True
            jac = self._jacobian_columns(K, M, S, mom)
            try:
                step = np.linalg.solve(jac, -f)
            except np.linalg.LinAlgError:
                return K, M, S, fn, False
            dk, dm, ds = self._unpack_step(step)
            damp = 1.0
            ok = False
            for _ in range(40):
                kn, mn, sn = K + damp * dk, M + damp * dm, S + damp * ds
                if np.linalg.eigvalsh(sn).min() > 0:
                    momn = self.moments(kn, mn, sn)
                    f2 = self.pack(*self.stationarity(kn, mn, sn, momn))
                    if np.linalg.norm(f2) < fn:
                        ok = True
                        break
                damp *= 0.5
            if not ok:
                return K, M, S, fn, fn < 10 * tol
            K, M, S = kn, mn, sn
            fn_prev = fn
        mom = self.moments(K, M, S)
        fn = np.linalg.norm(self.pack(*self.stationarity(K, M, S, mom)))
        return K, M, S, fn, fn < tol

    # ---- relaxed alternating scheme (warm-up at moderate lambda) ----------
    def alternating(self, K, M, S, tol=1e-3, max_iter=200, relax=0.5):
        """Relaxed fixed-point updates with explosion-guarded step control."""
        r00 = self.r00
        r00h = msqrt(r00)
        r00ih = minvsqrt(r00)
        alpha, lam = self.alpha, self.lam
        best = (K, M, S)
        best_res = np.inf
        for _ in range(max_iter):
            mom = self.moments(K, M, S)
            r1, r2 = self.equation_residuals(K, M, S, mom)
            res = max(r1, r2)
            if not np.isfinite(res) or res > 10 * max(best_res, 1.0):
                K, M, S = best
                relax = max(relax / 2, 1 / 64)
                mom = self.moments(K, M, S)
                r1, r2 = self.equation_residuals(K, M, S, mom)
                res = max(r1, r2)
            if res < best_res:
                best, best_res = (K, M, S), res
            if res < tol:
                break
            r11 = K @ K + M @ M.T
            r10 = M @ r00h
            r11n = sym(-mom["C1"] / lam)
            r10n = -mom["C0"] / lam
            r11 = (1 - relax) * r11 + relax * r11n
            r10 = (1 - relax) * r10 + relax * r10n
            k2 = eig_floor(sym(r11 - r10 @ np.linalg.solve(r00, r10.T)), 1e-12)
            kh = msqrt(k2)
            sn = kh @ minvsqrt(kh @ (alpha * eig_floor(sym(mom["G2"]), 1e-14)) @ kh) @ kh
            S = (1 - relax) * S + relax * sn
            K, M = kh, r10 @ r00ih
        return best


def _default_init(loss, r00, alpha):
    k, k0 = loss.k, loss.k0
    if k == k0:
        K = msqrt(0.5 * r00)
        M = 0.5 * msqrt(r00)
    else:
        K = 0.7 * np.eye(k)
        M = 0.3 * np.eye(k, k0)
    return K, M, np.eye(k) / alpha


def _to_solution(engine, K, M, S, converged, diverged, trace):
    mom = engine.moments(K, M, S)
    r1, r2 = engine.equation_residuals(K, M, S, mom)
    r11 = K @ K + M @ M.T
    r10 = M @ msqrt(engine.r00)
    r = OverlapMatrix(r11=sym(r11), r10=r10, r00=engine.r00)
    return AsymptoticSolution(
        r=r, s=S.copy(), residual1=r1, residual2=r2,
        quadrature=f"{engine.rule.kind}[{engine.rule.count}]",
        converged=converged, diverged=diverged, trace=trace,
        k_factor=K.copy(), m_factor=M.copy(), alpha=engine.alpha, lam=engine.lam,
    )


def default_rule(loss, nodes_per_dim=24, count=2**16, seed=0, kind="auto"):
    extra = getattr(loss, "extra_dim", 0) if loss.label_kind == "continuous" else 0
    dim = loss.k + loss.k0 + extra
    return gaussian_rule(dim, kind=kind, nodes_per_dim=nodes_per_dim, count=count, seed=seed)


def _newton_continue(loss, alpha, lam_from, lam_to, r00, rule, K, M, S, warm=None,
                     hist=None, tr00=None, opts=None):
    """Follow the solution path from lam_from down to lam_to by halving steps.

    Each level is fully converged by the stationarity Newton, warm-started
    from the previous level; a failed step is bisected in log-lambda.
    Returns (K, M, S, warm, hist, status) where status is "reached" or
    "diverged"; hist collects (lambda, Tr R11) along the path.
    """
    opts = opts or {}
    hist = hist if hist is not None else []
    lam = lam_from
    while lam > lam_to * (1 + 1e-12):
        lam_next = max(lam / 2, lam_to)
        for attempt in range(8):
            eng = MomentEngine(loss, alpha, lam_next, r00, rule)
            if warm is not None:
                eng._warm = warm
            kn, mn, sn, fn, ok = eng.newton_solve(K.copy(), M.copy(), S.copy(), tol=1e-11)
            if ok:
                break
            lam_next = np.sqrt(lam * lam_next)  # bisect in log-lambda
        else:
            raise IndeterminateError(
                f"path Newton failed near lam={lam_next:.3e}: |F|={fn:.2e}",
                norm_trace=[h[1] for h in hist],
            )
        K, M, S, lam = kn, mn, sn, lam_next
        warm = eng._warm
        tr = float(np.trace(K @ K + M @ M.T))
        hist.append((lam, tr))
        if tr00 is not None:
            if tr > 1e6 * tr00:
                return K, M, S, warm, hist, "diverged"
            if (tr > opts.get("trace_factor", 100.0) * tr00 and len(hist) >= 6):
                lams = np.array([h[0] for h in hist[-5:]])
                trs = np.array([h[1] for h in hist[-5:]])
                slope = -np.polyfit(np.log(lams), np.log(trs), 1)[0]
                if slope > opts.get("slope_threshold", 0.2):
                    return K, M, S, warm, hist, "diverged"
            if (abs(hist[-1][1] - hist[-2][1]) < opts.get("saturation", 5e-3) * tr
                    and lam < 1e-4 and len(hist) >= 2):
                return K, M, S, warm, hist, "saturated"
            if lam < opts.get("lam_floor", 1e-14):
                raise IndeterminateError(
                    "lambda floor reached without saturation or divergence certificate",
                    norm_trace=[h[1] for h in hist],
                )
    return K, M, S, warm, hist, "reached"


def _anchored_solve(loss, alpha, lam, r00, rule, opts):
    """Converge at lambda = lam via a contraction-friendly anchor and continuation."""
    init = opts.get("init")
    if init is not None:
        engine = MomentEngine(loss, alpha, lam, r00, rule)
        K, M, S = (np.array(a, dtype=float) for a in init)
        K, M, S, fn, ok = engine.newton_solve(K, M, S, tol=1e-11)
        if ok:
            return engine, K, M, S
    lam_anchor = max(lam, opts.get("anchor", 0.5))
    engine = MomentEngine(loss, alpha, lam_anchor, r00, rule)
    K, M, S = _default_init(loss, r00, alpha)
    K, M, S = engine.alternating(K, M, S, tol=opts.get("newton_switch", 1e-2),
                                 max_iter=opts.get("max_iter", 200),
                                 relax=opts.get("relax", 0.5))
    K, M, S, fn, ok = engine.newton_solve(K, M, S, tol=1e-11)
    if not ok:
        raise IndeterminateError(f"anchor solve failed at lam={lam_anchor}: |F|={fn:.2e}")
    if lam_anchor > lam:
        K, M, S, warm, _, _ = _newton_continue(
            loss, alpha, lam_anchor, lam, r00, rule, K, M, S, warm=engine._warm)
        engine = MomentEngine(loss, alpha, lam, r00, rule)
        engine._warm = warm
    return engine, K, M, S


def solve_critical_point(loss, alpha, lam, r00, rule=None, options=None):
    """Solve the coupled (R, S) system; detect divergence for lam = 0.

    Returns an AsymptoticSolution.  For lam > 0 the relaxed fixed-point
    updates warm up a contraction-friendly anchor lambda and the stationarity
    Newton continues the solution path down to the target.  For lam = 0 the
    path is followed toward zero: a saturating overlap trace certifies
    existence (finished by a Newton solve at lam = 0 exactly), while
    non-saturating growth of Tr(R11) past trace_factor * Tr(R00) with a
    certified power-law slope reports divergence (Tr(R11) > 1e6 Tr(R00)
    outright does too).
    """
    opts = dict(tol=None, max_iter=200, relax=0.5, newton_switch=1e-2,
                anchor=0.5, trace_factor=100.0, slope_threshold=0.2,
                saturation=5e-3, lam_floor=1e-14, init=None, path_rule=None,
                path_anchor=0.1)
    opts.update(options or {})
    r00 = np.atleast_2d(np.asarray(r00, dtype=float))
    if rule is None:
        rule = default_rule(loss)
    tol = opts["tol"]
    if tol is None:
        tol = 1e-7 if rule.kind == "hermite" else 3.0 * rule.standard_error_scale()

    if lam > 0:
        engine, K, M, S = _anchored_solve(loss, alpha, lam, r00, rule, opts)
        sol = _to_solution(engine, K, M, S, converged=True, diverged=False, trace=[])
        sol.converged = sol.residual1 <= tol and sol.residual2 <= tol
        if not sol.converged:
            raise IndeterminateError(
                f"no convergence at lam={lam}: residuals "
                f"({sol.residual1:.2e}, {sol.residual2:.2e}) above {tol:.2e}",
                residual_trace=[sol.residual1, sol.residual2],
            )
        return sol

    if alpha <= 1:
        raise ValueError("lam = 0 requires alpha > 1")
    return _solve_lam0(loss, alpha, r00, rule, opts, tol)


def _solve_lam0(loss, alpha, r00, rule, opts, tol):
    """Path-following toward lambda = 0; certify existence or divergence."""
    path_rule = opts["path_rule"]
    if path_rule is None:
        extra = getattr(loss, "extra_dim", 0) if loss.label_kind == "continuous" else 0
        dim = loss.k + loss.k0 + extra
        path_rule = rule if rule.kind != "hermite" else gaussian_rule(dim, "hermite", 14)
    lam_a = opts["path_anchor"]
    engine, K, M, S = _anchored_solve(loss, alpha, lam_a, r00, path_rule, opts)
    tr00 = float(np.trace(r00))
    hist = [(lam_a, float(np.trace(K @ K + M @ M.T)))]
    K, M, S, warm, hist, status = _newton_continue(
        loss, alpha, lam_a, 0.0, r00, path_rule, K, M, S,
        warm=engine._warm, hist=hist, tr00=tr00, opts=opts)
    if status == "diverged":
        return _diverged_solution(loss, alpha, r00, rule, K, M, S, hist)
    # saturated: polish at lam = 0 on the requested rule
    engine0 = MomentEngine(loss, alpha, 0.0, r00, rule)
    K, M, S, fn, ok = engine0.newton_solve(K, M, S, tol=min(1e-11, tol))
    sol = _to_solution(engine0, K, M, S, converged=True, diverged=False,
                       trace=[h[1] for h in hist])
    sol.converged = ok and sol.residual1 <= tol and sol.residual2 <= tol
    if not sol.converged:
        raise IndeterminateError(
            f"lam=0 polish failed: residuals ({sol.residual1:.2e}, {sol.residual2:.2e})",
            norm_trace=[h[1] for h in hist],
        )
    return sol


def _diverged_solution(loss, alpha, r00, rule, K, M, S, hist):
    engine = MomentEngine(loss, alpha, 0.0, r00, rule if rule.kind != "hermite"
                          else gaussian_rule(rule.dim, "hermite", 14))
    sol = _to_solution(engine, K, M, S, converged=False, diverged=True,
                       trace=[h[1] for h in hist])
    return sol


def law_nu_opt(loss, r, s, rule):
    """Atoms of nu_opt and the induced curvature measure at (r, s).

    r is an OverlapMatrix (or (r11, r10, r00) blocks); s the effective noise.
    """
    if not isinstance(r, OverlapMatrix):
        r = OverlapMatrix(*r)
    s = s.s if isinstance(s, EffectiveNoise) else np.atleast_2d(s)
    engine = MomentEngine(loss, alpha=1.0, lam=0.0, r00=r.r00, rule=rule)
    K = msqrt(eig_floor(r.schur(), 0.0))
    M = r.r10 @ minvsqrt(r.r00)
    return engine.atoms(K, M, s)


# ---------------------------------------------------------------------------
# saddle formulation
# ---------------------------------------------------------------------------
def _inner_max_s(engine, K, M, S, tol, max_iter=400, relax=0.5):
    """Maximize G over S at fixed (K, M) via the concave stationarity map."""
    alpha = engine.alpha
    k2 = K @ K
    kh = msqrt(eig_floor(k2, 1e-13))
    res = np.inf
    for _ in range(max_iter):
        mom = engine.moments(K, M, S)
        if np.abs(mom["G2"]).max() < 1e-13:
            # degenerate loss (zero gradients a.s.): sup over S is at infinity
            big = 1e10 * (1.0 + np.trace(k2))
            S = big * np.eye(engine.k)
            mom = engine.moments(K, M, S)
            return S, mom, 0.0
        rhs = np.linalg.solve(S, np.linalg.solve(S, k2).T)
        res = np.linalg.norm(alpha * mom["G2"] - rhs) / (1.0 + np.linalg.norm(alpha * mom["G2"]))
        if res < tol:
            break
        sn = kh @ minvsqrt(kh @ (alpha * eig_floor(sym(mom["G2"]), 1e-14)) @ kh) @ kh
        S = (1 - relax) * S + relax * sn
    return S, mom, res


def saddle_value(engine, K, M, S, mom):
    """G(K, M; S) = E[Moreau] - Tr(S^{-1} K^2)/(2 alpha) + lam Tr(K^2 + MM')/2."""
    k2 = K @ K
    return float(
        mom["EM"] - np.trace(np.linalg.solve(S, k2)) / (2 * engine.alpha)
        + 0.5 * engine.lam * (np.trace(k2) + np.trace(M @ M.T))
    )


def saddle_solve(loss, alpha, lam, r00, rule=None, init=None, gtol=1e-9,
                 max_outer=300, trace_stop=None):
    """Min-max solve of the variational risk formulation.

    Outer L-BFGS over (sym K, M) of sup_S G(K, M; S); the inner maximization
    uses the concave stationarity map with warm starts, and the result is
    polished by Newton on the first-order system.  Returns
    (K, M, S, risk_value, info).  A monotone overlap-trace blowup past
    ``trace_stop`` raises IndeterminateError carrying the norm trace
    (divergence of the minimizing sequence).
    """
    r00 = np.atleast_2d(np.asarray(r00, dtype=float))
    if rule is None:
        rule = default_rule(loss)
    engine = MomentEngine(loss, alpha, lam, r00, rule)
    k, k0 = loss.k, loss.k0
    if init is not None:
        K, M, S = (np.array(a, dtype=float) for a in init)
    else:
        K, M, S = _default_init(loss, r00, alpha)
    state = {"S": S, "gnorm": 1.0}
    iu = np.triu_indices(k)
    norm_trace = []

    def pack(Km, Mm):
        return np.concatenate([Km[iu], Mm.ravel()])

    def unpack(p):
        Km = triu_unpack(p[: len(iu[0])], k)
        Mm = p[len(iu[0]) :].reshape(k, k0)
        return Km, Mm

    def fg(p):
        Km, Mm = unpack(p)
        inner_tol = float(np.clip(1e-2 * state["gnorm"], 1e-11, 1e-4))
        Sm, mom, _ = _inner_max_s(engine, Km, Mm, state["S"], inner_tol)
        state["S"] = Sm
        val = saddle_value(engine, Km, Mm, Sm, mom)
        sinv = np.linalg.inv(Sm)
        gk = sym(mom["A1"]) - sym(sinv @ Km) / alpha + lam * Km
        gm = mom["A0"] + lam * Mm
        gkp = np.array([gk[i, j] * (1.0 if i == j else 2.0) for i, j in zip(*iu)])
        grad = np.concatenate([gkp, gm.ravel()])
        state["gnorm"] = np.linalg.norm(grad)
        tr = float(np.trace(Km @ Km + Mm @ Mm.T))
        norm_trace.append(tr)
        if trace_stop is not None and tr > trace_stop:
            raise IndeterminateError("overlap trace exceeded stop threshold",
                                     norm_trace=norm_trace)
        return val, grad

    res = minimize(fg, pack(K, M), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=max_outer, ftol=1e-16, gtol=gtol))
    K, M = unpack(res.x)
    S = state["S"]
    # polish on the full first-order system
    K, M, S, fn, ok = engine.newton_solve(K, M, S, tol=1e-11)
    mom = engine.moments(K, M, S)
    val = saddle_value(engine, K, M, S, mom)
    info = dict(outer_iterations=int(res.nit), stationarity=float(fn),
                converged=bool(ok), norm_trace=norm_trace)
    return K, M, S, val, info


# ---------------------------------------------------------------------------
# M functional and its closed-form maximizer
# ---------------------------------------------------------------------------
def m_functional(nu_atoms, r, s, alpha):
    """M(S; nu, R): zero at the solution, strictly negative elsewhere.

    M = log det(E[gg'] S^2 K^{-2}) / (2 alpha) - E[g' S K^{-2} S g] / 2
        + k log(alpha e) / (2 alpha),  with K^2 = R / R00 and g = grad loss.
    """
    if not isinstance(r, OverlapMatrix):
        r = OverlapMatrix(*r)
    s = np.atleast_2d(s)
    k = s.shape[0]
    g2 = nu_atoms.grad_second_moment()
    eigs = np.linalg.eigvalsh(g2)
    if eigs.min() <= 1e-13 * max(1.0, eigs.max()):
        raise RankError("singular gradient second moment E[grad grad']")
    k2 = r.schur()
    _, ld_g2 = np.linalg.slogdet(g2)
    _, ld_s = np.linalg.slogdet(s)
    _, ld_k2 = np.linalg.slogdet(k2)
    quad = np.trace(s @ np.linalg.solve(k2, s) @ g2)
    return float(
        (ld_g2 + 2 * ld_s - ld_k2) / (2 * alpha) - 0.5 * quad
        + k * (np.log(alpha) + 1.0) / (2 * alpha)
    )


def s_opt_closed_form(nu_atoms, r, alpha):
    """Unique maximizer of M: (1/sqrt(alpha)) K (K^{-1} E[gg']^{-1} K^{-1})^{1/2} K."""
    if not isinstance(r, OverlapMatrix):
        r = OverlapMatrix(*r)
    g2 = nu_atoms.grad_second_moment()
    eigs = np.linalg.eigvalsh(g2)
    if eigs.min() <= 1e-13 * max(1.0, eigs.max()):
        raise RankError("singular gradient second moment E[grad grad']")
    kh = msqrt(r.schur())
    return kh @ minvsqrt(kh @ (alpha * g2) @ kh) @ kh


# ---------------------------------------------------------------------------
# predicted observables
# ---------------------------------------------------------------------------
def _gauss_legendre_01(n=64):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


_GL_X, _GL_W = _gauss_legendre_01()


def bvn_cdf(h, k, rho):
    """P(X <= h, Y <= k) for standard bivariate normal, Gauss-Legendre on rho."""
    from scipy.special import ndtr

    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    base = ndtr(h) * ndtr(k)
    if abs(rho) < 1e-15:
        return base
    r = rho * _GL_X
    hh = h[..., None]
    kk = k[..., None]
    integrand = np.exp(
        -(hh**2 - 2 * r * hh * kk + kk**2) / (2 * (1 - r**2))
    ) / np.sqrt(1 - r**2)
    return base + rho * (integrand * _GL_W).sum(axis=-1) / (2 * np.pi)


def _classification_error_multinomial(r, rule_g0=None, mc_draws=10**6, seed=1):
    """P(argmax(0, v_1..v_k) != sampled label) under (v, g0) ~ N(0, R).

    Exact orthant probabilities (univariate/bivariate normal) for k <= 2,
    seeded Monte Carlo otherwise.
    """
    from scipy.special import ndtr

    from .linmodel import MultinomialLoss

    k, k0 = r.k, r.k0
    loss = MultinomialLoss(k)
    a = r.conditional_mean_map()
    k2 = r.schur()
    if k <= 2:
        rule = rule_g0 or gaussian_rule(k0, "hermite", 40)
        g0 = rule.nodes @ msqrt(r.r00).T
        probs = loss.label_probs(g0)
        mu = g0 @ a.T
        if k == 1:
            s11 = np.sqrt(k2[0, 0])
            p_pred1 = 1.0 - ndtr(-mu[:, 0] / s11)
            correct = probs[:, 0] * (1.0 - p_pred1) + probs[:, 1] * p_pred1
        else:
            # pred = j iff L_j (g_1, g_2) <= 0 componentwise (ties measure zero)
            maps = [np.array([[1.0, 0.0], [0.0, 1.0]]),
                    np.array([[-1.0, 0.0], [-1.0, 1.0]]),
                    np.array([[0.0, -1.0], [1.0, -1.0]])]
            correct = np.zeros(len(g0))
            for j, lm in enumerate(maps):
                mj = mu @ lm.T
                cj = lm @ k2 @ lm.T
                s1 = np.sqrt(cj[0, 0])
                s2 = np.sqrt(cj[1, 1])
                rho = cj[0, 1] / (s1 * s2)
                pj = bvn_cdf(-mj[:, 0] / s1, -mj[:, 1] / s2, rho)
                correct += probs[:, j] * pj
        return float(1.0 - rule.weights @ correct)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((mc_draws, k + k0))
    g = z @ msqrt(r.assemble()).T
    v, g0 = g[:, :k], g[:, k:]
    probs = loss.label_probs(g0)
    scores = np.concatenate([np.zeros((mc_draws, 1)), v], axis=1)
    pred = scores.argmax(axis=1)
    correct = probs[np.arange(mc_draws), pred]
    return float(1.0 - correct.mean())


def predicted_observables(loss, sol, alpha, lam, rule=None):
    """Asymptotic train/test log-loss, classification error, estimation error.

    Losses are the bare per-sample values (the figures' "log loss"), without
    the ridge penalty: train = E[loss] under nu_opt, test = population loss
    at the solution overlap.  The penalty cancels in the generalization gap,
    which therefore stays nonnegative.
    """
    if not sol.converged:
        raise SolverError("observables require a converged solution")
    if rule is None:
        rule = default_rule(loss)
    r = sol.r
    engine = MomentEngine(loss, alpha, lam, r.r00, rule)
    K = sol.k_factor if sol.k_factor is not None else msqrt(r.schur())
    M = sol.m_factor if sol.m_factor is not None else r.r10 @ minvsqrt(r.r00)
    mom = engine.moments(K, M, sol.s)
    train = mom["Eell"]
    # population loss: scores g ~ N(0, R11) jointly with g0, labels from g0
    g = engine.z1 @ K.T + engine.z0 @ M.T
    test = 0.0
    for y, wj in engine.branches:
        test += float(wj @ loss.value(g, y))
    if loss.label_kind == "categorical":
        cerr = _classification_error_multinomial(r)
    else:
        cerr = float("nan")
    est = r.estimation_error() if r.k == r.k0 else _projected_estimation_error(r)
    return PredictedObservables(
        train_loss=train, test_loss=test, classification_error=cerr,
        estimation_error=est,
    )


def _projected_estimation_error(r):
    # k != k0: compare against the natural embedding (documented convention)
    m = min(r.k, r.k0)
    return float(
        np.trace(r.r11) - 2 * np.trace(r.r10[:m, :m]) + np.trace(r.r00)
    )


def predicted_spectrum(loss, sol, alpha, lam, grid, gamma=1e-3, rule=None,
                       compress_resolution=0.002, chunk=64):
    """Limiting Hessian spectral density from the converged solution."""
    if not sol.converged:
        raise SolverError("spectrum requires a converged solution")
    if rule is None:
        rule = default_rule(loss)
    nu, cm = law_nu_opt(loss, sol.r, sol.s, rule)
    if compress_resolution:
        cm = cm.compress(compress_resolution)
    return spectral_density(cm, alpha, lam=lam, grid=grid, gamma=gamma, chunk=chunk)


def evaluate_residuals(loss, sol, alpha, lam, rule):
    """Equation residuals of a given solution under an independent rule."""
    engine = MomentEngine(loss, alpha, lam, sol.r.r00, rule)
    K = sol.k_factor if sol.k_factor is not None else msqrt(sol.r.schur())
    M = sol.m_factor if sol.m_factor is not None else sol.r.r10 @ minvsqrt(sol.r.r00)
    mom = engine.moments(K, M, sol.s)
    return engine.equation_residuals(K, M, sol.s, mom)
