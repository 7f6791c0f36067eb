"""Loss families, label models, and the overlap-matrix type.

Losses are exposed in batched form: ``value``, ``grad`` and ``hess`` accept
row-stacked score matrices ``V`` of shape ``(n, k)`` together with the label
array ``Y`` produced by the family's label model.  The scalar latent ``w``
used in the (v, v0, w) formulation is a uniform(0,1) draw consumed by
``sample_label``; losses never read it directly.
"""

from dataclasses import dataclass, field

import numpy as np

from ._mat import is_symmetric, min_eig, msqrt, sym


def logsumexp_aug(v):
    """log(1 + sum_j exp(v_j)) along the last axis, overflow-safe.

    The implicit extra coordinate 0 represents the reference class.  Shifted
    exponents are clamped at -700 to keep every intermediate a normal float
    (denormal exp is an order of magnitude slower and contributes < 1e-300).
    """
    v = np.asarray(v, dtype=float)
    m = np.maximum(np.max(v, axis=-1), 0.0)
    return m + np.log(
        np.exp(np.maximum(-m, -700.0))
        + np.exp(np.maximum(v - m[..., None], -700.0)).sum(axis=-1)
    )


def softmax_aug(v):
    """Class probabilities (p_1, ..., p_k) with reference class p_0 implicit."""
    v = np.asarray(v, dtype=float)
    m = np.maximum(np.max(v, axis=-1, keepdims=True), 0.0)
    e = np.exp(np.maximum(v - m, -700.0))
    return e / (np.exp(np.maximum(-m, -700.0)) + e.sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class OverlapMatrix:
    """Block second-moment matrix R = [[R11, R10], [R01, R00]].

    R11 is the k x k estimator block, R00 the fixed k0 x k0 truth block,
    R10 the k x k0 cross block.  The assembled matrix must be symmetric
    PSD with R00 strictly positive definite.
    """

    r11: np.ndarray
    r10: np.ndarray
    r00: np.ndarray

    def __post_init__(self):
        r11 = np.atleast_2d(np.asarray(self.r11, dtype=float))
        r10 = np.atleast_2d(np.asarray(self.r10, dtype=float))
        r00 = np.atleast_2d(np.asarray(self.r00, dtype=float))
        object.__setattr__(self, "r11", r11)
        object.__setattr__(self, "r10", r10)
        object.__setattr__(self, "r00", r00)
        k, k0 = r10.shape
        if r11.shape != (k, k) or r00.shape != (k0, k0):
            raise ValueError(
                f"inconsistent blocks: r11 {r11.shape}, r10 {r10.shape}, r00 {r00.shape}"
            )
        if not (is_symmetric(r11) and is_symmetric(r00)):
            raise ValueError("r11 and r00 must be symmetric")
        if min_eig(r00) <= 0:
            raise ValueError("r00 must be positive definite")
        if min_eig(self.assemble()) < -1e-10 * (1 + np.abs(r11).max()):
            raise ValueError("assembled overlap matrix is not PSD")

    @property
    def k(self):
        return self.r10.shape[0]

    @property
    def k0(self):
        return self.r10.shape[1]

    def assemble(self):
        return np.block([[self.r11, self.r10], [self.r10.T, self.r00]])

    def schur(self):
        """R / R00 = R11 - R10 R00^{-1} R01 (the conditional covariance)."""
        return sym(self.r11 - self.r10 @ np.linalg.solve(self.r00, self.r10.T))

    def conditional_mean_map(self):
        """A with E[t | t0] = A t0, i.e. A = R10 R00^{-1}."""
        return np.linalg.solve(self.r00, self.r10.T).T

    def estimation_error(self):
        """E ||t - t0||^2 under any law with this second moment (k = k0)."""
        if self.k != self.k0:
            raise ValueError("estimation error requires k == k0")
        return float(np.trace(self.r11) - 2.0 * np.trace(self.r10) + np.trace(self.r00))


@dataclass(frozen=True)
class EffectiveNoise:
    """Symmetric positive definite k x k matrix weighting the proximal map."""

    s: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s, dtype=float))
        object.__setattr__(self, "s", s)
        if not is_symmetric(s):
            raise ValueError("effective noise matrix must be symmetric")
        if min_eig(s) <= 0:
            raise ValueError("effective noise matrix must be positive definite")

    @property
    def k(self):
        return self.s.shape[0]


@dataclass(frozen=True)
class MultinomialLoss:
    """Cross-entropy loss for (k+1)-class multinomial regression.

    Labels are one-hot in R^k with the reference class encoded as the zero
    vector (e_0 = 0).  The cumulant is a(v) = log(1 + sum_j exp v_j), so
    value(v, y) = a(v) - v.y, grad = p(v) - y, hess = Diag(p) - p p'.
    Requires k0 == k: the teacher probabilities are p(theta0' x).
    """

    k: int
    label_kind: str = field(default="categorical", init=False)
    convex: bool = field(default=True, init=False)

    @property
    def k0(self):
        return self.k

    @property
    def n_labels(self):
        return self.k + 1

    def label_basis(self):
        """Rows: label vectors e_0 = 0, e_1, ..., e_k."""
        return np.vstack([np.zeros(self.k), np.eye(self.k)])

    def label_probs(self, v0):
        """(n, k+1) class probabilities (p_0, p_1, ..., p_k) at teacher scores v0."""
        p = softmax_aug(v0)
        return np.concatenate([1.0 - p.sum(axis=-1, keepdims=True), p], axis=-1)

    def sample_label(self, v0, u):
        """Inverse-CDF label draw: class index in {0, ..., k}, deterministic in (v0, u)."""
        v0 = np.atleast_2d(v0)
        cdf = np.cumsum(self.label_probs(v0), axis=-1)
        idx = (np.asarray(u)[..., None] >= cdf).sum(axis=-1)
        return np.minimum(idx, self.k)

    def onehot(self, idx):
        return self.label_basis()[np.asarray(idx, dtype=int)]

    def value(self, v, y):
        v = np.atleast_2d(v)
        return logsumexp_aug(v) - np.einsum("...i,...i->...", v, y)

    def grad(self, v, y):
        return softmax_aug(v) - y

    def hess(self, v, y=None):
        # independent of the label
        p = softmax_aug(np.atleast_2d(v))
        k = self.k
        return p[..., :, None] * np.eye(k) - p[..., :, None] * p[..., None, :]

    # (v, v0, w) form: the latent w selects the label via its inverse CDF
    def value_vw(self, v, v0, w):
        return self.value(v, self.onehot(self.sample_label(v0, w)))

    def grad_vw(self, v, v0, w):
        return self.grad(v, self.onehot(self.sample_label(v0, w)))

    def hess_vw(self, v, v0, w):
        return self.hess(v)


@dataclass(frozen=True)
class QuadraticLoss:
    """Gaussian teacher-matching loss value(v, y) = ||v - y||^2 / 2.

    The label is y = v0 + sigma * z with z standard normal (sigma = 0 gives
    the noiseless teacher).  The noise enters through extra quadrature or
    simulation dimensions, not through the scalar latent.
    """

    k: int
    sigma: float = 0.0
    label_kind: str = field(default="continuous", init=False)
    convex: bool = field(default=True, init=False)

    @property
    def k0(self):
        return self.k

    @property
    def extra_dim(self):
        return self.k if self.sigma > 0 else 0

    def labels_from(self, v0, z_extra=None):
        v0 = np.atleast_2d(v0)
        if self.sigma == 0.0:
            return v0.copy()
        return v0 + self.sigma * z_extra

    def value(self, v, y):
        d = np.atleast_2d(v) - y
        return 0.5 * np.einsum("...i,...i->...", d, d)

    def grad(self, v, y):
        return np.atleast_2d(v) - y

    def hess(self, v, y=None):
        v = np.atleast_2d(v)
        return np.broadcast_to(np.eye(self.k), v.shape[:-1] + (self.k, self.k)).copy()


@dataclass(frozen=True)
class ExpFamilySpec:
    """Exponential family P(dy|eta) = exp(eta.tau(y) - a(eta)) nu0(dy).

    ``a_value``/``a_grad``/``a_hess`` evaluate the cumulant batched over rows;
    ``tau`` maps raw labels to sufficient statistics; ``sampler(v0, rng)``
    draws raw labels given natural parameters v0.  ``a1 <= eigs(a_hess) <= a2``
    are the curvature bounds assumed for the family.
    """

    k: int
    a_value: callable
    a_grad: callable
    a_hess: callable
    tau: callable
    sampler: callable
    a1: float = 0.0
    a2: float = np.inf
    label_kind: str = field(default="continuous", init=False)
    convex: bool = field(default=True, init=False)

    @property
    def k0(self):
        return self.k

    def value(self, v, y):
        # y here is already the sufficient statistic tau(raw label)
        return self.a_value(v) - np.einsum("...i,...i->...", np.atleast_2d(v), y)

    def grad(self, v, y):
        return self.a_grad(v) - y

    def hess(self, v, y=None):
        return self.a_hess(v)

    def curvature_in_bounds(self, v, slack=1e-10):
        h = self.a_hess(np.atleast_2d(v))
        eigs = np.linalg.eigvalsh(h)
        return bool(eigs.min() >= self.a1 - slack and eigs.max() <= self.a2 + slack)


def gaussian_family(k, noise=1.0):
    """Gaussian exponential family with identity sufficient statistic.

    a(eta) = ||eta||^2 / 2, tau(y) = y, y | eta ~ N(eta, noise^2 I).  The
    induced loss ||v||^2/2 - v.y matches QuadraticLoss up to a v-free term.
    """

    def a_value(v):
        v = np.atleast_2d(v)
        return 0.5 * np.einsum("...i,...i->...", v, v)

    def a_grad(v):
        return np.atleast_2d(v).copy()

    def a_hess(v):
        v = np.atleast_2d(v)
        return np.broadcast_to(np.eye(k), v.shape[:-1] + (k, k)).copy()

    def sampler(v0, rng):
        v0 = np.atleast_2d(v0)
        return v0 + noise * rng.standard_normal(v0.shape)

    return ExpFamilySpec(k=k, a_value=a_value, a_grad=a_grad, a_hess=a_hess,
                         tau=lambda y: y, sampler=sampler, a1=1.0, a2=1.0)


def sample_label(loss, v0, u):
    """Module-level inverse-CDF label draw for categorical families."""
    if loss.label_kind != "categorical":
        raise ValueError("sample_label applies to categorical label families")
    return loss.sample_label(v0, u)


def build_theta0(r00, d, seed):
    """Ground-truth parameter matrix with theta0' theta0 = r00 exactly.

    Draws a seeded random d x k0 orthonormal frame Q (QR with the sign fix
    that makes the factorization unique) and returns Q r00^{1/2}.
    """
    r00 = np.atleast_2d(np.asarray(r00, dtype=float))
    k0 = r00.shape[0]
    if d < k0:
        raise ValueError(f"need d >= k0, got d={d}, k0={k0}")
    if not is_symmetric(r00) or min_eig(r00) <= 0:
        raise ValueError("r00 must be symmetric positive definite")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, k0)))
    q = q * np.sign(np.diag(r))
    return q @ msqrt(r00)
