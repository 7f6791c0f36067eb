"""Small symmetric-matrix helpers shared across modules."""

import numpy as np


def sym(a):
    return 0.5 * (a + a.swapaxes(-1, -2))


def msqrt(a):
    """Symmetric PSD square root (eigenvalues clipped at 0)."""
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def minvsqrt(a, floor=0.0):
    """Inverse symmetric square root of a PD matrix."""
    w, v = np.linalg.eigh(a)
    if floor:
        w = np.maximum(w, floor)
    return (v / np.sqrt(w)) @ v.T


def eig_floor(a, floor):
    """Project a symmetric matrix onto {eigenvalues >= floor}."""
    w, v = np.linalg.eigh(a)
    return (v * np.maximum(w, floor)) @ v.T


def is_symmetric(a, rtol=1e-12):
    return np.abs(a - a.T).max() <= rtol * (1.0 + np.abs(a).max())


def min_eig(a):
    return float(np.linalg.eigvalsh(a)[0])


def inv22(a):
    """Batched closed-form inverse for (..., 2, 2) matrices."""
    d = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 0, 1] = -a[..., 0, 1]
    out[..., 1, 0] = -a[..., 1, 0]
    out[..., 1, 1] = a[..., 0, 0]
    return out / d[..., None, None]


def binv(a):
    """Batched matrix inverse; closed forms for k=1,2, LAPACK otherwise."""
    if a.shape[-1] == 1:
        return 1.0 / a
    if a.shape[-1] == 2:
        return inv22(a)
    return np.linalg.inv(a)


def triu_pack(a):
    """Upper-triangle entries of a symmetric k x k matrix, row-major."""
    k = a.shape[0]
    iu = np.triu_indices(k)
    return a[iu]


def triu_unpack(vec, k):
    """Inverse of triu_pack."""
    a = np.zeros((k, k))
    iu = np.triu_indices(k)
    a[iu] = vec
    return a + a.T - np.diag(np.diag(a))
