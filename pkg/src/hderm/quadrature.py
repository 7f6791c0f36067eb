"""Quadrature rules for standard Gaussian expectations.

Tensor Gauss-Hermite (pruned product weights) for low dimension, scrambled
Sobol or plain Monte Carlo for higher dimension.  Weights are nonnegative
and sum to one; nodes target N(0, I_dim).
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats.qmc import Sobol


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights for E_{z ~ N(0, I_dim)} f(z) ~= sum_i w_i f(z_i)."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str
    seed: int | None = None

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def count(self):
        return self.nodes.shape[0]

    def second_moment_error(self):
        m2 = np.einsum("n,ni,nj->ij", self.weights, self.nodes, self.nodes)
        return float(np.abs(m2 - np.eye(self.dim)).max())

    def standard_error_scale(self):
        """1/sqrt(count) for Monte Carlo style rules, 0 for deterministic ones."""
        if self.kind == "hermite":
            return 0.0
        return 1.0 / np.sqrt(self.count)


def hermite_rule(dim, nodes_per_dim=24, prune=1e-19):
    """Tensor Gauss-Hermite rule for N(0, I_dim), product weights pruned.

    Pruning drops product weights below ``prune``; the removed mass is
    bounded by count * prune which keeps the weight sum within 1e-12 of 1.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes_per_dim)
    w = w / w.sum()
    grids = np.meshgrid(*(dim * (x,)), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(nodes.shape[0])
    for g in np.meshgrid(*(dim * (w,)), indexing="ij"):
        weights = weights * g.ravel()
    keep = weights >= prune
    return QuadratureRule(nodes=nodes[keep], weights=weights[keep], kind="hermite")


def sobol_rule(dim, count=2**16, seed=0):
    """Scrambled Sobol points mapped through the normal quantile."""
    eng = Sobol(d=dim, scramble=True, seed=seed)
    u = eng.random(count)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    nodes = _norm.ppf(u)
    weights = np.full(count, 1.0 / count)
    return QuadratureRule(nodes=nodes, weights=weights, kind="quasi-random", seed=seed)


def montecarlo_rule(dim, count, seed=0):
    rng = np.random.default_rng(seed)
    nodes = rng.standard_normal((count, dim))
    weights = np.full(count, 1.0 / count)
    return QuadratureRule(nodes=nodes, weights=weights, kind="pseudo-random", seed=seed)


def gaussian_rule(dim, kind="auto", nodes_per_dim=24, count=2**16, seed=0):
    """Default rule selection: tensor Hermite up to dim 4, Sobol beyond."""
    if kind == "auto":
        kind = "hermite" if dim <= 4 else "sobol"
    if kind == "hermite":
        return hermite_rule(dim, nodes_per_dim)
    if kind == "sobol":
        return sobol_rule(dim, count, seed)
    if kind in ("montecarlo", "mc"):
        return montecarlo_rule(dim, count, seed)
    raise ValueError(f"unknown quadrature kind: {kind!r}")
