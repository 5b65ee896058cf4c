"""Gaussian expectations in the reduced space R^n.

Tensor Gauss-Hermite rules for n <= 3 and a fixed-seed Monte Carlo rule
above. Half-space indicators are evaluated in closed form through the normal
CDF, never through polynomial quadrature.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtr

from .errors import SingularCovarianceError

LAMBDA_FLOOR = 1e-12
_MC_FALLBACK_SIZE = 20_000
_DEFAULT_ORDER = {1: 40, 2: 20, 3: 10}


@dataclass(frozen=True)
class GaussQuadRule:
    """Nodes ``zeta`` (shape ``(M, n)``) and weights summing to 1 for N(0, I_n)."""

    dim: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, dim: int, order: Optional[int] = None) -> "GaussQuadRule":
        if dim > 3:
            from .rng import path_generator
            m = order or _MC_FALLBACK_SIZE
            z = path_generator(0, 0, 0).standard_normal((m, dim))
            return cls(dim, m, z, np.full(m, 1.0 / m))
        m = order or _DEFAULT_ORDER[dim]
        x, w = hermegauss(m)
        w = w / w.sum()
        if dim == 1:
            return cls(1, m, x[:, None], w)
        nodes = np.array(list(itertools.product(x, repeat=dim)))
        weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
        return cls(dim, m, nodes, weights)


_RULES = {}


def default_rule(dim: int, order: Optional[int] = None) -> GaussQuadRule:
    key = (dim, order)
    if key not in _RULES:
        _RULES[key] = GaussQuadRule.build(dim, order)
    return _RULES[key]


def sym_sqrt(Q: np.ndarray, floor: float = LAMBDA_FLOOR
             ) -> Tuple[np.ndarray, Optional[np.ndarray], float]:
    """Symmetric square root, inverse square root (None below floor) and lambda_min."""
    Q = 0.5 * (Q + Q.T)
    lam, V = np.linalg.eigh(Q)
    lam_min = float(lam[0])
    root = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
    if lam_min < floor:
        return root, None, lam_min
    inv_root = (V / np.sqrt(lam)) @ V.T
    return root, inv_root, lam_min


def _normal_pdf(r):
    return np.exp(-0.5 * r * r) / np.sqrt(2.0 * np.pi)


def gaussian_mean(phibar, y: np.ndarray, Q: np.ndarray, rule: Optional[GaussQuadRule] = None,
                  floor: float = LAMBDA_FLOOR) -> np.ndarray:
    """``int phibar(z + y) N(0, Q)(dz)`` for ``y`` of shape ``(..., n)``."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    if phibar.halfspace is not None:
        c, thr = phibar.halfspace
        s2 = float(c @ Q @ c)
        if s2 < floor:
            raise SingularCovarianceError("degenerate covariance for a discontinuous observable")
        return ndtr((y @ c - thr) / np.sqrt(s2))
    root, _, lam_min = sym_sqrt(Q, floor)
    if lam_min < floor:
        if not phibar.continuous:
            raise SingularCovarianceError("degenerate covariance for a discontinuous observable")
        # point mass in the degenerate directions, quadrature in the others
        if np.max(np.abs(root)) < np.sqrt(floor):
            return phibar(y)
    rule = rule or default_rule(n)
    z = rule.nodes @ root.T
    vals = phibar(y[..., None, :] + z)
    return vals @ rule.weights


def gaussian_gradient(phibar, y: np.ndarray, Q: np.ndarray,
                      rule: Optional[GaussQuadRule] = None,
                      floor: float = LAMBDA_FLOOR) -> np.ndarray:
    """``grad_y int phibar(z + y) N(0, Q)(dz)`` via the Gaussian kernel.

    Equals ``E[phibar(Q^{1/2} zeta + y) Q^{-1/2} zeta]``; shape ``(..., n)``.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    if phibar.halfspace is not None:
        c, thr = phibar.halfspace
        s2 = float(c @ Q @ c)
        if s2 < floor:
            raise SingularCovarianceError("degenerate covariance in the gradient formula")
        s = np.sqrt(s2)
        return (_normal_pdf((y @ c - thr) / s) / s)[..., None] * c
    root, inv_root, _ = sym_sqrt(Q, floor)
    if inv_root is None:
        raise SingularCovarianceError("degenerate covariance in the gradient formula")
    rule = rule or default_rule(n)
    z = rule.nodes @ root.T
    vals = phibar(y[..., None, :] + z)
    kern = rule.nodes @ inv_root.T
    return np.einsum("...m,m,mi->...i", vals, rule.weights, kern)
