"""Reduction maps, observables and reduced drifts.

A :class:`PastFunctional` maps a segment ``x = (x0, x1)`` to
``alpha0 x0 + int x1 dmu`` in R^n. Observables and drifts act on segments only
through this finite-dimensional statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import roots_legendre

from .dynamics import DelayMeasure, Segment, _as_matrix
from .errors import RegimeError, ValidationError

SMOOTHNESS = ("bounded", "lipschitz", "c1")


@dataclass(frozen=True)
class PastFunctional:
    """``x -> alpha0 x0 + int x1(theta) mu(dtheta)``.

    ``regime`` records which nondegeneracy assumption the functional claims:
    "A1" (alpha0 invertible) or "A2" (alpha0 = 0 and an invertible density
    limit at 0). It is validated on construction.
    """

    alpha0: np.ndarray
    tail_measure: DelayMeasure
    regime: Optional[str] = None

    def __post_init__(self):
        n = self.tail_measure.n
        object.__setattr__(self, "alpha0", _as_matrix(self.alpha0, n, "alpha0"))
        if self.tail_measure.has_atom_at_zero():
            raise ValidationError("the tail measure may not charge theta = 0; use alpha0")
        if self.regime not in (None, "A1", "A2"):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.regime == "A1" and abs(np.linalg.det(self.alpha0)) < 1e-12:
            raise RegimeError("regime A1 needs an invertible alpha0")
        if self.regime == "A2":
            if np.any(self.alpha0):
                raise RegimeError("regime A2 needs alpha0 = 0")
            f0 = self.density_limit()
            if abs(np.linalg.det(f0)) < 1e-12:
                raise RegimeError("regime A2 needs an invertible density limit at 0")

    @property
    def n(self) -> int:
        return self.tail_measure.n

    @property
    def d(self) -> float:
        return self.tail_measure.d

    @classmethod
    def head_projection(cls, n: int, d: float) -> "PastFunctional":
        return cls(np.eye(n), DelayMeasure.zero(d, n), "A1")

    def cesaro_mean(self, s: float) -> np.ndarray:
        """``s^{-1} int_{-s}^0 f`` for the density ``f`` of the tail measure."""
        x, w = roots_legendre(16)
        theta = -0.5 * s * (1.0 - x)
        return np.einsum("j,jab->ab", 0.5 * w, self.tail_measure.density_at(theta))

    def density_limit(self) -> np.ndarray:
        # the interpolated density is continuous at 0, so its Cesaro limit is the end value
        return self.tail_measure.density_at(np.array(0.0))

    def buffer_weights(self, K: int) -> np.ndarray:
        """Weights over a window of ``K+1`` grid values whose last entry is the head."""
        W = self.tail_measure.grid_weights(K)
        W[K] += self.alpha0
        return W


def apply_reduction(pf: PastFunctional, x: Segment) -> np.ndarray:
    """``alpha0 x0 + sum_i w_i x1(theta_i) + int f x1 dtheta`` (trapezoid on the tail grid)."""
    if x.n != pf.n:
        raise ValidationError("segment and functional dimensions differ")
    out = pf.alpha0 @ x.head
    for theta, w in pf.tail_measure.atoms:
        out = out + w @ x.tail_at(theta)
    if pf.tail_measure.density is not None:
        f = pf.tail_measure.density_at(x.grid)
        trap = np.full(x.N + 1, x.h)
        trap[[0, -1]] *= 0.5
        out = out + np.einsum("j,jab,jb->a", trap, f, x.tail)
    return out


@dataclass(frozen=True)
class PhiBar:
    """Real function on R^n with declared smoothness and sup-norm bound.

    ``halfspace = (c, thr)`` marks the indicator of ``{c.y > thr}``, which the
    quadrature code evaluates in closed form.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    smoothness: str
    bound: float
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    halfspace: Optional[Tuple[np.ndarray, float]] = None

    def __post_init__(self):
        if self.smoothness not in SMOOTHNESS:
            raise ValidationError(f"smoothness must be one of {SMOOTHNESS}")
        if self.smoothness == "c1" and self.grad is None:
            raise ValidationError("a C1 observable needs its gradient")

    @property
    def continuous(self) -> bool:
        return self.smoothness != "bounded"

    def __call__(self, y) -> np.ndarray:
        return self.func(np.asarray(y, dtype=float))

    def gradient(self, y) -> np.ndarray:
        if self.smoothness != "c1":
            raise RegimeError(f"observable {self.name!r} is not declared C1")
        return self.grad(np.asarray(y, dtype=float))


def _direction(n: int, direction) -> np.ndarray:
    c = np.zeros(n)
    if direction is None:
        c[0] = 1.0
    else:
        c[:] = np.asarray(direction, dtype=float)
    return c


def indicator(n: int = 1, direction=None, threshold: float = 0.0) -> PhiBar:
    c = _direction(n, direction)
    return PhiBar("indicator", lambda y: (y @ c > threshold).astype(float), "bounded", 1.0,
                  halfspace=(c, float(threshold)))


def _profile(name, f, df, smoothness, bound, n, direction) -> PhiBar:
    c = _direction(n, direction)
    grad = None if df is None else (lambda y: df(y @ c)[..., None] * c)
    return PhiBar(name, lambda y: f(y @ c), smoothness, bound, grad)


def tanh_profile(k: float = 1.0, n: int = 1, direction=None) -> PhiBar:
    return _profile("tanh", lambda r: np.tanh(k * r), lambda r: k / np.cosh(k * r) ** 2,
                    "c1", 1.0, n, direction)


def cos_profile(n: int = 1, direction=None) -> PhiBar:
    return _profile("cos", np.cos, lambda r: -np.sin(r), "c1", 1.0, n, direction)


def _smoothstep(r):
    p = np.clip(0.5 * (r + 1.0), 0.0, 1.0)
    return p * p * (3.0 - 2.0 * p)


def _smoothstep_d(r):
    p = np.clip(0.5 * (r + 1.0), 0.0, 1.0)
    return 3.0 * p * (1.0 - p)


def smoothstep(n: int = 1, direction=None) -> PhiBar:
    return _profile("smoothstep", _smoothstep, _smoothstep_d, "c1", 1.0, n, direction)


def constant(c: float = 1.0, n: int = 1) -> PhiBar:
    c = float(c)
    return PhiBar("constant", lambda y: np.full(np.shape(y)[:-1], c), "c1", abs(c),
                  lambda y: np.zeros(np.shape(y)))


@dataclass(frozen=True)
class Observable:
    pf: PastFunctional
    phibar: PhiBar


def observe(obs: Observable, x: Segment) -> float:
    return float(obs.phibar(apply_reduction(obs.pf, x)))


@dataclass(frozen=True)
class ReducedDrift:
    """Noise-coordinate drift ``B(t, x) = bbar(t, P x)``.

    ``bbar`` maps ``(t, y)`` with ``y`` of shape ``(..., n)`` to ``(..., n)``;
    ``jac`` (optional) returns the Jacobian in ``y`` with shape ``(..., n, n)``.
    """

    pf: PastFunctional
    bbar: Callable[[float, np.ndarray], np.ndarray]
    lipschitz: float
    bound: float
    jac: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    name: str = "drift"

    def reduced(self, t: float, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.bbar(t, np.asarray(y, dtype=float)), dtype=float)

    def evaluate(self, t: float, x: Segment) -> np.ndarray:
        return self.reduced(t, apply_reduction(self.pf, x))

    def jacobian(self, t: float, y: np.ndarray) -> np.ndarray:
        if self.jac is None:
            raise RegimeError(f"drift {self.name!r} has no declared Jacobian")
        return np.asarray(self.jac(t, np.asarray(y, dtype=float)), dtype=float)

    def check_bounds(self, samples: np.ndarray, t: float = 0.0) -> bool:
        """Check the declared sup and Lipschitz bounds on sampled points ``(m, n)``."""
        vals = self.reduced(t, samples)
        if np.max(np.linalg.norm(vals, axis=-1)) > self.bound * (1 + 1e-12):
            return False
        dv = np.linalg.norm(vals[1:] - vals[:-1], axis=-1)
        dy = np.linalg.norm(samples[1:] - samples[:-1], axis=-1)
        return bool(np.all(dv <= self.lipschitz * dy * (1 + 1e-12) + 1e-15))


def reduced_drift_eval(drift: ReducedDrift, t: float, x: Segment) -> np.ndarray:
    return drift.evaluate(t, x)


def zero_drift(pf: PastFunctional) -> ReducedDrift:
    n = pf.n
    return ReducedDrift(pf, lambda t, y: np.zeros(np.shape(y)), 0.0, 0.0,
                        lambda t, y: np.zeros(np.shape(y) + (n,)), "zero")


def constant_drift(pf: PastFunctional, b) -> ReducedDrift:
    b = np.broadcast_to(np.asarray(b, dtype=float), (pf.n,)).copy()
    n = pf.n
    return ReducedDrift(pf, lambda t, y: np.broadcast_to(b, np.shape(y)).copy(), 0.0,
                        float(np.linalg.norm(b)),
                        lambda t, y: np.zeros(np.shape(y) + (n,)), "constant")


def tanh_drift(pf: PastFunctional, k: float = 1.0) -> ReducedDrift:
    n = pf.n

    def jac(t, y):
        return (k / np.cosh(k * y) ** 2)[..., None] * np.eye(n)

    return ReducedDrift(pf, lambda t, y: np.tanh(k * y), abs(k), float(np.sqrt(n)), jac, "tanh")


def linear_drift(pf: PastFunctional) -> ReducedDrift:
    """``B(t, y) = y``: unbounded, for composition checks only."""
    n = pf.n
    return ReducedDrift(pf, lambda t, y: np.array(y, dtype=float), 1.0, np.inf,
                        lambda t, y: np.broadcast_to(np.eye(n), np.shape(y) + (n,)).copy(),
                        "linear")
