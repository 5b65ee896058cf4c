"""Mild solutions of linear and semilinear Kolmogorov equations.

The forward mild equation

    w(t, x) = R_t[phi](x) + int_0^t R_{t-s}[psi(w(s, .), grad w(s, .) G)](x) ds

is solved in reduced form. With ``y = P e^{tA} x`` every iterate is a pair of
functions on ``[0, T] x R^n``: the value ``wbar(t, y)`` and the scaled
G-gradient ``gbarG(t, y) = t^{1/2} grad w(t, x) G``. Gaussian convolutions
replace the semigroup, so each Picard sweep is a finite-dimensional
computation on a time x space grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import roots_legendre

from .dynamics import DelaySystem, Segment
from .errors import (DomainError, ExtrapolationWarning, NonContractionError, RegimeError,
                     ValidationError)
from .functionals import PastFunctional, PhiBar, ReducedDrift, observe, Observable
from .quadrature import (LAMBDA_FLOOR, GaussQuadRule, default_rule, gaussian_gradient,
                         gaussian_mean, sym_sqrt)
from .rng import Estimate, MCConfig
from .smoothing import (cov_value, estimate_tbar, perturbed_apply, reduced_flow,
                        response_table)

ARITIES = ("full", "gradient-only")


@dataclass(frozen=True)
class Nonlinearity:
    """``psi(v, z)`` with ``v`` of shape ``(...)`` and ``z`` of shape ``(..., n)``."""

    psi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    arity: str = "full"
    name: str = "psi"

    def __post_init__(self):
        if self.arity not in ARITIES:
            raise ValidationError(f"arity must be one of {ARITIES}")

    def __call__(self, v, z) -> np.ndarray:
        return np.asarray(self.psi(np.asarray(v, dtype=float), np.asarray(z, dtype=float)),
                          dtype=float)


def psi_zero() -> Nonlinearity:
    return Nonlinearity(lambda v, z: np.zeros(np.shape(v)), 0.0, "full", "zero")


def psi_constant(c: float = 1.0) -> Nonlinearity:
    return Nonlinearity(lambda v, z: np.full(np.shape(v), float(c)), 0.0, "full", "constant")


def psi_linear_value(c: float = 1.0) -> Nonlinearity:
    return Nonlinearity(lambda v, z: c * v, abs(c), "full", "linear_value")


def psi_minus_gradient(component: int = 0) -> Nonlinearity:
    return Nonlinearity(lambda v, z: -z[..., component], 1.0, "gradient-only", "minus_z1")


@dataclass(frozen=True)
class SolverConfig:
    """Grids and tolerances for :func:`picard_solve`.

    ``T0`` defaults to ``min(d, tbar, T, 1)``; ``tbar`` of None means it is
    estimated from the covariance lower bound.
    """

    T: float
    T0: Optional[float] = None
    tol: float = 1e-6
    max_iter: int = 50
    gh_order: Optional[int] = None
    time_nodes: int = 16
    quad_nodes: int = 20
    space_points: int = 801
    center: Optional[Sequence[float]] = None
    half_width: Optional[float] = None
    data_range: float = 3.0
    tbar: Optional[float] = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError("horizon T must be positive")
        if self.time_nodes < 2 or self.quad_nodes < 1 or self.space_points < 3:
            raise ValidationError("grid sizes too small")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValidationError("invalid Picard tolerance or iteration cap")

    def resolve_T0(self, sys: DelaySystem, tbar: float) -> float:
        cap = min(sys.d, tbar, self.T, 1.0)
        T0 = cap if self.T0 is None else float(self.T0)
        if T0 > cap * (1 + 1e-12) or T0 <= 0:
            raise ValidationError(
                f"subinterval T0={T0} must satisfy 0 < T0 <= min(d, tbar, T, 1) = {cap:.6g}")
        return T0


class SpaceGrid:
    """Tensor box grid with clamped multilinear interpolation."""

    def __init__(self, axes: Sequence[np.ndarray]):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.n = len(self.axes)
        self.shape = tuple(a.size for a in self.axes)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([m.ravel() for m in mesh], axis=1)
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])

    @property
    def spacing(self) -> float:
        return float(max(a[1] - a[0] for a in self.axes))

    def contains(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.all((y >= self.lo - 1e-12) & (y <= self.hi + 1e-12), axis=-1)

    def interp(self, values: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Interpolate flat grid values ``(J, ...)`` at points ``y`` of shape ``(..., n)``."""
        y = np.clip(np.asarray(y, dtype=float), self.lo, self.hi)
        lead = y.shape[:-1]
        extra = values.shape[1:]
        if self.n == 1:
            flat = y.reshape(-1)
            vals = values.reshape(values.shape[0], -1)
            out = np.stack([np.interp(flat, self.axes[0], vals[:, k])
                            for k in range(vals.shape[1])], axis=-1)
            return out.reshape(lead + extra)
        vals = values.reshape(self.shape + extra)
        f = RegularGridInterpolator(self.axes, vals, method="linear", bounds_error=False,
                                    fill_value=None)
        return f(y.reshape(-1, self.n)).reshape(lead + extra)

    def central_gradient(self, values: np.ndarray) -> np.ndarray:
        vals = values.reshape(self.shape)
        grads = np.gradient(vals, *self.axes, edge_order=1)
        if self.n == 1:
            grads = [grads]
        return np.stack([g.ravel() for g in grads], axis=-1)


@dataclass
class _Window:
    start: float
    end: float
    sqrt_map: bool
    u: np.ndarray
    s: np.ndarray

    def u_of(self, s):
        s = np.asarray(s, dtype=float)
        return np.sqrt(np.clip(s, 0.0, None)) if self.sqrt_map else s - self.start

    def s_of(self, u):
        u = np.asarray(u, dtype=float)
        return u * u if self.sqrt_map else self.start + u

    def basis(self, s) -> np.ndarray:
        """Rows expressing spline values at ``s`` as combinations of node values."""
        u = self.u_of(s)
        if self.u.size >= 4:
            return CubicSpline(self.u, np.eye(self.u.size))(u)
        return np.stack([np.interp(u, self.u, e) for e in np.eye(self.u.size)], axis=-1)

    def quadrature(self, s_target: float, q: int):
        """Gauss-Legendre nodes and ds-weights on ``[start, s_target]``."""
        x, w = roots_legendre(q)
        ub = float(self.u_of(s_target))
        u = 0.5 * ub * (x + 1.0) + (0.0 if self.sqrt_map else 0.0)
        wu = 0.5 * ub * w
        if self.sqrt_map:
            return u * u, 2.0 * u * wu
        return self.start + u, wu


@dataclass
class SigmaFunction:
    """Reduced pair ``(wbar, gbarG)`` on a time x space grid."""

    times: np.ndarray
    grid: SpaceGrid
    wbar: np.ndarray
    gbarG: np.ndarray
    windows: List[_Window]
    phibar: Optional[PhiBar] = None
    diagnostics: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def _window_slices(self):
        out, i = [], 0
        for w in self.windows:
            out.append(slice(i, i + w.u.size))
            i += w.u.size - 1
        return out

    def fields_at(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Grid values ``(wbar(t), gbarG(t))`` by spline interpolation in time."""
        if t < -1e-14 or t > self.T * (1 + 1e-12):
            raise DomainError(f"t={t} outside the solved horizon [0, {self.T}]")
        for w, sl in zip(self.windows, self._window_slices()):
            if t <= w.end * (1 + 1e-12):
                B = w.basis(np.array([t]))[0]
                return B @ self.wbar[sl], np.einsum("k,kjn->jn", B, self.gbarG[sl])
        raise DomainError("t outside window structure")

    def evaluate(self, t: float, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(wbar, gbarG, inside)`` at reduced points ``y`` of shape ``(..., n)``."""
        y = np.asarray(y, dtype=float)
        wv, gv = self.fields_at(t)
        return self.grid.interp(wv, y), self.grid.interp(gv, y), self.grid.contains(y)

    def sup_scaled_gradient(self) -> float:
        return float(np.max(np.linalg.norm(self.gbarG, axis=-1)))


def _space_grid(sys: DelaySystem, pf: PastFunctional, cfg: SolverConfig) -> SpaceGrid:
    n = sys.n
    center = np.zeros(n) if cfg.center is None else np.asarray(cfg.center, dtype=float)
    if cfg.half_width is None:
        lam_max = float(np.linalg.eigvalsh(cov_value(sys, pf, cfg.T))[-1])
        half = 6.0 * math.sqrt(max(lam_max, 0.0)) + cfg.data_range
    else:
        half = float(cfg.half_width)
    return SpaceGrid([np.linspace(c - half, c + half, cfg.space_points) for c in center])


class _Convolver:
    """Gaussian averages of grid functions, ``E[F(y + Z)]`` and ``E[F(y + Z) Q^{-1} Z]``."""

    def __init__(self, grid: SpaceGrid, rule: GaussQuadRule):
        self.grid, self.rule = grid, rule

    def mean_and_grad(self, F: np.ndarray, Q: np.ndarray, want_grad: bool = True):
        root, inv_root, lam_min = sym_sqrt(Q)
        if np.max(np.abs(root)) < math.sqrt(LAMBDA_FLOOR):
            g = self.grid.central_gradient(F) if want_grad else None
            return F.copy(), g
        z = self.rule.nodes @ root.T
        pts = self.grid.points[:, None, :] + z[None]
        vals = self.grid.interp(F, pts)
        mean = np.einsum("jm...,m->j...", vals, self.rule.weights)
        if not want_grad:
            return mean, None
        if inv_root is None:
            return mean, self.grid.central_gradient(F)
        kern = self.rule.nodes @ inv_root.T
        return mean, np.einsum("jm,m,mi->ji", vals, self.rule.weights, kern)


def _psi_on_grid(psi: Nonlinearity, w: np.ndarray, gG: np.ndarray, s: float) -> np.ndarray:
    return psi(w, gG / math.sqrt(s))


class _Context:
    def __init__(self, sys, pf, phibar, cfg: SolverConfig, grid: SpaceGrid):
        self.sys, self.pf, self.phibar, self.cfg, self.grid = sys, pf, phibar, cfg, grid
        self.rule = default_rule(sys.n, cfg.gh_order)
        self.conv = _Convolver(grid, self.rule)
        self.table = response_table(sys, pf, cfg.T)
        self.n = sys.n

    def M(self, s: float) -> np.ndarray:
        return self.table.M(s)[0]

    def scale_gradient(self, grad_y: np.ndarray, s: float) -> np.ndarray:
        """``gbarG = s^{1/2} grad_y wbar M(s)``."""
        return math.sqrt(s) * grad_y @ self.M(s)

    def unscale_gradient(self, gG: np.ndarray, s: float) -> np.ndarray:
        return (gG / math.sqrt(s)) @ np.linalg.inv(self.M(s))


def _linear_part(ctx: _Context, s: float):
    """``Rbar(s, .)`` and ``gbarG`` of the linear solution on the grid."""
    pts = ctx.grid.points
    if s == 0.0:
        return ctx.phibar(pts), np.zeros_like(pts)
    Q = cov_value(ctx.sys, ctx.pf, s)
    val = gaussian_mean(ctx.phibar, pts, Q, ctx.rule)
    grad = gaussian_gradient(ctx.phibar, pts, Q, ctx.rule)
    return np.asarray(val, dtype=float), ctx.scale_gradient(grad, s)


def _window_nodes(start: float, end: float, K: int) -> _Window:
    if start == 0.0:
        u = np.linspace(0.0, math.sqrt(end), K + 1)
        return _Window(start, end, True, u, u * u)
    u = np.linspace(0.0, end - start, K + 1)
    return _Window(start, end, False, u, start + u)


def _solve_window(ctx: _Context, psi: Nonlinearity, win: _Window, base_w: np.ndarray,
                  base_g: np.ndarray, prev: Optional[Tuple[np.ndarray, np.ndarray]]):
    """Picard iteration on one window; returns node values and diagnostics."""
    cfg = ctx.cfg
    K = win.u.size - 1
    # quadrature plan: for every target node, time nodes, weights, spline rows, covariances
    plan = []
    for i in range(1, K + 1):
        s_i = float(win.s[i])
        s_nodes, w_nodes = win.quadrature(s_i, cfg.quad_nodes)
        rows = win.basis(s_nodes)
        covs = [cov_value(ctx.sys, ctx.pf, s_i, float(sj)) for sj in s_nodes]
        plan.append((i, s_i, s_nodes, w_nodes, rows, covs))
    W = base_w.copy()
    G = base_g.copy()
    ratios, changes = [], []
    bad_streak = 0
    converged = False
    for it in range(1, cfg.max_iter + 1):
        W_new = base_w.copy()
        G_new = base_g.copy()
        for i, s_i, s_nodes, w_nodes, rows, covs in plan:
            acc_w = np.zeros(W.shape[1])
            acc_g = np.zeros(G.shape[1:])
            for sj, wj, row, Q in zip(s_nodes, w_nodes, rows, covs):
                F = _psi_on_grid(psi, row @ W, np.einsum("k,kjn->jn", row, G), float(sj))
                m, g = ctx.conv.mean_and_grad(F, Q)
                acc_w += wj * m
                acc_g += wj * g
            W_new[i] += acc_w
            G_new[i] += ctx.scale_gradient(acc_g, s_i)
        change = float(np.max(np.abs(W_new - W)) + np.max(np.abs(G_new - G)))
        W, G = W_new, G_new
        if changes:
            prev_change = changes[-1]
            ratio = change / prev_change if prev_change > 0 else 0.0
            ratios.append(ratio)
            bad_streak = bad_streak + 1 if ratio >= 1.0 else 0
        changes.append(change)
        if change < cfg.tol:
            converged = True
            break
        if bad_streak >= 3:
            raise NonContractionError(
                f"Picard iteration did not contract on [{win.start:.4g}, {win.end:.4g}]",
                {"ratios": ratios, "changes": changes})
    return W, G, {"window": (win.start, win.end), "iterations": it, "ratios": ratios,
                  "changes": changes, "converged": converged}


def picard_solve(sys: DelaySystem, pf: PastFunctional, phibar: PhiBar, psi: Nonlinearity,
                 cfg: SolverConfig) -> SigmaFunction:
    """Fixed-point solution of the forward mild equation on ``[0, T]``.

    The horizon is split into windows of length at most ``T0``. On the first
    window the iteration starts from the linear solution; later windows are
    re-based on the converged terminal data of the previous one,
    ``wbar(t, y) = Rbar(t, y) + E[(wbar - Rbar)(a, y + Z)] + int_a^t ...`` with
    ``Z ~ N(0, Q_t^a)``; the linear part ``Rbar`` is never interpolated.
    """
    if pf.regime == "A2":
        raise RegimeError("the fixed-point solver needs a regime-A1 reduction")
    if pf.n != sys.n or sys.n > 2:
        raise ValidationError("solver supports reduced dimension 1 or 2")
    if cfg.tbar is None:
        est = estimate_tbar(sys, pf)
        tbar, c_hat = est.tbar, est.c_hat
    else:
        tbar, c_hat = float(cfg.tbar), float("nan")
    T0 = cfg.resolve_T0(sys, tbar)
    grid = _space_grid(sys, pf, cfg)
    ctx = _Context(sys, pf, phibar, cfg, grid)
    nwin = int(math.ceil(cfg.T / T0 - 1e-9))
    edges = np.linspace(0.0, cfg.T, nwin + 1)
    windows, W_all, G_all, diags = [], [], [], []
    for k in range(nwin):
        win = _window_nodes(float(edges[k]), float(edges[k + 1]), cfg.time_nodes)
        K = win.u.size - 1
        base_w = np.empty((K + 1, grid.points.shape[0]))
        base_g = np.empty((K + 1, grid.points.shape[0], sys.n))
        if k == 0:
            for i, s in enumerate(win.s):
                base_w[i], base_g[i] = _linear_part(ctx, float(s))
        else:
            # the linear part is recomputed exactly; only the remainder is carried over
            a = win.start
            wa, ga = W_all[-1][-1], G_all[-1][-1]
            lin_w, lin_g = _linear_part(ctx, a)
            rest_w = wa - lin_w
            rest_grad = ctx.unscale_gradient(ga - lin_g, a)
            base_w[0], base_g[0] = wa, ga
            for i in range(1, K + 1):
                s = float(win.s[i])
                Q = cov_value(sys, pf, s, a)
                m, _ = ctx.conv.mean_and_grad(rest_w, Q, want_grad=False)
                gm, _ = ctx.conv.mean_and_grad(rest_grad, Q, want_grad=False)
                lw, lg = _linear_part(ctx, s)
                base_w[i], base_g[i] = lw + m, lg + ctx.scale_gradient(gm, s)
        W, G, diag = _solve_window(ctx, psi, win, base_w, base_g, None)
        windows.append(win)
        W_all.append(W)
        G_all.append(G)
        diags.append(diag)
    times = np.concatenate([windows[0].s] + [w.s[1:] for w in windows[1:]])
    wbar = np.concatenate([W_all[0]] + [W[1:] for W in W_all[1:]])
    gbarG = np.concatenate([G_all[0]] + [G[1:] for G in G_all[1:]])
    all_ratios = [r for d in diags for r in d["ratios"]]
    diagnostics = {"T0": T0, "tbar": tbar, "c_hat": c_hat, "windows": diags,
                   "max_ratio": max(all_ratios) if all_ratios else 0.0,
                   "converged": all(d["converged"] for d in diags),
                   "grid_spacing": grid.spacing, "half_width": float(grid.hi[0] - grid.lo[0]) / 2}
    return SigmaFunction(times, grid, wbar, gbarG, windows, phibar, diagnostics)


def reduced_solution_from_linear(sys, pf, phibar, cfg: SolverConfig) -> SigmaFunction:
    return picard_solve(sys, pf, phibar, psi_zero(), cfg)


def _as_points(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y.reshape(1, n) if y.ndim <= 1 else y


def _gamma_terms(sys, pf, g: SigmaFunction, psi: Nonlinearity, t: float, y: np.ndarray,
                 quad: Optional[GaussQuadRule], q: int, want_grad: bool):
    rule = quad or default_rule(sys.n)
    value = np.zeros(y.shape[0])
    grad = np.zeros(y.shape)
    # integrate window by window; the first window uses s = u^2
    pieces = []
    for w in g.windows:
        if w.start >= t:
            break
        hi = min(w.end, t)
        pieces.append(_window_nodes(w.start, hi, 1).quadrature(hi, q))
    for s_nodes, w_nodes in pieces:
        for sj, wj in zip(s_nodes, w_nodes):
            sj = float(sj)
            wv, gv = g.fields_at(sj)
            F = _psi_on_grid(psi, wv, gv, sj)
            Q = cov_value(sys, pf, t, sj)
            root, inv_root, _ = sym_sqrt(Q)
            z = rule.nodes @ root.T
            vals = g.grid.interp(F, y[:, None, :] + z[None])
            value += wj * (vals @ rule.weights)
            if want_grad:
                if inv_root is None:
                    raise RegimeError("degenerate covariance window in the gradient kernel")
                kern = rule.nodes @ inv_root.T
                grad += wj * np.einsum("pm,m,mi->pi", vals, rule.weights, kern)
    return value, grad


def gamma_convolution(sys: DelaySystem, pf: PastFunctional, g: SigmaFunction,
                      psi: Nonlinearity, t: float, y, quad: Optional[GaussQuadRule] = None,
                      q: int = 20) -> np.ndarray:
    """``int_0^t int psi(gbar(s, z+y), s^{-1/2} gbarG(s, z+y)) N(0, Q_t^s)(dz) ds``."""
    if not 0 < t <= g.T * (1 + 1e-12):
        raise DomainError("t must lie in (0, T] of the given function")
    pts = _as_points(y, sys.n)
    val, _ = _gamma_terms(sys, pf, g, psi, t, pts, quad, q, False)
    return val if np.ndim(y) > 1 else float(val[0])


def gamma_gradient(sys: DelaySystem, pf: PastFunctional, g: SigmaFunction, psi: Nonlinearity,
                   t: float, y, k: Union[int, Segment], quad: Optional[GaussQuadRule] = None,
                   q: int = 20, tbar: Optional[float] = None) -> np.ndarray:
    """Derivative of the convolution term in direction ``k`` via the Gaussian kernel.

    The steering vector is ``P e^{tA} k``; for a column index ``k = j`` it is
    column ``j`` of ``M(t) sigma^{-1}`` applied to ``sigma e_j``, i.e. ``M(t) e_j``.
    """
    if not 0 < t <= g.T * (1 + 1e-12):
        raise DomainError("t must lie in (0, T] of the given function")
    if tbar is None:
        tbar = estimate_tbar(sys, pf).tbar
    if t > tbar * (1 + 1e-12):
        raise RegimeError(f"t={t} lies beyond the certified covariance bound tbar={tbar:.4g}")
    if isinstance(k, (int, np.integer)):
        v = response_table(sys, pf, t).M(t)[0][:, int(k)]
    else:
        v = reduced_flow(sys, pf, k, t)
    pts = _as_points(y, sys.n)
    _, grad = _gamma_terms(sys, pf, g, psi, t, pts, quad, q, True)
    out = grad @ v
    return out if np.ndim(y) > 1 else float(out[0])


def sigma_eval(w: SigmaFunction, sys: DelaySystem, pf: PastFunctional, t: float,
               x: Segment) -> Tuple[float, np.ndarray]:
    """``(w(t, x), grad w(t, x) G)`` from the reduced representation."""
    y = reduced_flow(sys, pf, x, t)
    if not bool(w.grid.contains(y)):
        warnings.warn(f"reduced point {y} outside the space grid; value clamped",
                      ExtrapolationWarning, stacklevel=2)
    if t == 0.0 and w.phibar is not None:
        val = float(w.phibar(y))
        if w.phibar.smoothness == "c1":
            return val, w.phibar.gradient(y) @ response_table(sys, pf, 0.0).M(0.0)[0]
        return val, np.zeros(sys.n)
    val, gG, _ = w.evaluate(t, y)
    return float(val), np.asarray(gG, dtype=float) / math.sqrt(t)


def linear_solve(sys: DelaySystem, pf: PastFunctional, drift: Optional[ReducedDrift],
                 phibar: PhiBar, t: float, x: Segment, T: float, mc: MCConfig = MCConfig()):
    """``v(t, x) = E[phibar(P X_T)]`` for the drifted process started at ``(t, x)``."""
    if t > T:
        raise DomainError("t must not exceed T")
    if t == T:
        return Estimate(observe(Observable(pf, phibar), x), 0.0, mc.paths)
    return perturbed_apply(sys, pf, drift, phibar, T - t, x, mc, t0=t)
