"""Optimal control of the delay system through the semilinear Kolmogorov equation.

The state follows ``dX = A X dt + G u dt + G dW`` with running cost ``g(u)``
and terminal cost ``phibar(P X_T)``. The Hamiltonian ``psi(z) = inf_u {g(u) +
z.u}`` turns the value function into the mild solution computed by
:func:`delaysmooth.kolmogorov.picard_solve`; the feedback ``u = Upsilon(grad v G)``
is simulated and its cost compared with the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dynamics import DelaySystem, EulerScheme, Segment, _near_int
from .errors import DomainError, ValidationError
from .functionals import PastFunctional, PhiBar, apply_reduction, tanh_profile
from .kolmogorov import Nonlinearity, SigmaFunction, SolverConfig, picard_solve, sigma_eval
from .rng import Estimate, path_normals, run_chunks

_STREAM_CONTROL = 21
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AdmissibleSet:
    """A box ``[lower, upper]`` or a finite list of points (rows of ``points``)."""

    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.points is not None:
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[0] == 0 or not np.all(np.isfinite(pts)):
                raise ValidationError("finite control set must be nonempty and finite")
            # lexicographic order makes the first minimizer the smallest one
            order = np.lexsort(pts.T[::-1])
            object.__setattr__(self, "points", pts[order])
            return
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("control box needs finite bounds of equal shape")
        if np.any(lo > hi):
            raise ValidationError("control box has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lower, upper) -> "AdmissibleSet":
        return cls(lower=lower, upper=upper)

    @classmethod
    def finite(cls, points) -> "AdmissibleSet":
        pts = np.asarray(points, dtype=float)
        return cls(points=pts.reshape(len(pts), -1))

    @property
    def is_box(self) -> bool:
        return self.points is None

    @property
    def n(self) -> int:
        return self.points.shape[1] if self.points is not None else self.lower.size

    @property
    def radius(self) -> float:
        """``max_{u in U} |u|``."""
        if self.points is not None:
            return float(np.max(np.linalg.norm(self.points, axis=1)))
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def contains(self, u, tol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.points is not None:
            d = np.abs(u[..., None, :] - self.points).max(axis=-1)
            return np.any(d <= tol, axis=-1)
        return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)

    def clip(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.points is not None:
            idx = np.argmin(np.linalg.norm(u[..., None, :] - self.points, axis=-1), axis=-1)
            return self.points[idx]
        return np.clip(u, self.lower, self.upper)

    def grid(self, m: int) -> np.ndarray:
        """Lexicographically ordered samples (all points of a finite set)."""
        if self.points is not None:
            return self.points
        axes = [np.linspace(a, b, m) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class RunningCost:
    """Bounded cost ``g`` on U; ``quadratic = c`` declares ``g(u) = c |u|^2``."""

    func: Callable[[np.ndarray], np.ndarray]
    bound: float
    quadratic: Optional[float] = None
    name: str = "g"

    def __call__(self, u) -> np.ndarray:
        return np.asarray(self.func(np.asarray(u, dtype=float)), dtype=float)

    @classmethod
    def squared(cls, c: float = 1.0, radius: float = 1.0) -> "RunningCost":
        return cls(lambda u: c * np.sum(u * u, axis=-1), c * radius ** 2, c, "quadratic")

    @classmethod
    def zero(cls) -> "RunningCost":
        return cls(lambda u: np.zeros(np.shape(u)[:-1]), 0.0, 0.0, "zero")


def _box_descent(g: RunningCost, U: AdmissibleSet, z: np.ndarray, coarse: int,
                 sweeps: int = 2, iters: int = 40) -> Tuple[np.ndarray, np.ndarray]:
    """Coarse grid search then golden-section refinement per axis."""
    cand = U.grid(coarse)
    gc = g(cand)
    vals = gc[None, :] + z @ cand.T
    u = cand[np.argmin(vals, axis=1)].copy()
    if U.points is not None:
        return u, g(u) + np.sum(z * u, axis=-1)
    cell = (U.upper - U.lower) / max(coarse - 1, 1)
    for _ in range(sweeps):
        for i in range(U.n):
            a = np.maximum(u[:, i] - cell[i], U.lower[i])
            b = np.minimum(u[:, i] + cell[i], U.upper[i])

            def f(x):
                w = u.copy()
                w[:, i] = x
                return g(w) + np.sum(z * w, axis=-1)

            c = b - _GOLDEN * (b - a)
            d = a + _GOLDEN * (b - a)
            fc, fd = f(c), f(d)
            for _ in range(iters):
                left = fc <= fd
                b = np.where(left, d, b)
                a = np.where(left, a, c)
                c_new = b - _GOLDEN * (b - a)
                d_new = a + _GOLDEN * (b - a)
                c, d = np.where(left, c_new, d), np.where(left, c, d_new)
                fc, fd = np.where(left, f(c), fd), np.where(left, fc, f(d))
            x = 0.5 * (a + b)
            better = f(x) < f(u[:, i])
            u[:, i] = np.where(better, x, u[:, i])
    return u, g(u) + np.sum(z * u, axis=-1)


def _minimize(g: RunningCost, U: AdmissibleSet, z) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    lead = z.shape[:-1] if z.ndim > 0 and z.shape[-1] == U.n else np.shape(z)
    zf = z.reshape(-1, U.n)
    if U.is_box and g.quadratic is not None:
        if g.quadratic > 0:
            u = np.clip(-zf / (2.0 * g.quadratic), U.lower, U.upper)
        else:
            u = np.where(zf < 0, U.upper, U.lower)
        val = g(u) + np.sum(zf * u, axis=-1)
    else:
        coarse = 257 if U.n == 1 else (33 if U.n == 2 else 9)
        u, val = _box_descent(g, U, zf, coarse)
    return val.reshape(lead), u.reshape(lead + (U.n,))


def hamiltonian(g: RunningCost, U: AdmissibleSet, z) -> np.ndarray:
    """``psi(z) = inf_{u in U} {g(u) + z.u}`` for ``z`` of shape ``(..., n)``."""
    return _minimize(g, U, z)[0]


def select_upsilon(g: RunningCost, U: AdmissibleSet, z) -> np.ndarray:
    """A minimizer of ``g(u) + z.u`` over U; ties go to the lexicographically smallest."""
    return _minimize(g, U, z)[1]


@dataclass(frozen=True)
class ControlProblem:
    sys: DelaySystem
    pf: PastFunctional
    U: AdmissibleSet
    g: RunningCost
    phibar: PhiBar
    T: float
    x: Segment
    t: float = 0.0
    name: str = "problem"

    def __post_init__(self):
        if self.U.n != self.sys.n:
            raise ValidationError("control dimension must match the noise dimension")
        if not self.T > self.t:
            raise ValidationError("horizon must exceed the initial time")
        if not math.isfinite(self.phibar.bound):
            raise ValidationError("terminal cost must be bounded")
        samples = self.U.grid(21)
        gv = self.g(samples)
        if not np.all(np.isfinite(gv)) or np.max(np.abs(gv)) > self.g.bound * (1 + 1e-12):
            raise ValidationError("running cost exceeds its declared bound on U")

    @property
    def horizon(self) -> float:
        return self.T - self.t

    def psi(self) -> Nonlinearity:
        g, U = self.g, self.U
        return Nonlinearity(lambda v, z: hamiltonian(g, U, z), U.radius, "gradient-only",
                            "hamiltonian")

    def solve(self, cfg: Optional[SolverConfig] = None, **kw) -> SigmaFunction:
        """Forward mild solution ``w(tau) = v(T - tau)`` on ``[0, T - t]``."""
        cfg = cfg or SolverConfig(T=self.horizon, **kw)
        if abs(cfg.T - self.horizon) > 1e-12:
            raise ValidationError("solver horizon must equal T - t")
        return picard_solve(self.sys, self.pf, self.phibar, self.psi(), cfg)


def quadratic_box_problem(T: float = 1.0, x0: float = 0.0) -> ControlProblem:
    """S1 benchmark: ``g(u) = u^2`` on ``[-1, 1]``, terminal cost tanh."""
    from .catalog import _s1
    sys, pf = _s1()
    return ControlProblem(sys, pf, AdmissibleSet.box([-1.0], [1.0]), RunningCost.squared(),
                          tanh_profile(), T, Segment.constant(x0, x0, sys.d), 0.0,
                          "S1_quadratic")


@dataclass
class FeedbackPolicy:
    """``u(s, x) = Upsilon(grad v(s, x) G)`` read off a solved forward function."""

    problem: ControlProblem
    w: SigmaFunction
    rule: str = "lexicographic"
    clip: bool = True

    def __post_init__(self):
        if abs(self.w.T - self.problem.horizon) > 1e-9:
            raise ValidationError("policy function is not solved on the problem horizon")

    def from_reduced(self, tau: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Controls and in-grid flags at forward time ``tau`` for points ``y`` ``(P, n)``."""
        _, gG, inside = self.w.evaluate(tau, y)
        u = select_upsilon(self.problem.g, self.problem.U, gG / math.sqrt(tau))
        if self.clip:
            u = self.problem.U.clip(u)
        return u, inside

    def __call__(self, s: float, x: Segment) -> np.ndarray:
        tau = self.problem.T - s
        if tau <= 0:
            raise DomainError("feedback is defined before the terminal time only")
        _, z = sigma_eval(self.w, self.problem.sys, self.problem.pf, tau, x)
        u = select_upsilon(self.problem.g, self.problem.U, z)
        return self.problem.U.clip(u) if self.clip else u


ControlSource = Union[float, np.ndarray, Callable[[float], np.ndarray], FeedbackPolicy]


@dataclass
class ClosedLoopResult:
    times: np.ndarray
    paths: np.ndarray
    reduced: np.ndarray
    controls: np.ndarray
    outside_grid: int


class _Simulator:
    """Shared path loop for open- and closed-loop runs of one problem."""

    def __init__(self, problem: ControlProblem, dt: float):
        steps = _near_int(problem.horizon / dt)
        if steps is None or steps < 1:
            raise DomainError(f"dt={dt} does not divide the horizon {problem.horizon}")
        self.problem = problem
        self.scheme = EulerScheme(problem.sys, dt)
        self.steps = steps
        self.dt = self.scheme.dt
        self.buf0 = self.scheme.initial_buffer(problem.x)
        L0 = self.scheme.reduction_weights(problem.pf.alpha0, problem.pf.tail_measure)
        # L[m] . window = P (Euler flow over m steps) applied to the window
        self.L = self.scheme.propagate_functional(L0, steps)
        self.times = problem.t + self.dt * np.arange(steps + 1)

    def reduce(self, window: np.ndarray, m: int) -> np.ndarray:
        return np.einsum("kab,pkb->pa", self.L[m], window)

    def controls(self, source: ControlSource, k: int, window: np.ndarray, stats: dict):
        P, n = window.shape[0], self.problem.sys.n
        if isinstance(source, FeedbackPolicy):
            m = self.steps - k
            tau = m * self.dt
            y = self.reduce(window, m)
            u, inside = source.from_reduced(tau, y)
            stats["outside"] += int(np.sum(~inside))
            return u, y
        if callable(source):
            u = np.asarray(source(self.times[k]), dtype=float)
        else:
            src = np.asarray(source, dtype=float)
            u = src[k] if src.ndim == 2 else src
        return np.broadcast_to(u.reshape(-1), (P, n)).copy(), None

    def block(self, source: ControlSource, seed: int, idx: np.ndarray, keep: bool,
              noise: bool = True):
        sys, sch = self.problem.sys, self.scheme
        n, K1, P = sys.n, sch.K + 1, idx.size
        if noise:
            dW = math.sqrt(self.dt) * path_normals(seed, _STREAM_CONTROL, idx, (self.steps, n))
        else:
            dW = np.zeros((P, self.steps, n))
        path = np.empty((P, K1 + self.steps, n))
        path[:, :K1] = self.buf0
        run_cost = np.zeros(P)
        stats = {"outside": 0}
        us, ys = [], []
        for k in range(self.steps):
            window = path[:, k:k + K1]
            u, y = self.controls(source, k, window, stats)
            run_cost += self.dt * self.problem.g(u)
            incr = sch.linear_drift(window) + u @ sys.sigma.T
            path[:, k + K1] = path[:, k + sch.K] + self.dt * incr + dW[:, k] @ sys.sigma.T
            if keep:
                us.append(u)
                ys.append(self.reduce(window, 0) if y is None else y)
        y_T = self.reduce(path[:, self.steps:], 0)
        out = {"cost": run_cost + self.problem.phibar(y_T),
               "outside": np.array([stats["outside"]])}
        if keep:
            out["path"] = path
            out["u"] = np.stack(us, axis=1)
            out["y"] = np.stack(ys, axis=1)
        return out


def closed_loop_simulate(problem: ControlProblem, policy: FeedbackPolicy, dt: float,
                         paths: int, seed: int, threads: int = 1, chunk: int = 4096,
                         noise: bool = True) -> ClosedLoopResult:
    """Ensemble of closed-loop paths with the per-step reduced state and control.

    ``noise=False`` integrates the deterministic closed-loop equation.
    """
    sim = _Simulator(problem, dt)
    res = run_chunks(lambda idx: sim.block(policy, seed, idx, True, noise), paths, chunk,
                     threads)
    return ClosedLoopResult(sim.times, res["path"], res["y"], res["u"],
                            int(np.sum(res["outside"])))


def evaluate_cost(problem: ControlProblem, source: ControlSource, dt: float, paths: int,
                  seed: int, threads: int = 1, chunk: int = 4096) -> Estimate:
    """Monte Carlo estimate of ``J = E[sum g(u_k) dt + phibar(P X_T)]`` (left endpoints)."""
    sim = _Simulator(problem, dt)
    res = run_chunks(lambda idx: sim.block(source, seed, idx, False), paths, chunk, threads)
    return Estimate.from_samples(res["cost"])


def solution_value(problem: ControlProblem, w: SigmaFunction) -> float:
    """``v(t, x) = w(T - t, x)``."""
    return sigma_eval(w, problem.sys, problem.pf, problem.horizon, problem.x)[0]


def lipschitz_slack(w: SigmaFunction, dt: float) -> float:
    """``2 (dt L_time + dy L_space)`` with constants fitted on the solution grid."""
    dtimes = np.diff(w.times)
    keep = w.times[1:] >= w.times[-1] * 0.05
    L_time = float(np.max(np.abs(np.diff(w.wbar, axis=0))[keep] / dtimes[keep, None]))
    last = w.wbar[-1]
    L_space = float(np.max(np.linalg.norm(w.grid.central_gradient(last), axis=-1)))
    return 2.0 * (dt * L_time + w.grid.spacing * L_space)


@dataclass
class VerificationRow:
    name: str
    J: float
    se: float
    gap: float
    ok: bool


@dataclass
class VerificationReport:
    v: float
    slack: float
    rows: List[VerificationRow]
    feedback_ok: bool
    passed: bool

    @property
    def violations(self) -> List[VerificationRow]:
        return [r for r in self.rows if not r.ok]


def verify_fundamental_relation(problem: ControlProblem, policy: FeedbackPolicy,
                                candidates: Dict[str, ControlSource], dt: float, paths: int,
                                seed: int = 0, threads: int = 1,
                                slack: Optional[float] = None) -> VerificationReport:
    """Compare ``J(u)`` with ``v`` for the feedback and every candidate control.

    A candidate passes when ``J - v >= -(3 SE + slack)``; the feedback row
    passes when ``|J - v| <= 3 SE + slack``. All runs share the same noise.
    """
    v = solution_value(problem, policy.w)
    slack = lipschitz_slack(policy.w, dt) if slack is None else float(slack)
    # rounding floor so that exact ties are not reported as violations
    tol = slack + 1e-12 * (1.0 + abs(v))
    rows = []
    fb = evaluate_cost(problem, policy, dt, paths, seed, threads)
    fb_ok = abs(fb.value - v) <= 3.0 * fb.se + tol
    rows.append(VerificationRow("feedback", fb.value, fb.se, fb.value - v, fb_ok))
    for name, src in candidates.items():
        est = evaluate_cost(problem, src, dt, paths, seed, threads)
        gap = est.value - v
        rows.append(VerificationRow(name, est.value, est.se, gap,
                                    gap >= -(3.0 * est.se + tol)))
    return VerificationReport(v, slack, rows, fb_ok, all(r.ok for r in rows))
