"""Time stepping for the linear delay system and its stochastic variants.

The state is a :class:`Segment`: the present value together with the past
trajectory on a uniform grid over ``[-d, 0]``. Deterministic and stochastic
stepping share one explicit Euler scheme whose history buffer has the step as
its cell size, so every step advances the buffer by exactly one cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, StepMismatchError, ValidationError
from .rng import path_generator

DEFAULT_N = 100
_TOL = 1e-9


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(n)
    if m.shape != (n, n):
        raise ValidationError(f"{name} must be {n}x{n}, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} has non-finite entries")
    m.setflags(write=False)
    return m


def _near_int(v: float) -> Optional[int]:
    r = round(v)
    return int(r) if abs(v - r) <= _TOL * max(1.0, abs(v)) else None


@dataclass(frozen=True)
class DelayMeasure:
    """Finite matrix-valued measure on ``[-d, 0]``: atoms plus a density.

    ``density`` holds node values on a uniform mesh of ``[-d, 0]`` (shape
    ``(M+1, n, n)``) and is interpolated linearly between nodes.
    """

    d: float
    n: int
    atoms: Tuple[Tuple[float, np.ndarray], ...] = ()
    density: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.d > 0:
            raise ValidationError("delay horizon d must be positive")
        atoms = []
        for theta, w in self.atoms:
            theta = float(theta)
            if theta < -self.d - _TOL or theta > _TOL:
                raise ValidationError(f"atom location {theta} outside [-d, 0]")
            atoms.append((min(max(theta, -self.d), 0.0), _as_matrix(w, self.n, "atom weight")))
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            dens = np.array(self.density, dtype=float)
            if dens.ndim == 1 and self.n == 1:
                dens = dens[:, None, None]
            if dens.ndim != 3 or dens.shape[1:] != (self.n, self.n) or dens.shape[0] < 2:
                raise ValidationError("density must have shape (M+1, n, n) with M >= 1")
            if not np.all(np.isfinite(dens)):
                raise ValidationError("density has non-finite entries")
            dens.setflags(write=False)
            object.__setattr__(self, "density", dens)

    @classmethod
    def zero(cls, d: float, n: int = 1) -> "DelayMeasure":
        return cls(d, n)

    @classmethod
    def constant_density(cls, d: float, value, n: int = 1) -> "DelayMeasure":
        v = _as_matrix(value, n, "density value")
        return cls(d, n, density=np.stack([v, v]))

    @property
    def is_zero(self) -> bool:
        return not self.atoms and (self.density is None or not np.any(self.density))

    def has_atom_at_zero(self) -> bool:
        return any(abs(theta) <= _TOL and np.any(w) for theta, w in self.atoms)

    def density_at(self, theta) -> np.ndarray:
        """Density at ``theta`` (any shape), zero outside ``[-d, 0]``."""
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape + (self.n, self.n))
        if self.density is None:
            return out
        m = self.density.shape[0] - 1
        pos = (theta + self.d) / self.d * m
        inside = (pos >= -_TOL) & (pos <= m + _TOL)
        p = np.clip(pos, 0.0, m)
        i0 = np.minimum(np.floor(p).astype(int), m - 1)
        fr = (p - i0)[..., None, None]
        vals = (1.0 - fr) * self.density[i0] + fr * self.density[i0 + 1]
        out[inside] = vals[inside]
        return out

    def density_kinks(self) -> np.ndarray:
        """Mesh nodes where the interpolated density may bend."""
        if self.density is None:
            return np.empty(0)
        m = self.density.shape[0] - 1
        if m == 1 or np.ptp(self.density, axis=0).max() == 0.0:
            return np.array([-self.d, 0.0])
        return np.linspace(-self.d, 0.0, m + 1)

    def total_variation(self) -> float:
        tv = sum(np.linalg.norm(w, 2) for _, w in self.atoms)
        if self.density is not None:
            norms = np.array([np.linalg.norm(m, 2) for m in self.density])
            h = self.d / (len(norms) - 1)
            tv += float(h * (norms.sum() - 0.5 * (norms[0] + norms[-1])))
        return float(tv)

    def grid_weights(self, K: int) -> np.ndarray:
        """Weights ``W`` with ``int x(theta) mu(dtheta) ~ sum_k W[k] @ x(theta_k)``.

        The grid is ``theta_k = -d + k d/K``; atoms are spread by linear
        interpolation and the density by the trapezoid rule.
        """
        h = self.d / K
        W = np.zeros((K + 1, self.n, self.n))
        for theta, w in self.atoms:
            p = (theta + self.d) / h
            k = min(int(math.floor(p + _TOL)), K - 1)
            fr = p - k
            if fr < _TOL:
                fr = 0.0
            W[k] += (1.0 - fr) * w
            W[k + 1] += fr * w
        if self.density is not None:
            trap = np.full(K + 1, h)
            trap[[0, -1]] *= 0.5
            W += trap[:, None, None] * self.density_at(np.linspace(-self.d, 0.0, K + 1))
        return W


@dataclass(frozen=True)
class Segment:
    """Present value ``head`` and past trajectory ``tail`` on ``[-d, 0]``.

    ``tail[j]`` is the value at ``theta_j = -d + j d/N``; the last node is the
    left limit at 0. Values between nodes are linear interpolants.
    """

    head: np.ndarray
    tail: np.ndarray
    d: float

    def __post_init__(self):
        head = np.array(self.head, dtype=float).reshape(-1)
        tail = np.array(self.tail, dtype=float)
        if tail.ndim == 1:
            tail = tail[:, None] if head.size == 1 else tail.reshape(-1, head.size)
        if tail.ndim != 2 or tail.shape[1] != head.size:
            raise ValidationError("tail must have shape (N+1, n)")
        if tail.shape[0] < 3:
            raise ValidationError("tail grid needs N >= 2")
        if not self.d > 0:
            raise ValidationError("delay horizon d must be positive")
        if not (np.all(np.isfinite(head)) and np.all(np.isfinite(tail))):
            raise ValidationError("segment values must be finite")
        head.setflags(write=False)
        tail.setflags(write=False)
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "tail", tail)

    @property
    def n(self) -> int:
        return self.head.size

    @property
    def N(self) -> int:
        return self.tail.shape[0] - 1

    @property
    def h(self) -> float:
        return self.d / self.N

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-self.d, 0.0, self.N + 1)

    @classmethod
    def constant(cls, head, value, d: float, N: int = DEFAULT_N) -> "Segment":
        head = np.atleast_1d(np.asarray(head, dtype=float))
        tail = np.broadcast_to(np.asarray(value, dtype=float), (N + 1, head.size))
        return cls(head, tail, d)

    @classmethod
    def zero(cls, n: int, d: float, N: int = DEFAULT_N) -> "Segment":
        return cls(np.zeros(n), np.zeros((N + 1, n)), d)

    @classmethod
    def from_function(cls, head, f: Callable, d: float, N: int = DEFAULT_N) -> "Segment":
        head = np.atleast_1d(np.asarray(head, dtype=float))
        grid = np.linspace(-d, 0.0, N + 1)
        tail = np.array([np.broadcast_to(f(th), (head.size,)) for th in grid], dtype=float)
        return cls(head, tail, d)

    def tail_at(self, theta) -> np.ndarray:
        """Linear interpolation of the tail at ``theta`` in ``[-d, 0]``."""
        theta = np.asarray(theta, dtype=float)
        p = np.clip((theta + self.d) / self.h, 0.0, self.N)
        i0 = np.minimum(np.floor(p + _TOL).astype(int), self.N - 1)
        fr = p - i0
        fr = np.where(np.abs(fr) < _TOL, 0.0, fr)[..., None]
        return (1.0 - fr) * self.tail[i0] + fr * self.tail[i0 + 1]

    def _check_same_grid(self, other: "Segment"):
        if other.n != self.n or other.N != self.N or abs(other.d - self.d) > _TOL:
            raise ValidationError("segments live on different grids")

    def __add__(self, other: "Segment") -> "Segment":
        self._check_same_grid(other)
        return Segment(self.head + other.head, self.tail + other.tail, self.d)

    def __sub__(self, other: "Segment") -> "Segment":
        self._check_same_grid(other)
        return Segment(self.head - other.head, self.tail - other.tail, self.d)

    def __mul__(self, c: float) -> "Segment":
        return Segment(c * self.head, c * self.tail, self.d)

    __rmul__ = __mul__

    def __neg__(self) -> "Segment":
        return self * -1.0


@dataclass(frozen=True)
class DelaySystem:
    """``dy = a0 y dt + int y(t+theta) a1(dtheta) dt + sigma dW``."""

    n: int
    d: float
    a0: np.ndarray
    a1: DelayMeasure
    sigma: np.ndarray
    max_condition: float = 1e12

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("dimension n must be >= 1")
        if not self.d > 0:
            raise ValidationError("delay horizon d must be positive")
        object.__setattr__(self, "a0", _as_matrix(self.a0, self.n, "a0"))
        object.__setattr__(self, "sigma", _as_matrix(self.sigma, self.n, "sigma"))
        if self.a1.n != self.n or abs(self.a1.d - self.d) > _TOL:
            raise ValidationError("a1 must live on [-d, 0] with matching dimension")
        if self.a1.has_atom_at_zero():
            raise ValidationError(
                "standing condition a1({0}) = 0 violated: a1 has an atom at theta = 0")
        if np.linalg.cond(self.sigma) > self.max_condition:
            raise ValidationError("sigma is not invertible (condition number too large)")

    @property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    def delay_lags(self) -> np.ndarray:
        """Positive lags ``-theta`` of the atoms of a1."""
        return np.array(sorted({-th for th, w in self.a1.atoms if np.any(w)}))


@dataclass(frozen=True)
class BrownianPath:
    """Brownian increments on a uniform grid, reproducible from (seed, stream, path)."""

    dt: float
    increments: np.ndarray
    seed: int = 0
    stream: int = 0
    path: int = 0

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @classmethod
    def sample(cls, n: int, steps: int, dt: float, seed: int, stream: int = 0,
               path: int = 0) -> "BrownianPath":
        z = path_generator(seed, stream, path).standard_normal((steps, n))
        return cls(dt, math.sqrt(dt) * z, seed, stream, path)

    @classmethod
    def zeros(cls, n: int, steps: int, dt: float) -> "BrownianPath":
        return cls(dt, np.zeros((steps, n)))


class EulerScheme:
    """Explicit Euler stepping of path ensembles on a buffer of cell size ``dt``.

    Paths are stored as arrays ``(P, K+1+steps, n)``: index ``K+k`` holds the
    value at time ``k dt`` and the first ``K+1`` entries the initial history.
    """

    def __init__(self, sys: DelaySystem, dt: float):
        K = _near_int(sys.d / dt)
        if K is None or K < 1:
            raise StepMismatchError(f"dt={dt} does not divide the delay horizon d={sys.d}")
        self.sys = sys
        self.dt = sys.d / K
        self.K = K
        W = sys.a1.grid_weights(K)
        W[K] += sys.a0
        nz = np.flatnonzero(np.any(W != 0.0, axis=(1, 2)))
        self.offsets = nz
        self.kernel = W[nz]
        self.full_kernel = W

    def initial_buffer(self, x: Segment) -> np.ndarray:
        if x.n != self.sys.n or abs(x.d - self.sys.d) > _TOL:
            raise ValidationError("segment does not match the system")
        theta = np.linspace(-self.sys.d, 0.0, self.K + 1)[:-1]
        return np.vstack([x.tail_at(theta), x.head[None, :]])

    def linear_drift(self, window: np.ndarray) -> np.ndarray:
        """``a0 y + int y(t+theta) a1(dtheta)`` for windows ``(P, K+1, n)``."""
        return np.einsum("kab,pkb->pa", self.kernel, window[:, self.offsets, :])

    def run(self, buffer0: np.ndarray, steps: int, dW: Optional[np.ndarray] = None,
            forcing: Optional[Callable[[int, float, np.ndarray], np.ndarray]] = None,
            t0: float = 0.0) -> np.ndarray:
        """Integrate ``steps`` Euler steps from ``buffer0`` (shape ``(P, K+1, n)``).

        ``dW`` holds Brownian increments ``(P, steps, n)``; ``forcing(k, t,
        window)`` returns the noise-coordinate drift ``B + u`` of shape
        ``(P, n)``, so the head gains ``sigma (B + u) dt``.
        """
        buffer0 = np.asarray(buffer0, dtype=float)
        if buffer0.ndim == 2:
            buffer0 = buffer0[None]
        P, K1, n = buffer0.shape
        if dW is not None and dW.shape[:2] != (P, steps) and dW.shape[:2] != (1, steps):
            raise StepMismatchError("noise does not cover the requested horizon")
        K, dt, sig = self.K, self.dt, self.sys.sigma
        path = np.empty((P, K1 + steps, n))
        path[:, :K1] = buffer0
        for k in range(steps):
            window = path[:, k:k + K1]
            incr = self.linear_drift(window)
            if forcing is not None:
                incr = incr + np.asarray(forcing(k, t0 + k * dt, window)) @ sig.T
            new = path[:, k + K] + dt * incr
            if dW is not None:
                new = new + dW[:, k] @ sig.T
            path[:, k + K1] = new
        return path

    def reduction_weights(self, alpha0, tail_measure: DelayMeasure) -> np.ndarray:
        """Weights of ``alpha0 x0 + int x1 dmu`` over a buffer window."""
        W = tail_measure.grid_weights(self.K)
        W[self.K] += alpha0
        return W

    def propagate_functional(self, L0: np.ndarray, steps: int) -> np.ndarray:
        """``L_m`` with ``L_m . X = L0 . (E^m X)`` for the one-step Euler map ``E``."""
        K, dt, Wk = self.K, self.dt, self.full_kernel
        out = np.empty((steps + 1,) + L0.shape)
        out[0] = L0
        L = L0
        for m in range(steps):
            nxt = np.zeros_like(L)
            nxt[1:] = L[:-1]
            nxt[K] += L[K]
            nxt += dt * np.einsum("ab,kbc->kac", L[K], Wk)
            out[m + 1] = L = nxt
        return out

    def segment_at(self, path_row: np.ndarray, k: int, x0: Segment,
                   N: Optional[int] = None) -> Segment:
        """Segment at time ``k dt`` of one stored path, on a tail grid of size ``N``."""
        N = x0.N if N is None else N
        t = k * self.dt
        theta = np.linspace(-self.sys.d, 0.0, N + 1)
        tail = np.empty((N + 1, self.sys.n))
        past = t + theta < -_TOL
        tail[past] = x0.tail_at(t + theta[past])
        pos = (t + theta[~past]) / self.dt + self.K
        i0 = np.minimum(np.floor(pos + _TOL).astype(int), path_row.shape[0] - 1)
        fr = pos - i0
        fr = np.where(fr < _TOL, 0.0, fr)[:, None]
        i1 = np.minimum(i0 + 1, path_row.shape[0] - 1)
        tail[~past] = (1.0 - fr) * path_row[i0] + fr * path_row[i1]
        return Segment(path_row[self.K + k].copy(), tail, self.sys.d)


def _resolve_step(sys: DelaySystem, x: Segment, t: float, dt: Optional[float],
                  resample: bool) -> Tuple[float, int]:
    if t < 0:
        raise DomainError("time must be non-negative")
    dt = x.h if dt is None else float(dt)
    if dt <= 0:
        raise DomainError("dt must be positive")
    steps = _near_int(t / dt)
    cells = _near_int(x.h / dt)
    if steps is not None and cells is not None and cells >= 1:
        return dt, steps
    if not resample:
        raise StepMismatchError(
            f"dt={dt} must divide both t={t} and the tail spacing {x.h}")
    K = max(1, math.ceil(sys.d / dt - _TOL))
    for K_try in range(K, 1000 * K + 1):
        s = _near_int(t * K_try / sys.d)
        if s is not None:
            return sys.d / K_try, s
    raise StepMismatchError(f"no step <= {dt} is commensurate with t={t} and d={sys.d}")


def evolve_deterministic(sys: DelaySystem, x: Segment, t: float, dt: Optional[float] = None,
                         resample: bool = False) -> Segment:
    """Apply the delay semigroup ``e^{tA}`` to ``x`` by explicit Euler steps."""
    dt, steps = _resolve_step(sys, x, t, dt, resample)
    scheme = EulerScheme(sys, dt)
    path = scheme.run(scheme.initial_buffer(x), steps)
    return scheme.segment_at(path[0], steps, x)


def fundamental_response(sys: DelaySystem, eta, t: float, dt: Optional[float] = None,
                         N: Optional[int] = None) -> Segment:
    """``e^{tA} G eta``: evolve head ``sigma eta`` with a zero tail."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if N is None:
        N = DEFAULT_N if dt is None else _near_int(sys.d / dt) or DEFAULT_N
    x = Segment(sys.sigma @ eta, np.zeros((N + 1, sys.n)), sys.d)
    return evolve_deterministic(sys, x, t, dt)


def _check_noise(noise: BrownianPath, T: float, dt: float, n: int) -> int:
    steps = _near_int(T / dt)
    if steps is None:
        raise StepMismatchError(f"dt={dt} does not divide T={T}")
    if abs(noise.dt - dt) > _TOL * dt or noise.steps != steps or noise.increments.shape[1] != n:
        raise StepMismatchError(
            f"noise has {noise.steps} steps of {noise.dt}, need {steps} of {dt} in dimension {n}")
    return steps


def simulate_ou(sys: DelaySystem, x: Segment, T: float, dt: Optional[float],
                noise: BrownianPath) -> List[Segment]:
    """Euler-Maruyama path of the delay OU process; one Segment per grid time."""
    return simulate_controlled(sys, x, None, None, T, dt, noise)


def simulate_controlled(sys: DelaySystem, x: Segment, drift, control, T: float,
                        dt: Optional[float], noise: BrownianPath) -> List[Segment]:
    """Path of the delay system with head drift ``sigma (B(t, x) + u)``.

    ``drift`` is a ReducedDrift or None. ``control`` is None, an array of
    shape ``(steps, n)`` indexed by step, or a callback ``(t, segment) -> u``.
    """
    dt = x.h if dt is None else float(dt)
    steps = _check_noise(noise, T, dt, sys.n)
    scheme = EulerScheme(sys, dt)
    N = x.N
    signal = None
    if control is not None and not callable(control):
        signal = np.asarray(control, dtype=float).reshape(steps, sys.n)
    needs_segment = drift is not None or callable(control)
    dW = noise.increments[None]
    holder = {}

    def forcing(k, t, window):
        f = np.zeros((1, sys.n))
        if needs_segment:
            seg = scheme.segment_at(holder["path"][0], k, x, N)
            if drift is not None:
                f = f + drift.evaluate(t, seg)
            if callable(control):
                f = f + np.asarray(control(t, seg), dtype=float).reshape(1, sys.n)
        if signal is not None:
            f = f + signal[k]
        return f

    # the callback needs the partially filled path, so run step by step here
    K1 = scheme.K + 1
    path = np.empty((1, K1 + steps, sys.n))
    path[:, :K1] = scheme.initial_buffer(x)
    holder["path"] = path
    use_forcing = drift is not None or control is not None
    for k in range(steps):
        window = path[:, k:k + K1]
        incr = scheme.linear_drift(window)
        if use_forcing:
            incr = incr + forcing(k, k * scheme.dt, window) @ sys.sigma.T
        new = path[:, k + scheme.K] + scheme.dt * incr
        new = new + dW[:, k] @ sys.sigma.T
        path[:, k + K1] = new
    return [scheme.segment_at(path[0], k, x, N) for k in range(steps + 1)]


def girsanov_weight(sys: DelaySystem, drift, ou_path: Sequence[Segment],
                    noise: BrownianPath) -> float:
    """``exp(sum <B_k, dW_k> - 1/2 sum |B_k|^2 dt)`` along an OU path."""
    if len(ou_path) != noise.steps + 1:
        raise StepMismatchError("path and noise lengths differ")
    if drift is None:
        return 1.0
    dt = noise.dt
    log_v = 0.0
    for k in range(noise.steps):
        b = np.asarray(drift.evaluate(k * dt, ou_path[k]), dtype=float).reshape(-1)
        log_v += float(b @ noise.increments[k]) - 0.5 * float(b @ b) * dt
    return math.exp(log_v)


def fundamental_path(sys: DelaySystem, horizon: float, dt: float = 1e-4) -> np.ndarray:
    """Matrix response ``Y(u)`` on ``u = 0, dt, ..., horizon`` with ``Y(0) = sigma``.

    ``Y`` solves the deterministic delay equation with zero history, so column
    ``j`` is the head of ``e^{uA} G e_j``. Integrated with Heun's method; the
    jump at ``u = 0`` is kept exact because the history before 0 is identically
    zero and never interpolated across.
    """
    n = sys.n
    steps = int(math.ceil(horizon / dt - _TOL))
    Y = np.zeros((steps + 1, n, n))
    Y[0] = sys.sigma
    atoms = [(th, w) for th, w in sys.a1.atoms if np.any(w)]
    has_density = sys.a1.density is not None and np.any(sys.a1.density)
    if has_density:
        Kd = _near_int(sys.d / dt)
        if Kd is None:
            raise StepMismatchError("response step must divide d when a1 has a density")
        rho = sys.a1.density_at(np.linspace(-sys.d, 0.0, Kd + 1))

    def delayed(u_idx: float, upto: int) -> np.ndarray:
        if u_idx < -_TOL:
            return np.zeros((n, n))
        i0 = int(math.floor(u_idx + _TOL))
        fr = u_idx - i0
        if fr < _TOL or i0 >= upto:
            return Y[min(i0, upto)]
        return (1.0 - fr) * Y[i0] + fr * Y[i0 + 1]

    def rhs(k: int) -> np.ndarray:
        f = sys.a0 @ Y[k]
        for th, w in atoms:
            f = f + w @ delayed(k + th / dt, k)
        if has_density:
            m = min(Kd, k)
            tw = np.full(m + 1, dt)
            tw[[0, -1]] *= 0.5
            if m == 0:
                tw[:] = 0.0
            f = f + np.einsum("j,jab,jbc->ac", tw, rho[Kd - m:], Y[k - m:k + 1])
        return f

    for k in range(steps):
        f0 = rhs(k)
        Y[k + 1] = Y[k] + dt * f0
        f1 = rhs(k + 1)
        Y[k + 1] = Y[k] + 0.5 * dt * (f0 + f1)
    return Y
