"""YAML run configurations resolved against a catalog."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from .catalog import Catalog
from .dynamics import DelayMeasure, DelaySystem, Segment
from .errors import ValidationError
from .functionals import PastFunctional

EXPERIMENTS = ("simulate", "covariance", "smoothing-rate", "gradient-rate", "feller-probe",
               "hjb-solve", "linear-solve", "control")


@dataclass
class RunConfig:
    experiment: str
    raw: Dict[str, Any]
    source: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment id {self.experiment!r}; "
                                  f"expected one of {', '.join(EXPERIMENTS)}")
        if "seed" in self.raw and not isinstance(self.raw["seed"], int):
            raise ValidationError("seed must be an integer")

    def get(self, key: str, default=None):
        return self.raw.get(key, default)

    def require(self, key: str):
        if key not in self.raw:
            raise ValidationError(f"config for {self.experiment!r} needs {key!r}")
        return self.raw[key]

    def resolved(self) -> Dict[str, Any]:
        return dict(self.raw)

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict) or "experiment" not in raw:
        raise ValidationError("config must be a mapping with an 'experiment' key")
    return RunConfig(str(raw["experiment"]), raw, str(path))


def _measure(spec, d: float, n: int) -> DelayMeasure:
    if spec is None:
        return DelayMeasure.zero(d, n)
    if not isinstance(spec, dict):
        raise ValidationError("a measure is given as {atoms: [[theta, weight], ...], density: ...}")
    atoms = tuple((float(a[0]), a[1]) for a in spec.get("atoms", []))
    dens = spec.get("density")
    if dens is None:
        return DelayMeasure(d, n, atoms)
    arr = np.asarray(dens, dtype=float)
    if arr.ndim == 0 or (n > 1 and arr.ndim == 2):
        return DelayMeasure(d, n, atoms, DelayMeasure.constant_density(d, arr, n).density)
    return DelayMeasure(d, n, atoms, arr)


def build_system(spec, catalog: Catalog):
    """``(DelaySystem, PastFunctional)`` from a catalog name or an inline mapping."""
    if isinstance(spec, str):
        return catalog.system(spec)
    if not isinstance(spec, dict):
        raise ValidationError("system must be a catalog name or a mapping")
    n, d = int(spec.get("n", 1)), float(spec.get("d", 1.0))
    sys = DelaySystem(n, d, spec.get("a0", 0.0), _measure(spec.get("a1"), d, n),
                      spec.get("sigma", 1.0))
    pfs = spec.get("pf")
    if pfs is None:
        pf = PastFunctional.head_projection(n, d)
    else:
        pf = PastFunctional(pfs.get("alpha0", 1.0), _measure(pfs.get("measure"), d, n),
                            pfs.get("regime"))
    return sys, pf


def build_segment(spec, sys: DelaySystem, N: int = 100) -> Segment:
    """Segments: ``{head, tail}`` constant, ``{head, sin: [amp, freq]}`` or ``{head, hat: [center, width]}``."""
    spec = spec or {}
    n, d = sys.n, sys.d
    head = np.broadcast_to(np.asarray(spec.get("head", 0.0), dtype=float), (n,))
    theta = np.linspace(-d, 0.0, N + 1)
    if "sin" in spec:
        amp, freq = spec["sin"]
        tail = np.repeat((amp * np.sin(freq * theta))[:, None], n, axis=1)
    elif "hat" in spec:
        c, width = spec["hat"]
        tail = np.zeros((N + 1, n))
        tail[:, 0] = np.clip(1.0 - np.abs(theta - c) / width, 0.0, None)
    else:
        tail = np.broadcast_to(np.asarray(spec.get("tail", 0.0), dtype=float), (N + 1, n)).copy()
    return Segment(head, tail, d)


def build_named(catalog: Catalog, kind: str, spec, **extra):
    """``name`` or ``{name, args}`` resolved to a catalog factory call."""
    if isinstance(spec, str):
        name, args = spec, {}
    elif isinstance(spec, dict) and "name" in spec:
        name, args = spec["name"], dict(spec.get("args", {}))
    else:
        raise ValidationError(f"{kind} entry must be a name or {{name, args}}")
    args.update(extra)
    try:
        return catalog.get(kind, name)(**args)
    except TypeError as exc:
        raise ValidationError(f"bad arguments for {kind} {name!r}: {exc}") from None


def time_list(spec) -> np.ndarray:
    """Explicit list, or ``{geom: [start, stop, num]}`` / ``{linear: [start, stop, num]}``."""
    if isinstance(spec, dict):
        if "geom" in spec:
            a, b, m = spec["geom"]
            return np.geomspace(float(a), float(b), int(m))
        if "linear" in spec:
            a, b, m = spec["linear"]
            return np.linspace(float(a), float(b), int(m))
        raise ValidationError("time list mapping needs 'geom' or 'linear'")
    return np.asarray(spec, dtype=float).reshape(-1)
