"""Named systems, functionals, observables, drifts and nonlinearities.

A :class:`Catalog` is a set of registries of factories. The default catalog
carries the three benchmark systems; ``Catalog.empty()`` carries nothing and
users may register their own entries on either.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .dynamics import DelayMeasure, DelaySystem
from .errors import ValidationError
from .functionals import (PastFunctional, constant, constant_drift, cos_profile, indicator,
                          smoothstep, tanh_drift, tanh_profile, zero_drift)
from .kolmogorov import (psi_constant, psi_linear_value, psi_minus_gradient, psi_zero)

KINDS = ("systems", "observables", "drifts", "psi", "problems")


def _s1():
    d = 1.0
    return (DelaySystem(1, d, 0.0, DelayMeasure.zero(d), 1.0),
            PastFunctional.head_projection(1, d))


def _s2():
    d = 1.0
    sys = DelaySystem(1, d, -1.0, DelayMeasure(d, 1, ((-0.5, 0.5),)), 1.0)
    return sys, PastFunctional(1.0, DelayMeasure.constant_density(d, 1.0), "A1")


def _s3():
    sys, _ = _s2()
    return sys, PastFunctional(0.0, DelayMeasure.constant_density(sys.d, 1.0), "A2")


@dataclass
class Catalog:
    """Registries keyed by kind; each entry is a zero- or keyword-argument factory."""

    entries: Dict[str, Dict[str, Callable]] = field(
        default_factory=lambda: {k: {} for k in KINDS})

    @classmethod
    def empty(cls) -> "Catalog":
        return cls()

    @classmethod
    def default(cls) -> "Catalog":
        cat = cls()
        cat.register("systems", "S1", _s1)
        cat.register("systems", "S2", _s2)
        cat.register("systems", "S3", _s3)
        cat.register("observables", "indicator", indicator)
        cat.register("observables", "tanh", tanh_profile)
        cat.register("observables", "cos", cos_profile)
        cat.register("observables", "smoothstep", smoothstep)
        cat.register("observables", "constant", constant)
        cat.register("drifts", "zero", zero_drift)
        cat.register("drifts", "constant", constant_drift)
        cat.register("drifts", "tanh", tanh_drift)
        cat.register("psi", "zero", psi_zero)
        cat.register("psi", "constant", psi_constant)
        cat.register("psi", "linear_value", psi_linear_value)
        cat.register("psi", "minus_z1", psi_minus_gradient)
        from .control import quadratic_box_problem
        cat.register("problems", "S1_quadratic", quadratic_box_problem)
        return cat

    def register(self, kind: str, name: str, factory: Callable) -> None:
        if kind not in self.entries:
            raise ValidationError(f"unknown catalog kind {kind!r}")
        self.entries[kind][name] = factory

    def get(self, kind: str, name: str) -> Callable:
        try:
            return self.entries[kind][name]
        except KeyError:
            raise ValidationError(f"unknown {kind[:-1] if kind.endswith('s') else kind} "
                                  f"{name!r}") from None

    def system(self, name: str):
        """``(DelaySystem, PastFunctional)`` of a named system."""
        return self.get("systems", name)()

    def names(self, kind: str) -> List[str]:
        return sorted(self.entries[kind])

    def listing(self) -> List[str]:
        return [f"{kind}: {name}" for kind in KINDS for name in self.names(kind)]


DEFAULT_CATALOG = Catalog.default
