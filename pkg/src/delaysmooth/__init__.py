"""Delay Ornstein-Uhlenbeck semigroups acting on reduced observables.

Covariance quadrature in the reduced space, Gaussian gradient formulas, a
fixed-point solver for semilinear Kolmogorov equations and feedback control
for linear delay SDEs.
"""

__version__ = "0.1.0"
