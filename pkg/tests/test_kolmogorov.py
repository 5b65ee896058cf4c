import math
import warnings

import numpy as np
import pytest

from delaysmooth.dynamics import Segment
from delaysmooth.errors import (ExtrapolationWarning, NonContractionError, RegimeError,
                                ValidationError)
from delaysmooth.functionals import (Observable, PastFunctional, constant, cos_profile, indicator, observe,
                                     tanh_profile, zero_drift)
from delaysmooth.kolmogorov import (Nonlinearity, SolverConfig, gamma_convolution,
                                    gamma_gradient, linear_solve, picard_solve, psi_constant,
                                    psi_linear_value, psi_minus_gradient, psi_zero, sigma_eval)
from delaysmooth.rng import MCConfig
from delaysmooth.smoothing import ou_apply, reduced_flow, reduced_ou, response_matrix

SMALL = dict(space_points=201, time_nodes=8, quad_nodes=12, tbar=2.0)


@pytest.fixture(scope="module")
def s1_cos_linear(s1):
    sys, pf = s1
    return picard_solve(sys, pf, cos_profile(), psi_zero(), SolverConfig(T=1.0, **SMALL))


def test_config_validation(s1):
    sys, _ = s1
    with pytest.raises(ValidationError):
        SolverConfig(T=-1.0)
    with pytest.raises(ValidationError):
        SolverConfig(T=2.0, T0=1.5).resolve_T0(sys, 2.0)
    assert SolverConfig(T=0.4).resolve_T0(sys, 2.0) == 0.4
    with pytest.raises(ValidationError):
        Nonlinearity(lambda v, z: v, 1.0, "weird")


def test_a2_functional_rejected(s3):
    with pytest.raises(RegimeError):
        picard_solve(*s3, tanh_profile(), psi_zero(), SolverConfig(T=0.5, **SMALL))


def test_linear_fixed_point_exact(s2):
    sys, pf = s2
    for phi in (indicator(), tanh_profile()):
        w = picard_solve(sys, pf, phi, psi_zero(),
                         SolverConfig(T=1.0, T0=0.5, space_points=101, time_nodes=6))
        exact = np.stack([reduced_ou(sys, pf, phi, t, w.grid.points) for t in w.times])
        assert np.max(np.abs(w.wbar - exact)) <= 1e-8
        assert np.max(np.abs(w.wbar)) <= phi.bound + 1e-12
        assert all(d["iterations"] == 1 for d in w.diagnostics["windows"])


def test_gamma_convolution_examples(s1, s1_cos_linear):
    sys, pf = s1
    w = s1_cos_linear
    y = np.array([[0.0], [0.7], [-1.3]])
    for t in (0.2, 0.9):
        np.testing.assert_allclose(gamma_convolution(sys, pf, w, psi_zero(), t, y), 0.0)
        np.testing.assert_allclose(gamma_convolution(sys, pf, w, psi_constant(1.0), t, y), t,
                                   rtol=1e-13)
        # N(0, Q_t^s) * Rbar(s) = Rbar(t), so the integrand is constant in s
        got = gamma_convolution(sys, pf, w, psi_linear_value(1.0), t, y)
        # linear interpolation error bound h^2/8 for |cos''| <= 1, integrated over [0, t]
        slack = t * w.grid.spacing ** 2 / 8
        np.testing.assert_allclose(got, t * math.exp(-t / 2) * np.cos(y[:, 0]), atol=slack)


def test_gamma_gradient_examples(s1):
    sys, pf = s1
    w = picard_solve(sys, pf, cos_profile(), psi_zero(),
                     SolverConfig(T=1.0, space_points=1601, time_nodes=8, quad_nodes=12,
                                  tbar=2.0))
    y = np.array([[0.3], [-0.8]])
    np.testing.assert_allclose(gamma_gradient(sys, pf, w, psi_constant(2.0), 0.6, y, 0,
                                              tbar=2.0), 0.0, atol=1e-12)
    psi = psi_linear_value(1.0)
    for t in (0.3, 0.8):
        g = gamma_gradient(sys, pf, w, psi, t, y, 0, tbar=2.0)
        # a step spanning a few cells; below the cell size FD sees interpolation kinks
        d = 2e-2
        fd = (gamma_convolution(sys, pf, w, psi, t, y + d) -
              gamma_convolution(sys, pf, w, psi, t, y - d)) / (2 * d)
        np.testing.assert_allclose(g, fd, rtol=1e-3)
        exact = -t * math.exp(-t / 2) * np.sin(y[:, 0])
        np.testing.assert_allclose(g, exact, atol=t * w.grid.spacing ** 2 / 8)
    with pytest.raises(RegimeError):
        gamma_gradient(sys, pf, w, psi, 0.8, y, 0, tbar=0.5)


def test_gamma_gradient_steering_in_segment_space(s2):
    # derivative along the head direction in x-space, past the delay onset
    sys, pf = s2
    w = picard_solve(sys, pf, tanh_profile(), psi_zero(), SolverConfig(T=1.0, **SMALL))
    psi = psi_linear_value(1.0)
    x = Segment.constant(0.4, 0.1, 1.0)
    t = 0.9
    y = reduced_flow(sys, pf, x, t)[None]
    g = gamma_gradient(sys, pf, w, psi, t, y, 0, tbar=2.0)
    d = 1e-3
    xp = Segment(x.head + d, x.tail, x.d)
    xm = Segment(x.head - d, x.tail, x.d)
    fd = (gamma_convolution(sys, pf, w, psi, t, reduced_flow(sys, pf, xp, t)[None]) -
          gamma_convolution(sys, pf, w, psi, t, reduced_flow(sys, pf, xm, t)[None])) / (2 * d)
    assert g[0] == pytest.approx(fd[0], rel=1e-3)
    k = Segment(np.array([1.0]), np.zeros_like(x.tail), x.d)
    assert gamma_gradient(sys, pf, w, psi, t, y, k, tbar=2.0)[0] == pytest.approx(g[0], rel=1e-9)


def test_non_contraction_detected(s1):
    sys, pf = s1
    with pytest.raises(NonContractionError) as exc:
        picard_solve(sys, pf, cos_profile(), psi_linear_value(25.0),
                     SolverConfig(T=1.0, space_points=51, time_nodes=6, quad_nodes=6, tbar=2.0))
    assert len(exc.value.diagnostics["ratios"]) >= 3


def test_sigma_eval_properties(s2):
    sys, pf = s2
    phi = tanh_profile()
    w = picard_solve(sys, pf, phi, psi_minus_gradient(), SolverConfig(T=1.0, **SMALL))
    x = Segment.constant(0.3, -0.2, 1.0)
    v0, _ = sigma_eval(w, sys, pf, 0.0, x)
    assert v0 == pytest.approx(float(phi(reduced_flow(sys, pf, x, 0.0))), abs=1e-15)
    # a different segment with the same reduction at t
    t = 0.5
    y = reduced_flow(sys, pf, x, t)
    z = Segment.constant(0.0, 0.0, 1.0)
    yz = reduced_flow(sys, pf, z, t)
    shift = (y - yz) / response_matrix(sys, pf, t)[0, 0]
    z = Segment(z.head + shift, z.tail, z.d)
    np.testing.assert_allclose(reduced_flow(sys, pf, z, t), y, atol=1e-12)
    a, b = sigma_eval(w, sys, pf, t, x), sigma_eval(w, sys, pf, t, z)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_sigma_eval_gradient_matches_fd(s1):
    sys, pf = s1
    w = picard_solve(sys, pf, cos_profile(), psi_linear_value(0.5),
                     SolverConfig(T=1.0, space_points=1601, time_nodes=8, quad_nodes=12,
                                   tbar=2.0))
    x = Segment.constant(0.6, 0.0, 1.0)
    d = 2 * w.grid.spacing
    for t in (0.4, 1.0):
        _, g = sigma_eval(w, sys, pf, t, x)
        vp, _ = sigma_eval(w, sys, pf, t, Segment(x.head + d, x.tail, x.d))
        vm, _ = sigma_eval(w, sys, pf, t, Segment(x.head - d, x.tail, x.d))
        assert g[0] == pytest.approx((vp - vm) / (2 * d), rel=1e-2)


def test_extrapolation_flagged(s1, s1_cos_linear):
    sys, pf = s1
    far = Segment.constant(100.0, 0.0, 1.0)
    with pytest.warns(ExtrapolationWarning):
        sigma_eval(s1_cos_linear, sys, pf, 0.5, far)


def test_c1_data_keeps_gradient_bounded(s2):
    sys, pf = s2
    w = picard_solve(sys, pf, tanh_profile(), psi_minus_gradient(), SolverConfig(T=1.0, **SMALL))
    small = (w.times > 0) & (w.times < 0.05)
    unscaled = np.abs(w.gbarG[small, :, 0]) / np.sqrt(w.times[small])[:, None]
    assert np.max(unscaled) <= 1.5


def test_linear_solve_examples(s2):
    sys, pf = s2
    x = Segment.constant(0.2, 0.4, 1.0)
    at_T = linear_solve(sys, pf, None, tanh_profile(), 1.0, x, 1.0)
    assert at_T.value == observe(Observable(pf, tanh_profile()), x) and at_T.se == 0.0
    est = linear_solve(sys, pf, zero_drift(pf), tanh_profile(), 0.5, x, 1.0,
                       MCConfig(paths=20_000, seed=3))
    assert abs(est.value - ou_apply(sys, pf, tanh_profile(), 0.5, x)) <= 3 * est.se


@pytest.mark.slow
def test_grid_convergence(s2):
    sys, pf = s2
    probes = [Segment.constant(0.0, 0.0, 1.0), Segment.constant(0.5, -0.3, 1.0)]
    vals = []
    for sp, q in ((101, 6), (201, 12), (401, 24)):
        w = picard_solve(sys, pf, tanh_profile(), psi_minus_gradient(),
                         SolverConfig(T=1.0, space_points=sp, quad_nodes=q, time_nodes=8))
        vals.append(np.array([sigma_eval(w, sys, pf, 1.0, x)[0] for x in probes]))
    d1 = np.max(np.abs(vals[1] - vals[0]))
    d2 = np.max(np.abs(vals[2] - vals[1]))
    assert d2 <= d1 / 2
