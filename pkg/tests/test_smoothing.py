import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from delaysmooth.dynamics import DelayMeasure, DelaySystem, Segment
from delaysmooth.errors import DomainError, RegimeError, SingularCovarianceError
from delaysmooth.functionals import (PastFunctional, constant, cos_profile, indicator,
                                     tanh_drift, tanh_profile, zero_drift)
from delaysmooth.quadrature import GaussQuadRule, gaussian_gradient, gaussian_mean
from delaysmooth.rng import MCConfig
from delaysmooth.smoothing import (cov_value, covariance, estimate_tbar, gradient_rate_probe,
                                   lower_bound_certificate, ou_apply, ou_gradient,
                                   perturbed_apply, perturbed_gradient, reduced_flow,
                                   response_matrix, smoothing_rate_probe, steering_energy,
                                   strong_feller_failure_probe)

# Riemann sum at dr = 1e-5 of M(r)^2, with M from a plain Euler loop of the
# scalar response (independent of the package); analytic value is 0.1.
S2_COV_01_RIEMANN = 0.09999995163035166

HEAD = Segment.constant(1.0, 0.0, 1.0)


def test_gauss_rule_moments():
    for dim in (1, 2):
        rule = GaussQuadRule.build(dim)
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        z = rule.nodes[:, 0]
        for k, m in zip(range(7), (1, 0, 1, 0, 3, 0, 15)):
            assert rule.weights @ z ** k == pytest.approx(m, abs=1e-10)


def test_response_matrix_examples(s1, s2, s3):
    sys1, pf1 = s1
    for s in (0.0, 0.2, 0.7, 0.99):
        assert response_matrix(sys1, pf1, s)[0, 0] == pytest.approx(1.0, abs=1e-12)
    sys2, pf2 = s2
    np.testing.assert_allclose(response_matrix(sys2, pf2, 0.0), pf2.alpha0 @ sys2.sigma)
    sys3, pf3 = s3
    # M(s) = int_{-s}^0 exp(-(s + theta)) dtheta = 1 - exp(-s) before the delay acts
    for s in (1e-3, 1e-4):
        assert response_matrix(sys3, pf3, s)[0, 0] / s == pytest.approx(-math.expm1(-s) / s,
                                                                        rel=1e-6)


def test_covariance_examples(s1, s2):
    sys1, pf1 = s1
    for t in (0.1, 0.5, 0.9):
        assert covariance(sys1, pf1, 0.0, t).value[0, 0] == pytest.approx(t, rel=1e-10)
    assert covariance(sys1, pf1, 0.3, 0.8).value[0, 0] == pytest.approx(0.5, rel=1e-10)
    sys2, pf2 = s2
    assert covariance(sys2, pf2, 0.0, 0.1).value[0, 0] == pytest.approx(S2_COV_01_RIEMANN,
                                                                         rel=1e-6)
    with pytest.raises(DomainError):
        covariance(sys1, pf1, 0.5, 0.5)


def test_covariance_monotone_and_additive(s2):
    sys, pf = s2
    ts = np.linspace(0.05, 1.5, 12)
    vals = [cov_value(sys, pf, t) for t in ts]
    for a, b in zip(vals[:-1], vals[1:]):
        assert np.linalg.eigvalsh(b - a)[0] >= -1e-10
    for s, t in ((0.2, 0.9), (0.4, 1.3), (0.5, 0.6)):
        np.testing.assert_allclose(cov_value(sys, pf, t), cov_value(sys, pf, s) +
                                   cov_value(sys, pf, t, s), atol=1e-8)


def test_two_dimensional_covariance_symmetric():
    sys = DelaySystem(2, 1.0, [[-1.0, 0.3], [0.0, -0.5]],
                      DelayMeasure(1.0, 2, ((-0.5, [[0.2, 0.0], [0.1, 0.2]]),)),
                      [[1.0, 0.2], [0.0, 0.8]])
    pf = PastFunctional.head_projection(2, 1.0)
    c = covariance(sys, pf, 0.0, 0.7)
    np.testing.assert_array_equal(c.value, c.value.T)
    assert c.lambda_min > 0


def test_smoothing_rates(s1, s2, s3):
    t = np.geomspace(1e-3, 1e-1, 7)
    assert smoothing_rate_probe(*s1, t).slope == pytest.approx(1.0, abs=1e-6)
    assert 0.9 <= smoothing_rate_probe(*s2, t).slope <= 1.1
    assert 2.8 <= smoothing_rate_probe(*s3, t).slope <= 3.2
    with pytest.raises(DomainError):
        smoothing_rate_probe(*s1, [0.01, 0.02, 0.03, 0.04, 0.05])


def test_ou_apply_closed_forms(s1, s2):
    sys, pf = s1
    for m, t in ((0.0, 0.3), (1.2, 0.7), (-2.0, 0.05)):
        x = Segment.constant(m, 0.0, 1.0)
        assert ou_apply(sys, pf, cos_profile(), t, x) == pytest.approx(
            math.exp(-t / 2) * math.cos(m), abs=1e-12)
    sys2, pf2 = s2
    assert ou_apply(sys2, pf2, constant(3.0), 0.4, HEAD) == pytest.approx(3.0, abs=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.5), st.floats(-4, 4))
def test_ou_apply_is_contraction(t, m):
    from delaysmooth.catalog import _s2
    sys, pf = _s2()
    x = Segment.constant(m, -m, 1.0)
    for phi in (tanh_profile(3.0), indicator(), cos_profile()):
        assert abs(ou_apply(sys, pf, phi, t, x)) <= phi.bound + 1e-12


def test_ou_gradient_examples(s1):
    sys, pf = s1
    for t in (0.01, 0.3, 0.9):
        g = ou_gradient(sys, pf, indicator(), t, Segment.zero(1, 1.0), HEAD)
        assert g == pytest.approx((2 * math.pi * t) ** -0.5, rel=1e-12)
    assert abs(ou_gradient(sys, pf, constant(2.0), 0.4, HEAD, HEAD)) < 1e-12
    assert abs(ou_gradient(sys, pf, cos_profile(), 0.4, Segment.zero(1, 1.0), HEAD)) < 1e-12


def test_ou_gradient_matches_fd(s2):
    sys, pf = s2
    x = Segment.from_function(0.3, lambda th: np.sin(2 * th), 1.0)
    h = Segment.from_function(1.0, lambda th: np.cos(th), 1.0)
    delta = 1e-4 * (1 + 0.3)
    for phi in (tanh_profile(), cos_profile()):
        for t in (0.2, 0.8):
            g = ou_gradient(sys, pf, phi, t, x, h)
            fd = (ou_apply(sys, pf, phi, t, x + h * delta) -
                  ou_apply(sys, pf, phi, t, x - h * delta)) / (2 * delta)
            assert g == pytest.approx(fd, rel=1e-3)


def test_gradient_rates(s1):
    sys, pf = s1
    t = np.geomspace(1e-3, 1e-1, 7)
    assert gradient_rate_probe(sys, pf, indicator(), Segment.zero(1, 1.0), HEAD, t).slope == \
        pytest.approx(-0.5, abs=1e-9)
    assert abs(gradient_rate_probe(sys, pf, tanh_profile(), Segment.zero(1, 1.0), HEAD,
                                   t).slope) <= 0.1


def test_singular_covariance_refused(s1):
    sys, pf = s1
    with pytest.raises(SingularCovarianceError):
        gaussian_mean(indicator(), np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(SingularCovarianceError):
        gaussian_gradient(tanh_profile(), np.zeros((1, 1)), np.zeros((1, 1)))
    assert gaussian_mean(tanh_profile(), np.array([[0.4]]), np.zeros((1, 1)))[0] == \
        pytest.approx(math.tanh(0.4))


def test_steering_energy(s1, s2):
    sys, pf = s1
    for t in (0.1, 0.5):
        assert steering_energy(sys, pf, t, HEAD) == pytest.approx(t ** -0.5, rel=1e-10)
    assert steering_energy(sys, pf, 0.3, Segment.zero(1, 1.0)) == 0.0
    sys2, pf2 = s2
    eta = Segment.from_function(1.0, lambda th: 1 + th, 1.0)
    v = reduced_flow(sys2, pf2, eta, 0.2)
    e2 = float(v @ np.linalg.solve(cov_value(sys2, pf2, 0.2), v))
    assert steering_energy(sys2, pf2, 0.2, eta) ** 2 == pytest.approx(e2, rel=1e-10)


def test_lower_bound_and_tbar(s1, s2):
    for sys, pf in (s1, s2):
        windows = [(s, t) for t in np.linspace(0.1, 1.0, 5) for s in (0.0, 0.5 * t)]
        assert lower_bound_certificate(sys, pf, windows) > 0
        est = estimate_tbar(sys, pf)
        assert est.tbar >= sys.d


def test_perturbed_apply_reductions(s2):
    sys, pf = s2
    x = Segment.constant(0.5, 0.2, 1.0)
    mc = MCConfig(paths=20_000, seed=5)
    est = perturbed_apply(sys, pf, None, tanh_profile(), 0.5, x, mc)
    exact = ou_apply(sys, pf, tanh_profile(), 0.5, x)
    assert abs(est.direct.value - exact) <= 3 * est.direct.se
    c = perturbed_apply(sys, pf, tanh_drift(pf), constant(0.75), 0.5, x, mc)
    assert c.direct.value == 0.75 and c.direct.se == 0.0


def test_perturbed_gradient_examples(s1, s2):
    sys, pf = s1
    x = Segment.constant(0.4, 0.0, 1.0)
    mc = MCConfig(paths=20_000, seed=2)
    g = perturbed_gradient(sys, pf, None, cos_profile(), 0.5, x, HEAD, mc, method="formula")
    assert abs(g.formula.value - ou_gradient(sys, pf, cos_profile(), 0.5, x, HEAD)) <= \
        3 * g.formula.se + 1e-12
    z = perturbed_gradient(sys, pf, None, constant(1.0), 0.5, x, HEAD, mc)
    assert z.formula.value == 0.0 and z.fd.value == 0.0
    with pytest.raises(RegimeError):
        perturbed_gradient(sys, pf, None, indicator(), 0.5, x, HEAD, mc, method="formula")
    sys2, pf2 = s2
    both = perturbed_gradient(sys2, pf2, tanh_drift(pf2), tanh_profile(), 0.5,
                              Segment.constant(0.3, 0.3, 1.0), HEAD, MCConfig(paths=20_000, seed=4))
    gap = abs(both.formula.value - both.fd.value)
    assert gap <= 3 * math.hypot(both.formula.se, both.fd.se) + 1e-5


def test_feller_probe_examples(s1):
    sys, pf = s1
    rep = strong_feller_failure_probe(sys, 0.5, -0.9)
    assert rep.deterministic_coordinate
    assert abs(rep.growth_at(1e-3)) >= 1e2
    assert rep.control_bounded
    short = DelaySystem(1, 0.4, 0.0, DelayMeasure.zero(0.4), 1.0)
    rep2 = strong_feller_failure_probe(short, 0.5, -0.3)
    assert not rep2.deterministic_coordinate
    assert rep2.tail_bounded and rep2.control_bounded
