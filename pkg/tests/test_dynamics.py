import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaysmooth.dynamics import (BrownianPath, DelayMeasure, DelaySystem, EulerScheme, Segment,
                                  evolve_deterministic, fundamental_response, girsanov_weight,
                                  simulate_controlled, simulate_ou)
from delaysmooth.errors import DomainError, StepMismatchError, ValidationError
from delaysmooth.functionals import PastFunctional, constant_drift, tanh_drift, zero_drift
from delaysmooth.rng import path_normals

# Oracle values below come from a plain scalar Euler loop at dt = 1e-5 for
# y' = -y(t) + 0.5 y(t - 0.5), written independently of the package.
S2_EVOLVE_HEAD_025 = 0.889399904782277      # history and head = 1
S2_RESPONSE_HEAD_03 = 0.7408171094478084    # head 1, zero history
S2_RESPONSE_HEAD_08 = 0.5604508444469178    # delay term active


def test_s1_flow_is_identity_on_constants(s1, ones_segment):
    sys, _ = s1
    out = evolve_deterministic(sys, ones_segment, 0.5)
    assert out.head[0] == 1.0
    np.testing.assert_array_equal(out.tail, 1.0)


def test_scalar_decay_without_delay():
    sys = DelaySystem(1, 1.0, -1.0, DelayMeasure.zero(1.0), 1.0)
    x = Segment.constant(1.0, 1.0, 1.0)
    out = evolve_deterministic(sys, x, 0.5, dt=1e-4, resample=True)
    assert out.head[0] == pytest.approx(math.exp(-0.5), abs=5e-5)


def test_s2_evolve_against_fine_oracle(s2, ones_segment):
    sys, _ = s2
    fine = evolve_deterministic(sys, ones_segment, 0.25, dt=1e-4, resample=True)
    assert fine.head[0] == pytest.approx(S2_EVOLVE_HEAD_025, abs=2e-5)
    coarse = evolve_deterministic(sys, ones_segment, 0.25)
    assert coarse.head[0] == pytest.approx(S2_EVOLVE_HEAD_025, abs=1e-3)


def test_s2_euler_order_one(s2, ones_segment):
    sys, _ = s2
    errs = [abs(evolve_deterministic(sys, ones_segment, 0.25, dt=dt, resample=True).head[0]
                - S2_EVOLVE_HEAD_025) for dt in (1e-2, 5e-3, 2.5e-3)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 0.9)


def test_fundamental_response_s1(s1):
    sys, _ = s1
    r = fundamental_response(sys, np.array([1.0]), 0.3)
    assert r.head[0] == 1.0
    theta = r.grid
    np.testing.assert_allclose(r.tail[theta > -0.3 + 1e-9, 0], 1.0)
    np.testing.assert_allclose(r.tail[theta < -0.3 - 1e-9, 0], 0.0)


def test_fundamental_response_s2(s2):
    sys, _ = s2
    assert fundamental_response(sys, np.array([1.0]), 0.3, dt=1e-4).head[0] == pytest.approx(
        S2_RESPONSE_HEAD_03, abs=2e-5)
    assert fundamental_response(sys, np.array([1.0]), 0.8, dt=1e-4).head[0] == pytest.approx(
        S2_RESPONSE_HEAD_08, abs=2e-5)


def test_fundamental_response_zero(s1):
    sys, _ = s1
    r = fundamental_response(sys, np.array([0.0]), 0.7)
    assert not np.any(r.head) and not np.any(r.tail)


def test_domain_and_step_errors(s2, ones_segment):
    sys, _ = s2
    with pytest.raises(DomainError):
        evolve_deterministic(sys, ones_segment, -0.1)
    with pytest.raises(StepMismatchError):
        evolve_deterministic(sys, ones_segment, 0.25, dt=0.003)


def test_atom_at_zero_rejected():
    with pytest.raises(ValidationError, match="standing condition"):
        DelaySystem(1, 1.0, 0.0, DelayMeasure(1.0, 1, ((0.0, 1.0),)), 1.0)


def test_invalid_inputs():
    with pytest.raises(ValidationError):
        DelayMeasure(0.0, 1)
    with pytest.raises(ValidationError):
        DelayMeasure(1.0, 1, ((-1.5, 1.0),))
    with pytest.raises(ValidationError):
        DelaySystem(1, 1.0, 0.0, DelayMeasure.zero(1.0), 0.0)


def test_history_is_copied(s2):
    sys, _ = s2
    x = Segment.from_function(0.3, lambda th: np.sin(5 * th), 1.0)
    out = evolve_deterministic(sys, x, 0.4)
    past = out.grid + 0.4 < -1e-9
    np.testing.assert_array_equal(out.tail[past, 0], x.tail_at(out.grid[past] + 0.4)[:, 0])


def test_semigroup_law_error_halves(s2):
    sys, _ = s2
    x = Segment.from_function(1.0, lambda th: np.cos(3 * th), 1.0)
    ref = evolve_deterministic(sys, x, 0.8, 1e-4, True).head[0]
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        a = evolve_deterministic(sys, evolve_deterministic(sys, x, 0.3, dt, True), 0.5, dt, True)
        errs.append(abs(a.head[0] - ref))
    assert errs[1] <= 0.6 * errs[0] and errs[2] <= 0.6 * errs[1]


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(a, b, h1, h2):
    from delaysmooth.catalog import _s2
    sys, _ = _s2()
    x = Segment.from_function(h1, lambda th: np.sin(2 * th), 1.0)
    z = Segment.from_function(h2, lambda th: th ** 2, 1.0)
    lhs = evolve_deterministic(sys, x * a + z * b, 0.6)
    ex, ez = evolve_deterministic(sys, x, 0.6), evolve_deterministic(sys, z, 0.6)
    np.testing.assert_allclose(lhs.head, a * ex.head + b * ez.head, atol=1e-12)
    np.testing.assert_allclose(lhs.tail, a * ex.tail + b * ez.tail, atol=1e-12)


def test_brownian_path_reproducible():
    a = BrownianPath.sample(1, 50, 0.01, seed=4, stream=2)
    b = BrownianPath.sample(1, 50, 0.01, seed=4, stream=2)
    np.testing.assert_array_equal(a.increments, b.increments)
    c = BrownianPath.sample(1, 50, 0.01, seed=4, stream=3)
    assert not np.array_equal(a.increments, c.increments)


def test_zero_noise_matches_deterministic(s2, ones_segment):
    sys, _ = s2
    path = simulate_ou(sys, ones_segment, 0.5, None, BrownianPath.zeros(1, 50, 0.01))
    det = evolve_deterministic(sys, ones_segment, 0.5)
    assert path[-1].head[0] == pytest.approx(det.head[0], abs=1e-14)
    np.testing.assert_allclose(path[-1].tail, det.tail, atol=1e-14)


def test_noise_length_checked(s1):
    sys, _ = s1
    with pytest.raises(StepMismatchError):
        simulate_ou(sys, Segment.zero(1, 1.0), 1.0, None, BrownianPath.zeros(1, 50, 0.01))


def test_controlled_reduces_to_ou(s2, ones_segment):
    sys, pf = s2
    noise = BrownianPath.sample(1, 100, 0.01, seed=1)
    a = simulate_ou(sys, ones_segment, 1.0, None, noise)
    b = simulate_controlled(sys, ones_segment, None, np.zeros((100, 1)), 1.0, None, noise)
    np.testing.assert_array_equal(a[-1].head, b[-1].head)
    np.testing.assert_array_equal(a[-1].tail, b[-1].tail)


def test_constant_drift_integral(s1):
    sys, pf = s1
    path = simulate_controlled(sys, Segment.zero(1, 1.0), constant_drift(pf, 0.7), None, 1.0,
                               None, BrownianPath.zeros(1, 100, 0.01))
    assert path[-1].head[0] == pytest.approx(0.7, abs=1e-12)


def test_ou_marginal_s1(s1):
    sys, _ = s1
    sch = EulerScheme(sys, 0.01)
    idx = np.arange(100_000)
    dW = 0.1 * path_normals(0, 5, idx, (100, 1))
    heads = sch.run(np.broadcast_to(sch.initial_buffer(Segment.zero(1, 1.0)), (idx.size, 101, 1)),
                    100, dW)[:, -1, 0]
    assert abs(heads.mean()) < 3 * 10 ** -2.5
    assert abs(heads.var(ddof=1) - 1.0) < 0.02


def test_mean_equals_deterministic_flow(s2, ones_segment):
    sys, _ = s2
    sch = EulerScheme(sys, 0.01)
    P = 20_000
    dW = 0.1 * path_normals(3, 9, np.arange(P), (100, 1))
    buf = sch.initial_buffer(ones_segment)
    path = sch.run(np.broadcast_to(buf, (P,) + buf.shape), 100, dW)
    det = sch.run(buf, 100)[0, :, 0]
    probes = np.linspace(10, 100, 10).astype(int) + sch.K
    for k in probes:
        col = path[:, k, 0]
        assert abs(col.mean() - det[k]) < 3 * col.std(ddof=1) / math.sqrt(P)


def test_girsanov_weight_zero_drift(s1):
    sys, pf = s1
    noise = BrownianPath.sample(1, 100, 0.01, seed=2)
    path = simulate_ou(sys, Segment.zero(1, 1.0), 1.0, None, noise)
    assert girsanov_weight(sys, zero_drift(pf), path, noise) == 1.0
    assert girsanov_weight(sys, None, path, noise) == 1.0


def test_girsanov_weight_matches_formula(s2, ones_segment):
    sys, pf = s2
    drift = tanh_drift(pf)
    noise = BrownianPath.sample(1, 20, 0.01, seed=8)
    path = simulate_ou(sys, ones_segment, 0.2, None, noise)
    from delaysmooth.functionals import apply_reduction
    logv = 0.0
    for k in range(20):
        b = math.tanh(apply_reduction(pf, path[k])[0])
        logv += b * noise.increments[k, 0] - 0.5 * b * b * 0.01
    assert girsanov_weight(sys, drift, path, noise) == pytest.approx(math.exp(logv), rel=1e-12)


def test_ensemble_scheme_matches_single_path_simulator(s2, ones_segment):
    sys, _ = s2
    sch = EulerScheme(sys, 0.01)
    noise = BrownianPath.sample(1, 60, 0.01, seed=8, stream=2, path=0)
    single = simulate_ou(sys, ones_segment, 0.6, None, noise)
    ens = sch.run(sch.initial_buffer(ones_segment), 60, noise.increments[None])
    heads = np.array([s.head[0] for s in single])
    assert np.allclose(heads, ens[0, sch.K:, 0], atol=1e-13)
