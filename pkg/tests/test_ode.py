import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from koopman_sp.exceptions import DomainError, NoEventError, StiffnessError
from koopman_sp.model import ManifoldBranch, TimeScale, gamma, van_der_pol
from koopman_sp.ode import (PHASE_SECTION, IntegratorConfig, Section, dense_eval, flow, flow_many,
                            integrate, integrate_until_section, solve_batch, system_rhs)


def scipy_flow(eps, s0, t_fast):
    """Reference solution from scipy's DOP853 at tight tolerances."""
    def f(t, u):
        x, y = u
        return [x - x ** 3 / 3 + y, -eps * x]
    sol = solve_ivp(f, (0, t_fast), s0, method="DOP853", rtol=1e-13, atol=1e-14)
    return sol.y[:, -1]


@pytest.mark.parametrize("eps, s0, t", [(1.0, (2.0, 0.0), 10.0), (0.1, (-3.8, 2.0), 7.0),
                                        (0.01, (3.0, -1.0), 40.0)])
def test_flow_matches_scipy_reference(eps, s0, t):
    got = flow(van_der_pol(eps), s0, TimeScale.FAST, t)
    assert np.allclose(got, scipy_flow(eps, s0, t), atol=1e-7)


def test_zero_duration_is_identity():
    sys = van_der_pol(1.0)
    tr = integrate(sys, (1.5, -0.3), TimeScale.SLOW, 0.0)
    assert tr.times.tolist() == [0.0]
    assert tr.states.tolist() == [[1.5, -0.3]]
    assert flow(sys, (1.5, -0.3), TimeScale.FAST, 0.0) == (1.5, -0.3)


def test_negative_duration_rejected():
    with pytest.raises(DomainError):
        flow(van_der_pol(1.0), (1.0, 0.0), TimeScale.SLOW, -1.0)


def test_trajectory_invariants_and_dense_output():
    sys = van_der_pol(1.0)
    tr = integrate(sys, (2.0, 0.0), TimeScale.SLOW, 5.0)
    assert np.all(np.diff(tr.times) > 0)
    assert tr.states[0].tolist() == [2.0, 0.0]
    assert np.all(np.isfinite(tr.states))
    mid = 0.5 * (tr.times[3] + tr.times[4])
    assert np.allclose(tr(mid)[0], scipy_flow(1.0, (2.0, 0.0), mid), atol=1e-7)
    assert np.allclose(tr(tr.times[5])[0], tr.states[5], atol=1e-12)


def test_slow_scale_rescales_times():
    sys = van_der_pol(0.1)
    tr = integrate(sys, (2.0, 0.0), TimeScale.SLOW, 0.3)
    assert tr.times[-1] == pytest.approx(0.3)
    assert np.allclose(tr.final, scipy_flow(0.1, (2.0, 0.0), 3.0), atol=1e-7)


def test_duality_example():
    sys = van_der_pol(0.1)
    a = flow(sys, (2.0, 0.0), TimeScale.SLOW, 0.3)
    b = flow(sys, (2.0, 0.0), TimeScale.FAST, 3.0)
    assert np.hypot(a[0] - b[0], a[1] - b[1]) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([1.0, 0.1, 0.01]), st.sampled_from([0.1, 1.0]),
       st.floats(-3, 3), st.floats(-2, 2))
def test_duality_against_slow_form_integration(eps, tau, x, y):
    # integrate eps*x' = F, y' = G directly in slow time with scipy
    def f(t, u):
        return [(u[0] - u[0] ** 3 / 3 + u[1]) / eps, -u[0]]
    ref = solve_ivp(f, (0, tau), [x, y], method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1]
    got = flow(van_der_pol(eps), (x, y), TimeScale.SLOW, tau, IntegratorConfig(rtol=1e-11, atol=1e-13))
    assert np.allclose(got, ref, atol=1e-6)


def test_fast_collapse_matches_rk4_oracle():
    sys = van_der_pol(0.01)
    got = flow(sys, (-3.8, 2.0), TimeScale.SLOW, 0.05)
    rk4 = flow(sys, (-3.8, 2.0), TimeScale.SLOW, 0.05, IntegratorConfig(method="rk4", max_step=1e-4))
    assert np.allclose(got, rk4, atol=1e-9)
    # settled on the slow manifold, which sits eps*g/(g^2-1)^2 outside W+ to first order
    g = gamma(ManifoldBranch.W_PLUS, got[1])
    assert got[0] == pytest.approx(g + 0.01 * g / (g * g - 1) ** 2, abs=1e-4)
    assert got[1] == pytest.approx(2.0, abs=0.15)


def test_rk4_is_fourth_order():
    sys = van_der_pol(1.0)
    ref = np.array(scipy_flow(1.0, (2.0, 0.0), 2.0))
    errs = []
    for h in (0.02, 0.01, 0.005):
        s = flow(sys, (2.0, 0.0), TimeScale.FAST, 2.0, IntegratorConfig(method="rk4", max_step=h))
        errs.append(np.linalg.norm(np.array(s) - ref))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(13 < r < 19 for r in ratios), ratios


def test_rk4_requires_step():
    with pytest.raises(DomainError):
        IntegratorConfig(method="rk4")


def test_config_validation():
    with pytest.raises(DomainError):
        IntegratorConfig(rtol=0.0)
    with pytest.raises(DomainError):
        IntegratorConfig(max_steps=0)


def test_max_steps_gives_stiffness_error():
    with pytest.raises(StiffnessError) as info:
        flow(van_der_pol(1.0), (2.0, 0.0), TimeScale.FAST, 100.0, IntegratorConfig(max_steps=5))
    assert info.value.state is not None


def test_flow_many_matches_flow_and_is_batch_independent():
    sys = van_der_pol(0.1)
    rng = np.random.default_rng(5)
    P = rng.uniform(-3, 3, size=(12, 2))
    many = flow_many(sys, P, TimeScale.SLOW, 0.4)
    for p, q in zip(P, many):
        assert np.array_equal(flow(sys, p, TimeScale.SLOW, 0.4), q)
    assert np.array_equal(flow_many(sys, P[::-1], TimeScale.SLOW, 0.4), many[::-1])


def test_attractivity_toward_cycle(vdp1):
    sys, cyc = vdp1
    s = flow(sys, (4.0, 4.0), TimeScale.SLOW, 50.0)
    d, _ = cyc.coarse_distance([s])
    assert d[0] < 1e-3


def test_section_return_time_is_period(vdp1):
    sys, cyc = vdp1
    hit, t = integrate_until_section(sys, cyc.anchor, TimeScale.SLOW, PHASE_SECTION)
    assert t == pytest.approx(cyc.period_T, abs=1e-6)
    assert np.hypot(hit[0] - cyc.anchor[0], hit[1] - cyc.anchor[1]) < 1e-6


def test_section_direction_filter(vdp1):
    sys, cyc = vdp1
    # the cycle crosses y = 0 downward at the anchor; an upward-only section through it
    up = Section(lambda x, y: y, direction=+1, where=lambda x, y: x > 0)
    with pytest.raises(NoEventError):
        integrate_until_section(sys, cyc.anchor, TimeScale.SLOW, up, t_max=0.9 * cyc.period_T)
    down = Section(lambda x, y: y, direction=-1, where=lambda x, y: x > 0)
    _, t = integrate_until_section(sys, cyc.anchor, TimeScale.SLOW, down)
    assert t == pytest.approx(cyc.period_T, abs=1e-6)


def test_unreachable_section():
    far = Section(lambda x, y: x - 100.0, direction=0)
    with pytest.raises(NoEventError):
        integrate_until_section(van_der_pol(1.0), (0.01, 0.01), TimeScale.FAST, far, t_max=1.0)


def test_crossing_is_refined():
    hit, _ = integrate_until_section(van_der_pol(1.0), (2.0, 1.0), TimeScale.FAST, PHASE_SECTION)
    assert abs(hit[1]) < 1e-12


def test_dense_output_interpolates_endpoints():
    rhs = system_rhs(van_der_pol(1.0))
    seen = {}

    def grab(lanes, t_old, y_old, h, K, t_new, y_new):
        seen.setdefault("step", (y_old, h, K, y_new))

    solve_batch(rhs, np.array([[2.0], [0.0]]), 1.0, IntegratorConfig(), on_step=grab)
    y_old, h, K, y_new = seen["step"]
    assert np.allclose(dense_eval(y_old, h, K, np.array([0.0])), y_old, atol=1e-15)
    assert np.allclose(dense_eval(y_old, h, K, np.array([1.0])), y_new, atol=1e-13)
