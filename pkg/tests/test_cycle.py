import json
import math
import pickle

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from koopman_sp.cycle import (asymptotic_estimates, cycle_report, find_limit_cycle,
                              floquet_exponent_divergence, floquet_exponent_monodromy,
                              floquet_multipliers)
from koopman_sp.exceptions import DomainError, RangeError
from koopman_sp.model import TimeScale, van_der_pol
from koopman_sp.ode import IntegratorConfig, flow

from conftest import cached_cycle


@pytest.mark.parametrize("eps, T, w, nu, dnu", [
    (1.0, 6.66, 0.943, -1.06, 0.01),
    (0.1, 2.87, 2.19, None, None),
    (0.01, 1.91, 3.29, -163.0, 3.0),
])
def test_reference_values(eps, T, w, nu, dnu):
    _, cyc = cached_cycle(eps)
    assert cyc.period_T == pytest.approx(T, abs=0.01)
    assert cyc.omega == pytest.approx(w, abs=0.002 if eps == 1.0 else 0.01)
    if nu is not None:
        assert cyc.floquet_nu == pytest.approx(nu, abs=dnu)


def test_period_matches_scipy_event_oracle(vdp1):
    sys, cyc = vdp1

    def rhs(t, s):
        x, y = s
        return [x - x ** 3 / 3 + y, -x]

    def sec(t, s):
        return s[1]
    sec.direction = -1

    sol = solve_ivp(rhs, (0, 80), [2.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                    events=sec)
    hits = sol.t_events[0]
    xs = sol.y_events[0][:, 0]
    keep = xs > 0
    assert np.diff(hits[keep])[-1] == pytest.approx(cyc.period_T, abs=1e-7)
    assert xs[keep][-1] == pytest.approx(cyc.anchor.x, abs=1e-7)


def test_invariants(vdp1, vdp01):
    for sys, cyc in (vdp1, vdp01):
        assert cyc.omega * cyc.period_T == 2 * math.pi
        assert cyc.floquet_nu < 0
        assert cyc.residuals["return_map"] < 1e-12
        back = flow(sys, cyc.anchor, TimeScale.SLOW, cyc.period_T)
        assert math.hypot(back.x - cyc.anchor.x, back.y - cyc.anchor.y) < 1e-6
        assert cyc.samples.shape == (2048, 2)


def test_odd_symmetry(vdp1, vdp001):
    for _, cyc in (vdp1, vdp001):
        s = cyc.samples
        half = s.shape[0] // 2
        assert np.max(np.abs(s + np.roll(s, -half, axis=0))) < 1e-6


def test_divergence_agrees_with_monodromy(vdp1):
    sys, cyc = vdp1
    nu_d = floquet_exponent_divergence(sys, cyc)
    nu_m = floquet_exponent_monodromy(sys, cyc)
    assert abs(nu_d - nu_m) < 1e-4
    trivial, _ = floquet_multipliers(sys, cyc)
    assert abs(trivial - 1.0) < 1e-6


def test_augmented_integral_matches_quadrature(vdp01):
    _, cyc = vdp01
    assert cyc.residuals["nu_augmented"] == pytest.approx(cyc.floquet_nu, rel=1e-6)


def test_monodromy_refused_when_multiplier_underflows(vdp001):
    sys, cyc = vdp001
    with pytest.raises(RangeError):
        floquet_exponent_monodromy(sys, cyc)


def test_asymptotic_estimates():
    T0, w0, nu = asymptotic_estimates(0.01)
    assert T0 == pytest.approx(1.613706, abs=1e-6)
    # 2*pi / 1.613706 = 3.893638
    assert w0 == pytest.approx(3.893638, abs=1e-6)
    assert nu == pytest.approx(-178.87, abs=0.01)
    with pytest.raises(DomainError):
        asymptotic_estimates(0.0)


def test_singular_divergence_integral_closed_form():
    # int over the two slow branches of (1 - x^2) dt with dt = (x^2 - 1)/x dx, x from 2 to 1
    from scipy.integrate import quad
    val, _ = quad(lambda x: (1 - x * x) ** 2 / x, 1, 2)
    T0, _, _ = asymptotic_estimates(1.0)
    nu0 = -2 * val / T0
    assert nu0 == pytest.approx((-1.5 - 2 * math.log(2)) / T0, rel=1e-12)
    assert nu0 == pytest.approx(-1.7887, abs=1e-4)


def test_asymptotic_trend(vdp01, vdp001):
    _, w0, _ = asymptotic_estimates(1.0)
    _, c03 = cached_cycle(0.03)
    omegas = [vdp01[1].omega, c03.omega, vdp001[1].omega]
    assert omegas[0] < omegas[1] < omegas[2] < w0
    assert abs(omegas[2] - w0) < abs(omegas[1] - w0)
    _, _, nu_est = asymptotic_estimates(0.01)
    assert abs(vdp001[1].floquet_nu - nu_est) / abs(nu_est) < 0.15


def test_report_json_layout():
    rep = cycle_report(van_der_pol(1.0))
    d = json.loads(rep.to_json())
    assert list(d) == ["epsilon", "period", "omega", "nu", "nu_monodromy", "residuals"]
    assert all(math.isfinite(v) for v in d["residuals"].values())
    assert d["nu_monodromy"] == pytest.approx(d["nu"], abs=1e-4)


def test_report_nullable_monodromy():
    rep = cycle_report(van_der_pol(0.01))
    assert json.loads(rep.to_json())["nu_monodromy"] is None


def test_cycle_pickles(vdp1):
    _, cyc = vdp1
    clone = pickle.loads(pickle.dumps(cyc))
    pts = np.array([[1.0, 0.5], [-2.5, 1.0]])
    a = cyc.nearest(pts)
    b = clone.nearest(pts)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_nearest_recovers_cycle_time(vdp1):
    _, cyc = vdp1
    t = np.linspace(0.1, cyc.period_fast - 0.1, 17)
    pts = cyc.evaluate(t)[:2].T
    tt, d = cyc.nearest(pts)
    assert np.max(np.abs(d)) < 1e-10
    assert np.max(np.abs(tt - t)) < 1e-8


def test_tolerances_do_not_move_the_period():
    a = find_limit_cycle(van_der_pol(1.0), IntegratorConfig(rtol=1e-6, atol=1e-8))
    _, b = cached_cycle(1.0)
    assert a.period_T == pytest.approx(b.period_T, abs=1e-8)
