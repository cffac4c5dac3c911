import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_sp.exceptions import DomainError, RangeError
from koopman_sp.model import ConstrainedState, ManifoldBranch, State, project_pi
from koopman_sp import singular as sg
from koopman_sp.verification import invariance_members

from conftest import cached_cycle

WP, WM = ManifoldBranch.W_PLUS, ManifoldBranch.W_MINUS


def _bisect(f, lo, hi, n=200):
    flo = f(lo)
    for _ in range(n):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _phi_oracle(x):
    return math.log(x) - x * x / 2


def _inverse_oracle(v):
    return _bisect(lambda x: _phi_oracle(x) - v, 1.0, 50.0)


def _gamma_plus_oracle(y):
    # largest root of x^3/3 - x - y
    return _bisect(lambda x: x ** 3 / 3 - x - y, 1.0, 10.0)


# -- constants ---------------------------------------------------------------------

def test_constants_from_exact_expressions():
    assert sg.T0 == 3 - 2 * math.log(2)
    assert sg.HALF == pytest.approx(sg.T0 / 2, abs=1e-15)
    assert sg.OMEGA0 * sg.T0 == pytest.approx(2 * math.pi, abs=1e-15)
    assert sg.NU0 == pytest.approx(-1.7887, abs=1e-4)
    jm, jp = sg.CONSTANTS.jump_points
    dm, dp = sg.CONSTANTS.drop_points
    assert (jm, jp) == (State(-1.0, 2 / 3), State(1.0, -2 / 3))
    assert (dm, dp) == (State(2.0, 2 / 3), State(-2.0, -2 / 3))


# -- varphi --------------------------------------------------------------------------

def test_varphi_values():
    assert sg.varphi(1 + 1e-12) == pytest.approx(-0.5, abs=1e-12)
    assert sg.varphi(2.0) == pytest.approx(math.log(2) - 2, abs=1e-15)
    assert sg.varphi(2.0) + sg.HALF == pytest.approx(-0.5, abs=1e-15)
    with pytest.raises(DomainError):
        sg.varphi(0.9)
    with pytest.raises(DomainError):
        sg.varphi(-2.0)


def test_varphi_decreasing():
    xs = np.linspace(1.0, 6.0, 1001)
    assert np.all(np.diff(sg.varphi(xs)) < 0)


def test_varphi_inverse_values():
    assert sg.varphi_inverse(-0.5) == 1.0
    assert sg.varphi_inverse(math.log(2) - 2) == pytest.approx(2.0, abs=1e-14)
    # ln x - x^2/2 = -3 has its root near 2.84442
    got = sg.varphi_inverse(-3.0)
    assert got == pytest.approx(_inverse_oracle(-3.0), abs=1e-12)
    assert got == pytest.approx(2.84442, abs=1e-5)
    with pytest.raises(RangeError):
        sg.varphi_inverse(-0.4)
    with pytest.raises(RangeError):
        sg.varphi_inverse(math.nan)


@settings(max_examples=200, deadline=None)
@given(st.floats(-60.0, -0.5 - 1e-15))
def test_varphi_inverse_roundtrip(v):
    x = sg.varphi_inverse(v)
    assert x >= 1.0
    assert abs(sg.varphi(x) - v) < 1e-13


# -- constrained flow ----------------------------------------------------------------

def test_constrained_flow_examples():
    drop = ConstrainedState(WP, 2.0)
    assert sg.constrained_flow(drop, 0.0) == drop
    assert sg.constrained_flow(drop, sg.HALF) == ConstrainedState(WM, -2.0)
    end = sg.constrained_flow(drop, sg.HALF).as_state()
    assert end.x == -2.0 and end.y == pytest.approx(-2 / 3, abs=1e-15)
    assert sg.constrained_flow(drop, sg.T0).xbar == pytest.approx(2.0, abs=1e-12)
    got = sg.constrained_flow(ConstrainedState(WP, 3.0), 0.5)
    assert got.branch is WP
    assert got.xbar == pytest.approx(_inverse_oracle(_phi_oracle(3.0) + 0.5), abs=1e-12)
    assert got.xbar == pytest.approx(2.80450, abs=1e-5)


def test_jump_timing():
    drop = ConstrainedState(WP, 2.0)
    assert sg.time_to_jump(drop) == pytest.approx(sg.HALF, abs=1e-12)
    just_before = sg.constrained_flow(drop, sg.HALF - 1e-9)
    assert just_before.branch is WP and just_before.xbar < 1.001
    # right-continuous: at the jump instant the state is already the drop point
    assert sg.constrained_flow(drop, sg.HALF).branch is WM


def test_minus_branch_mirrors_plus():
    for tau in (0.1, 0.7, 1.3, 2.9):
        a = sg.constrained_flow(ConstrainedState(WP, 2.5), tau)
        b = sg.constrained_flow(ConstrainedState(WM, -2.5), tau)
        assert a.xbar == -b.xbar and a.branch is not b.branch


def test_negative_time_rejected():
    with pytest.raises(DomainError):
        sg.constrained_flow(ConstrainedState(WP, 2.0), -0.1)


_states = st.builds(lambda b, m: ConstrainedState(WP, m) if b else ConstrainedState(WM, -m),
                    st.booleans(), st.floats(1.0 + 1e-9, 4.0))


@settings(max_examples=500, deadline=None)
@given(_states, st.floats(1e-9, 5.0), st.floats(1e-9, 5.0))
def test_semigroup(cs, t1, t2):
    a = sg.constrained_flow(sg.constrained_flow(cs, t1), t2)
    b = sg.constrained_flow(cs, t1 + t2)
    assert a.branch is b.branch
    assert abs(a.xbar - b.xbar) < 1e-12


@settings(max_examples=200, deadline=None)
@given(_states, st.floats(0.0, 4.0))
def test_eventual_periodicity(cs, extra):
    tau = sg.time_to_jump(cs) + extra
    a = sg.constrained_flow(cs, tau)
    b = sg.constrained_flow(cs, tau + sg.T0)
    assert a.branch is b.branch
    assert abs(a.xbar - b.xbar) < 1e-12


# -- fast subsystem --------------------------------------------------------------------

def test_fast_subsystem_equilibrium_is_fixed():
    g = _gamma_plus_oracle(1.0)
    assert sg.fast_subsystem_flow(g, 1.0, 30.0) == pytest.approx(g, abs=1e-10)


def test_fast_subsystem_convergence():
    got = sg.fast_subsystem_flow(-3.8, 2.0, 50.0)
    assert got == pytest.approx(_gamma_plus_oracle(2.0), abs=1e-8)
    assert got == pytest.approx(2.35530, abs=1e-5)
    assert sg.fast_subsystem_flow(0.5, 0.0, 60.0) == pytest.approx(math.sqrt(3), abs=1e-8)
    assert sg.fast_subsystem_flow(-0.5, 0.0, 60.0) == pytest.approx(-math.sqrt(3), abs=1e-8)


def test_fast_subsystem_rejects_w0():
    with pytest.raises(DomainError):
        sg.fast_subsystem_flow(0.0, 0.0, 1.0)


# -- singular flow -------------------------------------------------------------------

def test_singular_flow_examples():
    assert sg.singular_flow((-3.8, 2.0), 0.0) == State(-3.8, 2.0)
    s = sg.singular_flow((-3.8, 2.0), 1e-14)
    assert s.x == pytest.approx(2.35530, abs=1e-5) and s.y == pytest.approx(2.0, abs=1e-10)
    with pytest.raises(DomainError):
        sg.singular_flow((0.0, 0.0), 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(-4, 4), st.floats(-2, 2), st.floats(1e-6, 3.0), st.floats(1e-6, 3.0))
def test_singular_flow_semigroup(x, y, t1, t2):
    try:
        a = sg.singular_flow(sg.singular_flow((x, y), t1), t2)
    except DomainError:
        return
    b = sg.singular_flow((x, y), t1 + t2)
    if (a.x > 0) == (b.x > 0):
        assert abs(a.x - b.x) < 1e-12


# -- eigenfunctions ---------------------------------------------------------------------

def test_slow_eigenfunction_examples():
    a = sg.slow_eigenfunction(ConstrainedState(WP, 2.0))
    assert a == pytest.approx(cmath.exp(1j * sg.OMEGA0 * (math.log(2) - 2)), abs=1e-14)
    assert cmath.phase(a) == pytest.approx(-5.0885 + 2 * math.pi, abs=1e-4)
    b = sg.slow_eigenfunction(ConstrainedState(WM, -2.0))
    assert b == pytest.approx(-a, abs=1e-15)


def test_slow_eigen_relation_across_jumps():
    rng = np.random.default_rng(4)
    worst = 0.0
    for cs in sg.random_constrained_states(200, rng):
        ts = sg.time_to_jump(cs)
        for tau in (0.1, sg.HALF, sg.T0, ts - 1e-6 if ts > 1e-6 else 0.0, ts + 1e-6, ts):
            lhs = sg.slow_eigenfunction(sg.constrained_flow(cs, tau))
            worst = max(worst, abs(lhs - cmath.exp(1j * sg.OMEGA0 * tau) * sg.slow_eigenfunction(cs)))
    assert worst < 1e-9


def test_singular_eigenfunction_examples():
    v = sg.singular_eigenfunction((-3.8, 2.0))
    phi = _phi_oracle(_gamma_plus_oracle(2.0))
    assert phi == pytest.approx(-1.9170, abs=1e-4)
    assert v == pytest.approx(cmath.exp(1j * sg.OMEGA0 * phi), abs=1e-12)
    assert sg.OMEGA0 * phi == pytest.approx(-7.4642, abs=2e-4)
    assert sg.singular_eigenfunction((0.0, 2.0)) == v
    with pytest.raises(DomainError):
        sg.singular_eigenfunction((0.0, 0.0))


def test_level_sets_are_fibres():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x, y = rng.uniform([-4, -2], [4, 2])
        try:
            p = project_pi((x, y))
        except DomainError:
            continue
        xs = rng.uniform(-4, 4, size=8)
        same = [sg.singular_eigenfunction((u, y)) for u in xs
                if not _on_w0(u, y) and project_pi((u, y)) == p]
        assert all(v == sg.slow_eigenfunction(p) for v in same)


def _on_w0(x, y):
    from koopman_sp.model import Region, classify_region
    return classify_region((x, y)) is Region.ON_W0


def test_singular_eigen_relation_concatenated_flow():
    rng = np.random.default_rng(6)
    worst = 0.0
    for x, y in rng.uniform([-4, -2], [4, 2], size=(100, 2)):
        base = sg.singular_eigenfunction((x, y))
        for tau in (0.1, 1.0, sg.HALF, sg.T0):
            got = sg.singular_eigenfunction(sg.singular_flow((x, y), tau))
            worst = max(worst, abs(got - cmath.exp(1j * sg.OMEGA0 * tau) * base))
    assert worst < 1e-9


def test_vectorised_values_match_scalar():
    rng = np.random.default_rng(7)
    P = rng.uniform([-4, -2], [4, 2], size=(200, 2))
    v = sg.singular_eigenfunction_values(P[:, 0], P[:, 1])
    for (x, y), got in zip(P, v):
        assert got == sg.singular_eigenfunction((x, y))
    assert np.isnan(sg.singular_eigenfunction_values(np.array([0.0]), np.array([0.0]))[0])


# -- nonsmoothness signature ----------------------------------------------------------

def test_constant_in_x_and_jump_across_w0():
    for y in (-0.5, 0.0, 0.3, 0.6):
        left = [sg.singular_eigenfunction((x, y)) for x in (-3.5, -2.5)]
        right = [sg.singular_eigenfunction((x, y)) for x in (2.5, 3.5)]
        assert left[0] == left[1] and right[0] == right[1]
        assert abs(left[0] - right[0]) > 0.1


def test_y_derivative_breaks_across_fold_line():
    # at x = -3 the fibre switches from W_- (below y = 2/3) to W_+ (above)
    h, y0 = 1e-6, 2 / 3
    ang = lambda y: cmath.phase(sg.singular_eigenfunction((-3.0, y)))
    below = (ang(y0 - h) - ang(y0 - 2 * h)) / h
    above = (ang(y0 + 2 * h) - ang(y0 + h)) / h
    assert abs(sg.singular_eigenfunction((-3.0, y0 - 1e-9)) - sg.singular_eigenfunction((-3.0, y0 + 1e-9))) < 1e-6
    # d varphi(|gamma(y)|)/dy = 1/gamma(y): near 1 below the line, near -1/2 above
    g_minus = _bisect(lambda x: x ** 3 / 3 - x - (y0 - 1.5 * h), -1.0, -10.0)
    g_plus = _gamma_plus_oracle(y0 + 1.5 * h)
    assert below == pytest.approx(-sg.OMEGA0 / g_minus, rel=1e-4)
    assert above == pytest.approx(-sg.OMEGA0 / g_plus, rel=1e-4)
    assert below == pytest.approx(sg.OMEGA0, rel=0.01)
    assert above == pytest.approx(-sg.OMEGA0 / 2, rel=0.01)


def test_frequency_approaches_singular_limit():
    _, c1 = cached_cycle(0.1)
    _, c2 = cached_cycle(0.01)
    assert abs(c2.omega - sg.OMEGA0) < abs(c1.omega - sg.OMEGA0)


# -- spectrum -------------------------------------------------------------------------

@pytest.mark.parametrize("n", range(-3, 4))
def test_spectrum(n):
    rep = sg.spectrum_check(n, 100, (0.1, 1.0, sg.T0))
    assert rep.passed, rep.failures[:3]
    assert rep.eigenvalue == 1j * n * sg.OMEGA0
    assert rep.max_residual < 1e-9
    if n == 0:
        assert rep.max_residual == 0


# -- observable class -------------------------------------------------------------------

@pytest.mark.parametrize("member", invariance_members(), ids=lambda m: m.name)
def test_invariance_members(member):
    rep = sg.observable_invariance_check(member, (0.1, sg.HALF, sg.T0, 1.7, 2.6), tol=1e-6)
    assert rep.passed, [(r.kind, r.where, r.error) for r in rep.failures]
    assert any(r.kind.startswith("pre-jump") for r in rep.records)


def test_constant_observable_exact():
    f = sg.ObservableSample(lambda cs: 1.5, name="const")
    rep = sg.observable_invariance_check(f, (0.3, 2.0))
    assert rep.max_error < 1e-12


def test_indicator_rejected():
    with pytest.raises(DomainError):
        sg.ObservableSample(lambda cs: 1.0 if cs.xbar > 2.5 else 0.0, name="indicator")


def test_fold_mismatch_rejected():
    # continuous on each branch but the fold limit does not match the drop point
    with pytest.raises(DomainError):
        sg.ObservableSample(lambda cs: cs.xbar, name="coordinate")


def test_invariance_check_detects_non_member():
    f = sg.ObservableSample(lambda cs: cs.xbar, limit_at_j_minus=2.0, limit_at_j_plus=-2.0,
                            check_continuity=False, tol=10.0, name="forced")
    rep = sg.observable_invariance_check(f, (0.4,), tol=1e-6)
    assert not rep.passed


# -- estimator ----------------------------------------------------------------------------

def test_singular_estimator():
    est = sg.SingularPhaseEigenfunction(n=2).fit()
    assert est.eigenvalue_ == 2j * sg.OMEGA0
    out = est.transform([[-3.8, 2.0], [0.0, 0.0]])
    assert out.shape == (2, 2)
    v = sg.singular_eigenfunction((-3.8, 2.0)) ** 2
    assert complex(*out[0]) == pytest.approx(v, abs=1e-14)
    assert np.all(np.isnan(out[1]))
