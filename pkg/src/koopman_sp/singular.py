"""The van der Pol oscillator in the singular limit eps -> 0.

On the attracting branches the slow motion is explicit in the coordinate
``r = varphi(|xbar|)`` with ``varphi(x) = ln x - x**2/2``: ``r`` simply grows
at unit rate. A branch ends at its fold point (``r = -1/2``), where the state
jumps to the drop point ``(+-2, +-2/3)`` of the other branch and starts over
from ``r = varphi(2)``. Every half period therefore lasts
``varphi(1) - varphi(2) = 3/2 - ln 2``.

Jump instants are right-continuous: exactly at a jump time the state is the
drop point.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_states
from .exceptions import DivergenceError, DomainError, RangeError
from .model import (ConstrainedState, ManifoldBranch, Region, State, TOL_W0, classify_region,
                    classify_regions, gamma, project_pi, van_der_pol)
from .ode import DIVERGED, IntegratorConfig, solve_batch

LN2 = math.log(2.0)
#: Jump times closer than this are treated as the jump itself.
SNAP = 1e-12


@dataclass(frozen=True)
class SingularConstants:
    """Period, frequency and Floquet exponent of the singular relaxation cycle."""

    @property
    def T0(self) -> float:
        return 3.0 - 2.0 * LN2

    @property
    def half_period(self) -> float:
        return 1.5 - LN2

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi / self.T0

    @property
    def nu0(self) -> float:
        return (-1.5 - 2.0 * LN2) / self.T0

    @property
    def jump_points(self):
        """``(J_-, J_+) = ((-1, 2/3), (1, -2/3))``."""
        return State(-1.0, 2.0 / 3.0), State(1.0, -2.0 / 3.0)

    @property
    def drop_points(self):
        """Landing points after jumping from ``J_-`` and ``J_+`` respectively."""
        return State(2.0, 2.0 / 3.0), State(-2.0, -2.0 / 3.0)


CONSTANTS = SingularConstants()
T0 = CONSTANTS.T0
HALF = CONSTANTS.half_period
OMEGA0 = CONSTANTS.omega0
NU0 = CONSTANTS.nu0


# -- varphi ------------------------------------------------------------------------

def _psi(w):
    # varphi(1 + w) + 1/2, written to keep precision near the fold
    return np.log1p(w) - w - 0.5 * w * w


def varphi(xbar):
    """``ln(xbar) - xbar**2/2`` for ``xbar >= 1``; strictly decreasing."""
    x = np.asarray(xbar, dtype=float)
    if np.any(~(x >= 1.0)):
        raise DomainError("varphi is defined for xbar >= 1")
    out = _psi(x - 1.0) - 0.5
    return float(out) if out.ndim == 0 else out


def varphi_inverse(v: float) -> float:
    """The unique ``x >= 1`` with ``varphi(x) = v``; ``v = -1/2`` gives 1."""
    v = float(v)
    if not math.isfinite(v):
        raise RangeError("varphi_inverse needs a finite argument")
    c = v + 0.5
    if c > 0.0:
        raise RangeError(f"v={v!r} exceeds -1/2, the maximum of varphi")
    if c == 0.0:
        return 1.0
    hi = math.sqrt(-2.0 * c)
    while _psi(hi) > c:
        hi *= 2.0
    w = brentq(lambda w: _psi(w) - c, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
               maxiter=200)
    # Newton polish in w
    d = -w * (2.0 + w) / (1.0 + w)
    if d != 0.0:
        w2 = w - (_psi(w) - c) / d
        if w2 > 0.0 and abs(_psi(w2) - c) < abs(_psi(w) - c):
            w = w2
    return 1.0 + w


# -- constrained flow -----------------------------------------------------------

def time_to_jump(cs: ConstrainedState) -> float:
    """Slow time until ``cs`` reaches the fold of its branch."""
    return -0.5 - varphi(abs(cs.xbar))


def _branch(sign: int) -> ManifoldBranch:
    return ManifoldBranch.W_PLUS if sign > 0 else ManifoldBranch.W_MINUS


def _on_branch(sign: int, r: float) -> ConstrainedState:
    return ConstrainedState(_branch(sign), sign * varphi_inverse(r))


def _segments_after_jump(u: float):
    """Split time ``u >= 0`` since the first jump into (jumps - 1, offset in segment)."""
    k = math.floor(u / HALF)
    rem = u - k * HALF
    if HALF - rem < SNAP:
        k += 1
        rem = 0.0
    return k, max(rem, 0.0)


def constrained_flow(cs: ConstrainedState, tau: float) -> ConstrainedState:
    """Flow of the constrained (slow) system with jumps at the folds."""
    tau = float(tau)
    if not (tau >= 0.0 and math.isfinite(tau)):
        raise DomainError("tau must be finite and non-negative")
    sigma = cs.sign
    r0 = varphi(abs(cs.xbar))
    ts = -0.5 - r0
    if tau == 0.0 and ts > SNAP:
        return cs
    if tau < ts - SNAP:
        return _on_branch(sigma, r0 + tau)
    k, rem = _segments_after_jump(max(tau - ts, 0.0))
    sign = sigma * (-1 if k % 2 == 0 else 1)
    return _on_branch(sign, varphi(2.0) + rem)


def fast_subsystem_flow(x0: float, y: float, t: float,
                        cfg: IntegratorConfig = IntegratorConfig(rtol=1e-12, atol=1e-14)) -> float:
    """Solve ``x' = x - x**3/3 + y`` at frozen ``y`` for fast time ``t``."""
    x0, y, t = float(x0), float(y), float(t)
    if not (t >= 0.0 and math.isfinite(t)):
        raise DomainError("t must be finite and non-negative")
    if classify_region((x0, y)) is Region.ON_W0:
        raise DomainError(f"({x0}, {y}) lies on the repelling branch W_0")
    if t == 0.0:
        return x0

    def rhs(u):
        return u - u * u * u / 3.0 + y

    res = solve_batch(rhs, np.array([[x0]]), t, cfg)
    if res.status[0] == DIVERGED or not np.isfinite(res.y[0, 0]):
        raise DivergenceError("layer problem diverged", t=float(res.t[0]), state=(x0, y))
    return float(res.y[0, 0])


def singular_flow(s, tau: float) -> State:
    """Concatenated flow: projection onto W_-+ followed by the constrained flow."""
    tau = float(tau)
    if not (tau >= 0.0 and math.isfinite(tau)):
        raise DomainError("tau must be finite and non-negative")
    x, y = float(s[0]), float(s[1])
    if classify_region((x, y)) is Region.ON_W0:
        raise DomainError(f"({x}, {y}) lies on W_0")
    if tau == 0.0:
        return State(x, y)
    return constrained_flow(project_pi((x, y)), tau).as_state()


# -- eigenfunctions ---------------------------------------------------------------

def slow_eigenfunction(cs: ConstrainedState, n: int = 1) -> complex:
    """``+-exp(i*omega0*varphi(|xbar|))`` on ``W_+`` / ``W_-``, raised to the power ``n``."""
    base = cmath.exp(1j * OMEGA0 * varphi(abs(cs.xbar)))
    val = base if cs.sign > 0 else -base
    return val ** n if n != 1 else val


def singular_eigenfunction(s) -> complex:
    """Phase eigenfunction of the singular flow; constant along horizontal fibres."""
    return slow_eigenfunction(project_pi(s))


def singular_eigenfunction_values(x, y) -> np.ndarray:
    """Vectorised :func:`singular_eigenfunction`; NaN on the W_0 band."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    codes = classify_regions(x.ravel(), y.ravel())
    out = np.full(codes.shape, complex(np.nan, np.nan))
    yv = y.ravel()
    cache = {}
    for i, (c, yy) in enumerate(zip(codes, yv)):
        if c == 0:
            continue
        key = (int(c), float(yy))
        if key not in cache:
            br = ManifoldBranch.W_PLUS if c > 0 else ManifoldBranch.W_MINUS
            cache[key] = slow_eigenfunction(ConstrainedState(br, gamma(br, yy)))
        out[i] = cache[key]
    return out.reshape(x.shape)


# -- observables on the attracting branches ---------------------------------------

def _one_sided_limit(g: Callable[[float], complex], offsets=(1e-3, 1e-4, 1e-5)) -> complex:
    """Extrapolate ``g(h)`` to ``h -> 0`` assuming ``g = L + a*sqrt(h) + b*h + ...``.

    The square-root term captures the approach through a fold, where the
    branch coordinate behaves like the square root of elapsed time.
    """
    h = np.asarray(offsets, dtype=float)
    vals = np.array([g(float(v)) for v in h], dtype=complex)
    A = np.column_stack([np.ones_like(h), np.sqrt(h), h])
    coef = np.linalg.solve(A, vals)
    return complex(coef[0])


def _scan_discontinuity(fn, branch, a: float, b: float, n: int = 2001, tol: float = 1e-6):
    """Return a location where ``fn`` jumps on ``[a, b]`` along ``branch``, or None."""
    xs = np.linspace(a, b, n)
    vals = np.array([fn(ConstrainedState(branch, float(v))) for v in xs], dtype=complex)
    diffs = np.abs(np.diff(vals))
    typical = np.median(diffs) if diffs.size else 0.0
    for i in np.argsort(-diffs)[:5]:
        if diffs[i] <= max(tol, 20 * typical):
            break
        lo, hi = xs[i], xs[i + 1]
        flo, fhi = vals[i], vals[i + 1]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = complex(fn(ConstrainedState(branch, mid)))
            if abs(fm - flo) > abs(fhi - fm):
                hi, fhi = mid, fm
            else:
                lo, flo = mid, fm
            if hi - lo < 1e-13:
                break
        if abs(fhi - flo) > tol:
            return 0.5 * (lo + hi)
    return None


@dataclass
class ObservableSample:
    """An observable on ``W_- u W_+`` that belongs to the continuous class.

    ``fn`` maps a :class:`ConstrainedState` to a number. Membership requires
    continuity on each branch and that the limit towards each fold equals the
    value at the drop point reached from it. Limits may be supplied; when
    omitted they are extrapolated numerically.
    """

    fn: Callable[[ConstrainedState], complex]
    limit_at_j_minus: Optional[complex] = None
    limit_at_j_plus: Optional[complex] = None
    tol: float = 1e-6
    x_max: float = 4.0
    check_continuity: bool = True
    name: str = "observable"

    def __post_init__(self):
        if self.limit_at_j_minus is None:
            self.limit_at_j_minus = self.branch_limit(ManifoldBranch.W_MINUS)
        if self.limit_at_j_plus is None:
            self.limit_at_j_plus = self.branch_limit(ManifoldBranch.W_PLUS)
        drop_minus = self(ConstrainedState(ManifoldBranch.W_PLUS, 2.0))
        drop_plus = self(ConstrainedState(ManifoldBranch.W_MINUS, -2.0))
        if abs(self.limit_at_j_minus - drop_minus) > self.tol:
            raise DomainError(f"{self.name}: limit at (-1, 2/3) differs from the value at (2, 2/3)")
        if abs(self.limit_at_j_plus - drop_plus) > self.tol:
            raise DomainError(f"{self.name}: limit at (1, -2/3) differs from the value at (-2, -2/3)")
        if self.check_continuity:
            for br, sgn in ((ManifoldBranch.W_PLUS, 1.0), (ManifoldBranch.W_MINUS, -1.0)):
                a, b = sorted((sgn * (1.0 + 1e-6), sgn * self.x_max))
                where = _scan_discontinuity(self.fn, br, a, b, tol=self.tol)
                if where is not None:
                    raise DomainError(f"{self.name}: discontinuous on {br.value} near xbar={where:.6g}")

    def __call__(self, cs: ConstrainedState) -> complex:
        return complex(self.fn(cs))

    def branch_limit(self, branch: ManifoldBranch) -> complex:
        sgn = 1.0 if branch is ManifoldBranch.W_PLUS else -1.0
        return _one_sided_limit(lambda h: self(ConstrainedState(branch, sgn * (1.0 + h))))


@dataclass
class CheckRecord:
    tau: float
    kind: str
    where: float
    left: complex
    right: complex

    @property
    def error(self) -> float:
        return abs(self.left - self.right)


@dataclass
class InvarianceReport:
    tol: float
    records: List[CheckRecord] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.records), default=0.0)

    @property
    def failures(self) -> List[CheckRecord]:
        return [r for r in self.records if not r.error <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def observable_invariance_check(f: ObservableSample, tau_list: Sequence[float],
                                tol: float = 1e-6) -> InvarianceReport:
    """Check that ``g = f o constrained_flow(., tau)`` stays in the continuous class.

    For each ``tau`` two families of limits are compared: left and right
    limits of ``g`` at the states that hit a fold exactly at ``tau``, and the
    limits of ``g`` towards each fold against ``g`` at the matching drop point.
    """
    report = InvarianceReport(tol)
    for tau in tau_list:
        tau = float(tau)

        def g(cs, tau=tau):
            return f(constrained_flow(cs, tau))

        # states whose n-th jump happens exactly at tau
        n = 0
        while tau - n * HALF >= 0.0:
            # first jump after tau - n*HALF, then n full segments
            xs = varphi_inverse(-0.5 - (tau - n * HALF))
            for br, sgn in ((ManifoldBranch.W_PLUS, 1), (ManifoldBranch.W_MINUS, -1)):
                if xs - 1e-3 <= 1.0:
                    continue
                left = _one_sided_limit(lambda h: g(ConstrainedState(br, sgn * (xs - h))))
                right = _one_sided_limit(lambda h: g(ConstrainedState(br, sgn * (xs + h))))
                report.records.append(CheckRecord(tau, f"pre-jump locus {br.value} n={n}",
                                                  sgn * xs, left, right))
            n += 1
        for br, sgn, drop in ((ManifoldBranch.W_MINUS, -1, ConstrainedState(ManifoldBranch.W_PLUS, 2.0)),
                              (ManifoldBranch.W_PLUS, 1, ConstrainedState(ManifoldBranch.W_MINUS, -2.0))):
            lim = _one_sided_limit(lambda h: g(ConstrainedState(br, sgn * (1.0 + h))))
            report.records.append(CheckRecord(tau, f"fold limit {br.value}", float(sgn),
                                              lim, g(drop)))
    return report


# -- spectrum -----------------------------------------------------------------------

@dataclass
class SpectrumReport:
    n: int
    eigenvalue: complex
    tol: float
    max_residual: float
    max_periodicity_error: float
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def random_constrained_states(count: int, rng: np.random.Generator, x_max: float = 3.0):
    """Uniform samples of ``|xbar|`` in (1, x_max] on a random branch."""
    out = []
    for _ in range(count):
        mag = 1.0 + (x_max - 1.0) * (1.0 - rng.random())
        br = ManifoldBranch.W_PLUS if rng.random() < 0.5 else ManifoldBranch.W_MINUS
        out.append(ConstrainedState(br, mag if br is ManifoldBranch.W_PLUS else -mag))
    return out


def spectrum_check(n: int, sample_count: int = 100, tau_list: Sequence[float] = (0.1, 1.0, T0),
                   seed: int = 0, tol: float = 1e-9, periodicity_tol: float = 1e-12) -> SpectrumReport:
    """Check ``(phi_bar)**n`` against eigenvalue ``i*n*omega0`` and the eventual T0-periodicity."""
    rng = np.random.default_rng(seed)
    lam = 1j * n * OMEGA0
    states = random_constrained_states(sample_count, rng)
    worst = 0.0
    worst_p = 0.0
    failures = []
    for cs in states:
        base = slow_eigenfunction(cs, n)
        for tau in tau_list:
            lhs = slow_eigenfunction(constrained_flow(cs, tau), n)
            res = abs(lhs - cmath.exp(lam * tau) * base)
            worst = max(worst, res)
            if not res < tol:
                failures.append(f"eigen-relation n={n} cs={cs} tau={tau}: {res:.3e}")
        ts = time_to_jump(cs)
        for extra in (0.0, 0.3, 1.1, T0):
            tau = ts + extra
            a = constrained_flow(cs, tau)
            b = constrained_flow(cs, tau + T0)
            err = abs(a.xbar - b.xbar) if a.branch is b.branch else math.inf
            worst_p = max(worst_p, err)
            if not err <= periodicity_tol:
                failures.append(f"periodicity cs={cs} tau={tau}: {err:.3e}")
    return SpectrumReport(n, lam, tol, worst, worst_p, failures)


class SingularPhaseEigenfunction(TransformerMixin, BaseEstimator):
    """Phase eigenfunction of the singular flow as a transformer.

    ``transform`` returns ``[Re, Im]``; states on the W_0 band give NaN.
    There is nothing to fit; ``fit`` records the singular constants.
    """

    def __init__(self, n: int = 1):
        self.n = n

    def fit(self, X=None, y=None):
        if X is not None:
            check_states(X)
        self.period_ = T0
        self.omega_ = OMEGA0
        self.floquet_exponent_ = NU0
        self.eigenvalue_ = complex(0.0, self.n * OMEGA0)
        self.n_features_in_ = 2
        return self

    def evaluate(self, X):
        P = check_states(X)
        v = singular_eigenfunction_values(P[:, 0], P[:, 1])
        return v ** self.n if self.n != 1 else v

    def transform(self, X):
        v = self.evaluate(X)
        return np.column_stack([v.real, v.imag])
