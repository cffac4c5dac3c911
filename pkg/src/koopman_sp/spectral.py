"""Principal Koopman eigenfunctions of a slow-fast oscillator.

The phase eigenfunction ``phi_iw = exp(i*theta)`` (eigenvalue ``i*omega``) and
the amplitude eigenfunction ``phi_nu`` (eigenvalue ``nu``) are evaluated by
time of flight: each state is integrated until it comes within ``capture_tol``
of the cycle, the foot point on the cycle supplies the asymptotic phase and
the transverse deviation, and the elapsed time is divided out through the
eigen-relation ``phi(S_t s) = exp(lambda t) phi(s)``. The amplitude is kept as
``(log|phi_nu|, sign)`` because ``|nu| T`` reaches several hundred.

A Fourier-average evaluation of the phase is provided as an independent route.
"""

from __future__ import annotations

import math
from functools import partial
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_states
from .cycle import LimitCycle, find_limit_cycle
from .exceptions import DomainError
from .fields import Field, GridSpec
from .model import (Y_FOLD, ManifoldBranch, SlowFastSystem, classify_regions, gamma,
                    van_der_pol)
from .ode import IntegratorConfig, dense_eval, solve_batch, system_rhs

TIME_OF_FLIGHT = "time_of_flight"
FOURIER_AVERAGE = "fourier_average"
PHASE_METHODS = (TIME_OF_FLIGHT, FOURIER_AVERAGE)

#: Deviations below this are treated as lying on the cycle.
ON_CYCLE = 1e-12
#: Per-lane step budget numerator: max_steps = STEP_BUDGET / epsilon.
STEP_BUDGET = 1e4


def default_capture_tol(epsilon: float) -> float:
    return 1e-6 if epsilon > 0.1 else 1e-7


def _locate_capture(cycle, y_old, h, K, t_foot, d_new, delta, iters=10):
    """Fraction of the step at which ``|d|`` first drops to ``delta``.

    Illinois regula falsi on ``|d(theta)| - delta`` over the dense output.
    The returned point always satisfies ``|d| <= delta``.
    """
    Tf = cycle.period_fast
    ts_lo, d_lo = cycle.nearest(y_old.T, t_foot - h, iters=4)
    lo = np.zeros(h.size)
    hi = np.ones(h.size)
    f_lo = np.abs(d_lo) - delta
    f_hi = np.abs(d_new) - delta
    ts_hi, dd_hi = t_foot, d_new
    done = f_lo <= 0
    hi = np.where(done, 0.0, hi)
    ts_hi = np.where(done, ts_lo, ts_hi)
    dd_hi = np.where(done, d_lo, dd_hi)
    side = np.zeros(h.size, dtype=np.int8)
    for _ in range(iters):
        if np.all(done):
            break
        den = f_lo - f_hi
        mid = np.where(den > 0, (lo * -f_hi + hi * f_lo) / np.where(den > 0, den, 1.0), 0.5 * (lo + hi))
        mid = np.clip(mid, lo + 1e-3 * (hi - lo), hi - 1e-3 * (hi - lo))
        p = dense_eval(y_old, h, K, mid)
        dt = np.mod(ts_hi - ts_lo + 0.5 * Tf, Tf) - 0.5 * Tf
        ts, d = cycle.nearest(p.T, ts_lo + dt * (mid - lo) / np.maximum(hi - lo, 1e-300), iters=3)
        f = np.abs(d) - delta
        inside = (f <= 0) & ~done
        outside = (f > 0) & ~done
        # Illinois: halve the retained endpoint's value when the same side repeats
        f_lo = np.where(inside & (side == 1), 0.5 * f_lo, f_lo)
        f_hi = np.where(outside & (side == -1), 0.5 * f_hi, f_hi)
        hi, f_hi = np.where(inside, mid, hi), np.where(inside, f, f_hi)
        ts_hi, dd_hi = np.where(inside, ts, ts_hi), np.where(inside, d, dd_hi)
        lo, f_lo = np.where(outside, mid, lo), np.where(outside, f, f_lo)
        ts_lo = np.where(outside, ts, ts_lo)
        side = np.where(inside, 1, np.where(outside, -1, side)).astype(np.int8)
        done = done | (np.abs(f) <= 1e-6 * delta) | (hi - lo <= 1e-12)
    p = dense_eval(y_old, h, K, hi)
    ts, d = cycle.nearest(p.T, ts_hi)
    return hi, ts, d


def capture(sys: SlowFastSystem, cycle: LimitCycle, points, capture_tol: float,
            cfg: IntegratorConfig = IntegratorConfig(), budget_periods: float = 50.0):
    """Integrate every point until it is within ``capture_tol`` of the cycle.

    Returns ``(t_elapsed, t_foot, deviation)`` in fast time; lanes that never
    got close within the budget hold NaN.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    n = P.shape[0]
    t_el = np.full(n, np.nan)
    t_foot = np.full(n, np.nan)
    dev = np.full(n, np.nan)
    if n == 0:
        return t_el, t_foot, dev
    gap = cycle.max_gap
    delta = float(capture_tol)

    dk, tk = cycle.coarse_distance(P)
    lb = dk - gap
    start_hit = np.zeros(n, dtype=bool)
    near = np.flatnonzero(lb <= delta)
    if near.size:
        ts, d = cycle.nearest(P[near], tk[near])
        lb[near] = np.abs(d)
        hit = np.abs(d) <= delta
        sel = near[hit]
        t_el[sel] = 0.0
        t_foot[sel] = ts[hit]
        dev[sel] = d[hit]
        start_hit[sel] = True

    def on_step(lanes, t_old, y_old, h, K, t_new, y_new):
        speed = np.max(np.hypot(K[:, 0, :], K[:, 1, :]), axis=0)
        lb[lanes] -= 1.1 * h * speed
        chk = np.flatnonzero(lb[lanes] <= delta)
        if chk.size == 0:
            return None
        L = lanes[chk]
        pts = y_new[:, chk].T
        dk, tk = cycle.coarse_distance(pts)
        lb[L] = dk - gap
        close = np.flatnonzero(dk - gap <= delta)
        if close.size == 0:
            return None
        ts, d = cycle.nearest(pts[close], tk[close])
        lb[L[close]] = np.abs(d)
        inside = np.abs(d) <= delta
        hit = close[inside]
        if hit.size == 0:
            return None
        sub = chk[hit]
        th, ts, d = _locate_capture(cycle, y_old[:, sub], h[sub], K[:, :, sub],
                                    ts[inside], d[inside], delta)
        lanes_hit = lanes[sub]
        t_el[lanes_hit] = t_old[sub] + th * h[sub]
        t_foot[lanes_hit] = ts
        dev[lanes_hit] = d
        stop = np.zeros(lanes.size, dtype=bool)
        stop[sub] = True
        return stop

    run = np.flatnonzero(~start_hit)
    if run.size:
        lcfg = IntegratorConfig(rtol=cfg.rtol, atol=cfg.atol, max_step=cfg.max_step,
                                max_steps=min(cfg.max_steps, int(STEP_BUDGET / sys.epsilon)))
        # on_step sees lane indices of the sub-batch; map them back
        idx = run

        def on_sub(lanes, *args):
            full = idx[lanes]
            return on_step(full, *args)

        solve_batch(system_rhs(sys), P[run].T.copy(), budget_periods * cycle.period_fast,
                    lcfg, on_step=on_sub)
    return t_el, t_foot, dev


def phase_from_capture(cycle: LimitCycle, t_el, t_foot):
    theta = cycle.omega * cycle.epsilon * (t_foot - t_el)
    return np.exp(1j * theta)


def amplitude_from_capture(cycle: LimitCycle, t_el, t_foot, dev):
    """``(log|phi_nu|, sign)`` from captured lanes; on-cycle points give (-inf, 0)."""
    t_el = np.asarray(t_el, dtype=float)
    ok = ~np.isnan(t_el)
    log_abs = np.full(t_el.shape, np.nan)
    sign = np.full(t_el.shape, np.nan)
    if np.any(ok):
        d = dev[ok]
        with np.errstate(divide="ignore"):
            la = (np.log(np.abs(d)) + cycle.log_gain(t_foot[ok])
                  - cycle.floquet_nu * cycle.epsilon * t_el[ok])
        on = (np.abs(d) < ON_CYCLE) & (t_el[ok] == 0)
        la = np.where(on, -np.inf, la)
        log_abs[ok] = la
        sign[ok] = np.where(on, 0.0, np.sign(d))
    return log_abs, sign


def fourier_average_phase(sys: SlowFastSystem, cycle: LimitCycle, points,
                          cfg: IntegratorConfig = IntegratorConfig(),
                          burn_in_periods: int = 10, average_periods: int = 2):
    """Phase eigenfunction via the Fourier average of ``f(x, y) = x + i*y``.

    The transient part of the trajectory is skipped and the weighted average
    is taken over whole periods in absolute time, then divided by the same
    average started at the anchor (the cycle's first Fourier coefficient).
    """
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    allP = np.vstack([P, np.array(cycle.anchor)[None, :]])
    Tf = cycle.period_fast
    t0 = burn_in_periods * Tf
    res = solve_batch(system_rhs(sys), allP.T.copy(), t0, cfg)
    wf = cycle.omega * cycle.epsilon
    n = allP.shape[0]
    Y = np.vstack([res.y, np.full((1, n), t0), np.zeros((2, n))])

    def rhs(Y):
        x, y, s = Y[0], Y[1], Y[2]
        fx, fy = sys.fast_rhs(x, y)
        c = np.cos(wf * s)
        sn = np.sin(wf * s)
        return np.stack([fx, fy, np.ones_like(s), x * c + y * sn, y * c - x * sn])

    res2 = solve_batch(rhs, Y, t0 + average_periods * Tf, cfg, t0=t0)
    q = res2.y[3] + 1j * res2.y[4]
    bad = (res.status != 1) | (res2.status != 1)
    phi = q[:-1] / q[-1]
    phi = phi / np.abs(phi)
    phi[bad[:-1]] = np.nan + 1j * np.nan
    return phi


def _excluded(sys, P):
    """Mask of states outside the evaluation domain (the equilibrium at the origin)."""
    return (P[:, 0] == 0.0) & (P[:, 1] == 0.0)


def phase_values(sys, cycle, points, method=TIME_OF_FLIGHT, cfg=IntegratorConfig(),
                 capture_tol=None, budget_periods=50.0):
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.full(P.shape[0], np.nan + 1j * np.nan)
    keep = ~_excluded(sys, P)
    if not np.any(keep):
        return out
    if method == TIME_OF_FLIGHT:
        tol = capture_tol or default_capture_tol(sys.epsilon)
        t_el, t_foot, _ = capture(sys, cycle, P[keep], tol, cfg, budget_periods)
        out[keep] = phase_from_capture(cycle, t_el, t_foot)
    elif method == FOURIER_AVERAGE:
        out[keep] = fourier_average_phase(sys, cycle, P[keep], cfg)
    else:
        raise DomainError(f"unknown phase method {method!r}")
    return out


def amplitude_cfg(cfg: IntegratorConfig) -> IntegratorConfig:
    """Tolerances for amplitude capture.

    The deviation read at capture is only ``capture_tol`` in size, so the
    local error of each step has to sit well below it.
    """
    return IntegratorConfig(rtol=min(cfg.rtol, 1e-11), atol=min(cfg.atol, 1e-13),
                            max_step=cfg.max_step, max_steps=cfg.max_steps)


def amplitude_values(sys, cycle, points, cfg=IntegratorConfig(), capture_tol=None,
                     budget_periods=50.0):
    cfg = amplitude_cfg(cfg)
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    log_abs = np.full(P.shape[0], np.nan)
    sign = np.full(P.shape[0], np.nan)
    keep = ~_excluded(sys, P)
    if np.any(keep):
        tol = capture_tol or default_capture_tol(sys.epsilon)
        t_el, t_foot, dev = capture(sys, cycle, P[keep], tol, cfg, budget_periods)
        log_abs[keep], sign[keep] = amplitude_from_capture(cycle, t_el, t_foot, dev)
    return log_abs, sign


def _check_point(s):
    x, y = float(s[0]), float(s[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DomainError("state must be finite")
    if x == 0.0 and y == 0.0:
        raise DomainError("the equilibrium (0, 0) is excluded from the basin")
    return x, y


def phase_at(sys: SlowFastSystem, cycle: LimitCycle, s, method: str = TIME_OF_FLIGHT,
             cfg: IntegratorConfig = IntegratorConfig()) -> complex:
    """``phi_iw(s)``; NaN when the evaluation budget was exhausted."""
    x, y = _check_point(s)
    return complex(phase_values(sys, cycle, [[x, y]], method, cfg)[0])


def amplitude_at(sys: SlowFastSystem, cycle: LimitCycle, s,
                 cfg: IntegratorConfig = IntegratorConfig()):
    """``(log|phi_nu(s)|, sign)``; ``(-inf, 0)`` on the cycle."""
    x, y = _check_point(s)
    la, sg = amplitude_values(sys, cycle, [[x, y]], cfg)
    return float(la[0]), float(sg[0])


# -- grids ---------------------------------------------------------------------

def _phase_chunk(sys, cycle, method, cfg, capture_tol, budget, xs, ys):
    return phase_values(sys, cycle, np.column_stack([xs, ys]), method, cfg, capture_tol, budget)


def _amplitude_chunk(sys, cycle, cfg, capture_tol, budget, xs, ys):
    la, _ = amplitude_values(sys, cycle, np.column_stack([xs, ys]), cfg, capture_tol, budget)
    return la


def _sign_chunk(sys, cycle, cfg, capture_tol, budget, xs, ys):
    _, sg = amplitude_values(sys, cycle, np.column_stack([xs, ys]), cfg, capture_tol, budget)
    return sg


def eigenfunction_grid(sys: SlowFastSystem, cycle: LimitCycle, grid: GridSpec, which: str = "phase",
                       cfg: IntegratorConfig = IntegratorConfig(), *, method: str = TIME_OF_FLIGHT,
                       capture_tol: Optional[float] = None, budget_periods: float = 50.0,
                       workers: int = 1, chunk_size: Optional[int] = None) -> Field:
    """Evaluate a principal eigenfunction on every grid node.

    ``which="phase"`` gives a complex field; ``which="amplitude"`` a real field
    of ``log|phi_nu|`` (``which="amplitude_sign"`` its sign). Nodes on the W_0
    band (van der Pol), the origin and unconverged nodes hold NaN.
    """
    from .grid_io import sweep

    tol = capture_tol or default_capture_tol(sys.epsilon)
    if which == "phase":
        fn = partial(_phase_chunk, sys, cycle, method, cfg, tol, budget_periods)
        dtype, lam, obs = complex, complex(0.0, cycle.omega), "phase"
    elif which == "amplitude":
        fn = partial(_amplitude_chunk, sys, cycle, cfg, tol, budget_periods)
        dtype, lam, obs = float, complex(cycle.floquet_nu), "log_abs"
    elif which == "amplitude_sign":
        fn = partial(_sign_chunk, sys, cycle, cfg, tol, budget_periods)
        dtype, lam, obs = float, complex(cycle.floquet_nu), "sign"
    else:
        raise DomainError(f"unknown eigenfunction {which!r}")

    mask = None
    if sys.is_van_der_pol:
        X, Y = grid.mesh()
        mask = classify_regions(X.ravel(), Y.ravel()) == 0
    field = sweep(grid, fn, workers=workers, vectorized=True, dtype=dtype, chunk_size=chunk_size,
                  skip=mask)
    field.meta.update({
        "epsilon": sys.epsilon,
        "eigenvalue": [lam.real, lam.imag],
        "method": method if which == "phase" else "time_of_flight_log",
        "observable": obs,
        "capture_tol": tol,
    })
    return field


def w0_band(grid: GridSpec, width: float = 0.1) -> np.ndarray:
    """Cells within horizontal distance ``width`` of the repelling branch W_0.

    Nodes lying on W_0 itself (held as sentinels) are included; callers
    ignore them through NaN-aware statistics.
    """
    X, Y = grid.mesh()
    inside = np.abs(Y) <= Y_FOLD
    g0 = np.full(X.shape, np.nan)
    g0[inside] = [gamma(ManifoldBranch.W_ZERO, v) for v in Y[inside]]
    return inside & (np.abs(X - g0) <= width)


# -- finite differences ----------------------------------------------------------

_TRANSFORMS = ("angle", "log_abs", "re")


def _wrap_angle(d):
    # into (-pi, pi]
    return -(np.mod(-d + np.pi, 2 * np.pi) - np.pi)


def _apply_transform(values, transform):
    if transform == "angle":
        return np.angle(values)
    if transform == "log_abs":
        with np.errstate(divide="ignore"):
            return np.log(np.abs(values))
    if transform == "re":
        return np.real(values).astype(float)
    raise DomainError(f"unknown transform {transform!r}")


def _diff(v, h, ax, wrap=False):
    """Central differences along ``ax`` with one-sided borders; NaN-propagating."""
    v = np.moveaxis(v, ax, 0)
    out = np.empty_like(v)
    c = v[2:] - v[:-2]
    b0 = v[1] - v[0]
    b1 = v[-1] - v[-2]
    if wrap:
        c, b0, b1 = _wrap_angle(c), _wrap_angle(b0), _wrap_angle(b1)
    out[1:-1] = c / (2 * h)
    out[0] = b0 / h
    out[-1] = b1 / h
    out[np.isnan(v)] = np.nan
    return np.moveaxis(out, 0, ax)


def finite_difference_field(field: Field, axis: str, transform: str = "angle") -> Field:
    """Partial derivative of a transformed field along ``axis`` ("x" or "y")."""
    if axis not in ("x", "y"):
        raise DomainError("axis must be 'x' or 'y'")
    ax = 1 if axis == "x" else 0
    n = field.values.shape[ax]
    if n < 3:
        raise DomainError("need at least 3 cells along the differentiation axis")
    h = field.grid.hx if axis == "x" else field.grid.hy
    v = _apply_transform(field.values, transform)
    v = np.where(field.computed, v, np.nan)
    out = _diff(v, h, ax, wrap=(transform == "angle"))
    meta = dict(field.meta)
    meta.update({"derivative": axis, "transform": transform})
    return Field(field.grid, out, meta)


def generator_residual(field: Field, sys: SlowFastSystem, eigenvalue: complex,
                       eta: float = 1e-12) -> Field:
    """Pointwise residual of the generator eigen-equation on a gridded field.

    ``|(F/eps) d_x phi + G d_y phi - lambda phi| / max(|phi|, eta)``. Fields
    holding ``log|phi|`` (``meta["observable"] == "log_abs"``) are checked in
    log form, ``|(F/eps) d_x L + G d_y L - lambda|``.
    """
    g = field.grid
    if g.nx < 3 or g.ny < 3:
        raise DomainError("need at least 3 cells along each axis")
    X, Y = g.mesh()
    fx = sys.F(X, Y) / sys.epsilon
    fy = sys.G(X, Y)
    v = np.where(field.computed, field.values, np.nan)
    if field.meta.get("observable") == "log_abs":
        v = np.real(v).astype(float)
        dx = _diff(v, g.hx, 1)
        dy = _diff(v, g.hy, 0)
        res = np.abs(fx * dx + fy * dy - eigenvalue)
    else:
        v = v.astype(complex)
        dx = _diff(v, g.hx, 1)
        dy = _diff(v, g.hy, 0)
        res = np.abs(fx * dx + fy * dy - eigenvalue * v) / np.maximum(np.abs(v), eta)
    res = np.where(np.isnan(dx) | np.isnan(dy), np.nan, res)
    meta = dict(field.meta)
    meta.update({"residual_eigenvalue": [complex(eigenvalue).real, complex(eigenvalue).imag]})
    return Field(g, res.astype(float), meta)


# -- estimators --------------------------------------------------------------------

class _CycleEstimator(TransformerMixin, BaseEstimator):
    """Shared fitting: resolves the system and locates its limit cycle."""

    def _resolve_system(self) -> SlowFastSystem:
        if self.system is None:
            return van_der_pol(self.epsilon)
        return self.system.with_epsilon(self.epsilon)

    def _cfg(self) -> IntegratorConfig:
        return IntegratorConfig(rtol=self.rtol, atol=self.atol)

    def fit(self, X=None, y=None):
        """Locate the limit cycle. ``X`` is accepted for pipeline use and ignored."""
        if X is not None:
            check_states(X)
        self.system_ = self._resolve_system()
        self.cycle_ = find_limit_cycle(self.system_, self._cfg(), n_samples=self.n_samples)
        self.period_ = self.cycle_.period_T
        self.omega_ = self.cycle_.omega
        self.floquet_exponent_ = self.cycle_.floquet_nu
        self.capture_tol_ = self.capture_tol or default_capture_tol(self.epsilon)
        self.n_features_in_ = 2
        return self


class PhaseEigenfunction(_CycleEstimator):
    """Phase eigenfunction ``phi_iw = exp(i*theta)`` of the fitted cycle.

    ``transform`` returns ``[Re phi, Im phi]`` per state; ``evaluate`` the
    complex values. Unconverged states and the origin give NaN.
    """

    def __init__(self, epsilon=1.0, system=None, method=TIME_OF_FLIGHT, rtol=1e-9, atol=1e-11,
                 capture_tol=None, budget_periods=50.0, n_samples=2048):
        self.epsilon = epsilon
        self.system = system
        self.method = method
        self.rtol = rtol
        self.atol = atol
        self.capture_tol = capture_tol
        self.budget_periods = budget_periods
        self.n_samples = n_samples

    def fit(self, X=None, y=None):
        if self.method not in PHASE_METHODS:
            raise DomainError(f"unknown phase method {self.method!r}")
        super().fit(X, y)
        self.eigenvalue_ = complex(0.0, self.omega_)
        return self

    def evaluate(self, X):
        check_is_fitted(self, "cycle_")
        P = check_states(X)
        return phase_values(self.system_, self.cycle_, P, self.method, self._cfg(),
                            self.capture_tol_, self.budget_periods)

    def transform(self, X):
        phi = self.evaluate(X)
        return np.column_stack([phi.real, phi.imag])

    def phase(self, X):
        """Asymptotic phase in (-pi, pi]."""
        return np.angle(self.evaluate(X))


class AmplitudeEigenfunction(_CycleEstimator):
    """Amplitude (isostable) eigenfunction ``phi_nu`` in log form.

    ``transform`` returns ``[log|phi_nu|, sign]`` per state. Normalised so
    that ``phi_nu(anchor + a*n) ~ a`` for the outward unit normal ``n`` at the
    anchor and small ``a``.
    """

    def __init__(self, epsilon=1.0, system=None, rtol=1e-9, atol=1e-11, capture_tol=None,
                 budget_periods=50.0, n_samples=2048):
        self.epsilon = epsilon
        self.system = system
        self.rtol = rtol
        self.atol = atol
        self.capture_tol = capture_tol
        self.budget_periods = budget_periods
        self.n_samples = n_samples

    def fit(self, X=None, y=None):
        super().fit(X, y)
        self.eigenvalue_ = complex(self.floquet_exponent_)
        return self

    def evaluate(self, X):
        check_is_fitted(self, "cycle_")
        P = check_states(X)
        return amplitude_values(self.system_, self.cycle_, P, self._cfg(), self.capture_tol_,
                                self.budget_periods)

    def transform(self, X):
        la, sg = self.evaluate(X)
        return np.column_stack([la, sg])
