"""Limit cycle location, period, frequency and Floquet exponent.

The cycle is found as the fixed point of the Poincare return map on the
section ``{y = 0, x > 0}`` (crossed with ``y`` decreasing) and stored as the
dense output of one period, integrated together with the running divergence
integral ``C(t) = int_0^t (F_x + eps*G_y) dt``. That integral gives the
Floquet exponent without forming the (underflowing) multiplier, and the
transverse gain used to normalise the amplitude eigenfunction.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import CycleNotFoundError, DomainError, NoEventError, RangeError
from .model import SlowFastSystem, State, TimeScale
from .ode import (DONE, IntegratorConfig, PHASE_SECTION, DenseSegments, _Recorder, dense_eval,
                  flow, section_hit, solve_batch)

#: Default number of phase-equispaced samples kept on the cycle.
N_SAMPLES = 2048
#: Trapezoid nodes for the divergence line integral.
N_QUADRATURE = 20_000
#: Burn-in from (2, 0) before the return map, in slow time.
BURN_IN = 5.0
#: Refuse the monodromy route when the nontrivial multiplier exp(nu*T) is this small.
MAX_LOG_CONTRACTION = 25.0

LOG2 = math.log(2.0)


def asymptotic_estimates(epsilon: float):
    """Zeroth-order period, frequency and Floquet exponent ``(T0, omega0, nu0/eps)``."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    T0 = 3.0 - 2.0 * LOG2
    nu0 = (-1.5 - 2.0 * LOG2) / T0
    return T0, 2.0 * math.pi / T0, nu0 / epsilon


def _augmented_rhs(sys: SlowFastSystem):
    def rhs(Y):
        x, y = Y[0], Y[1]
        fx, fy = sys.fast_rhs(x, y)
        div = sys.fast_divergence(x, y)
        one = np.ones_like(x)
        return np.stack([fx * one, fy * one, div * one])
    return rhs


def _variational_rhs(sys: SlowFastSystem):
    eps = sys.epsilon

    def rhs(Y):
        x, y = Y[0], Y[1]
        fx, fy = sys.fast_rhs(x, y)
        a, b, c, d = sys.partials(x, y)
        c = eps * c
        d = eps * d
        p11, p21, p12, p22 = Y[2], Y[3], Y[4], Y[5]
        one = np.ones_like(x)
        return np.stack([fx * one, fy * one,
                         a * p11 + b * p21, c * p11 + d * p21,
                         a * p12 + b * p22, c * p12 + d * p22])
    return rhs


@dataclass
class LimitCycle:
    """Stable limit cycle of a slow-fast system.

    ``period_T`` and ``floquet_nu`` are in slow-time units. ``samples`` are
    ``N`` states at phases ``2*pi*k/N`` measured from ``anchor``.
    """

    epsilon: float
    period_T: float
    omega: float
    floquet_nu: float
    anchor: State
    samples: np.ndarray
    curve: DenseSegments = field(repr=False)
    residuals: dict = field(default_factory=dict, repr=False)
    _tree: Optional[cKDTree] = field(default=None, repr=False)

    def __post_init__(self):
        self._build_index()

    # -- geometry -----------------------------------------------------------
    @property
    def period_fast(self) -> float:
        return self.period_T / self.epsilon

    def _build_index(self):
        seg = self.curve
        sub = 8
        th = np.arange(sub) / sub
        t = (seg.t0[:, None] + seg.h[:, None] * th[None, :]).ravel()
        idx = np.repeat(np.arange(seg.t0.size), sub)
        pts = dense_eval(seg.y0[:, idx], seg.h[idx], seg.K[:, :, idx], np.tile(th, seg.t0.size))
        self._sample_t = t
        self._sample_xy = pts[:2].T.copy()
        gaps = np.linalg.norm(np.diff(np.vstack([self._sample_xy, self._sample_xy[:1]]), axis=0), axis=1)
        self.max_gap = float(gaps.max())
        self._tree = cKDTree(self._sample_xy)
        v0, _ = self.curve.derivatives(np.array([0.0]))
        centroid = self.samples.mean(axis=0)
        n0 = np.array([-v0[1, 0], v0[0, 0]])
        outward = np.array(self.anchor) - centroid
        self._orient = 1.0 if float(n0 @ outward) >= 0 else -1.0
        self._log_speed0 = math.log(math.hypot(v0[0, 0], v0[1, 0]))
        self._C_total = float(self.curve(np.array([self.period_fast]))[2, 0])

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_tree"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._tree = cKDTree(self._sample_xy)

    def _wrap(self, t):
        return np.mod(t, self.period_fast)

    def evaluate(self, t_fast):
        """Cycle point ``(x, y, C)`` at fast time ``t_fast`` after the anchor."""
        return self.curve(self._wrap(np.atleast_1d(t_fast)))

    def normal(self, t_fast):
        v, _ = self.curve.derivatives(self._wrap(np.atleast_1d(t_fast)))
        sp = np.hypot(v[0], v[1])
        return self._orient * np.stack([-v[1], v[0]]) / sp

    def coarse_distance(self, points):
        """Distance to the nearest stored sample and that sample's cycle time."""
        d, i = self._tree.query(np.asarray(points, dtype=float).reshape(-1, 2))
        return d, self._sample_t[i]

    def nearest(self, points, t_init=None, iters=6):
        """Foot point on the cycle: returns ``(t_fast, signed_distance)``.

        The sign is positive outside the cycle. Only meaningful for points
        close to the cycle (within a fraction of its curvature radius).
        """
        P = np.asarray(points, dtype=float).reshape(-1, 2).T
        if t_init is None:
            _, t_init = self.coarse_distance(P.T)
        t = np.array(t_init, dtype=float)
        for _ in range(iters):
            c = self.curve(self._wrap(t))
            v, a = self.curve.derivatives(self._wrap(t))
            dx = c[0] - P[0]
            dy = c[1] - P[1]
            r = dx * v[0] + dy * v[1]
            dr = v[0] * v[0] + v[1] * v[1] + dx * a[0] + dy * a[1]
            dr = np.where(dr > 0, dr, v[0] * v[0] + v[1] * v[1])
            t = t - r / dr
        t = self._wrap(t)
        c = self.curve(t)
        n = self.normal(t)
        d = (P[0] - c[0]) * n[0] + (P[1] - c[1]) * n[1]
        return t, d

    def log_gain(self, t_fast):
        """Log of the normal derivative of the amplitude eigenfunction on the cycle.

        Normalised to 0 at the anchor. Follows from the planar identity
        ``|f| * normal_deviation ~ exp(int div f)`` along the cycle.
        """
        t = self._wrap(np.atleast_1d(t_fast))
        c = self.curve(t)
        v, _ = self.curve.derivatives(t)
        log_speed = np.log(np.hypot(v[0], v[1]))
        return self._C_total * t / self.period_fast - c[2] + log_speed - self._log_speed0

    def phase_of_time(self, t_fast):
        return np.mod(self.omega * self.epsilon * np.asarray(t_fast), 2 * math.pi)


def _cycle_cfg(cfg: IntegratorConfig) -> IntegratorConfig:
    return IntegratorConfig(rtol=min(cfg.rtol, 1e-11), atol=min(cfg.atol, 1e-13),
                            max_step=cfg.max_step, max_steps=cfg.max_steps)


def find_limit_cycle(sys: SlowFastSystem, cfg: IntegratorConfig = IntegratorConfig(),
                     n_samples: int = N_SAMPLES, start=(2.0, 0.0), burn_in: float = BURN_IN,
                     tol: float = 1e-12, max_iter: int = 40) -> LimitCycle:
    """Locate the attracting cycle through the section ``{y = 0, x > 0}``."""
    ccfg = _cycle_cfg(cfg)
    eps = sys.epsilon
    t_max_fast = 100.0 / eps
    try:
        s = flow(sys, start, TimeScale.SLOW, burn_in, ccfg)
        hit, _, _ = section_hit(sys, s, PHASE_SECTION, ccfg, t_max_fast)
    except NoEventError as exc:
        raise CycleNotFoundError("trajectory never crossed the phase section") from exc

    def ret(x):
        p, t, _ = section_hit(sys, (x, 0.0), PHASE_SECTION, ccfg, t_max_fast)
        return p.x, t

    x0 = hit.x
    try:
        p0, _ = ret(x0)
        r0 = p0 - x0
        x1 = p0
        best = (abs(r0), x0)
        for _ in range(max_iter):
            p1, _ = ret(x1)
            r1 = p1 - x1
            if abs(r1) < best[0]:
                best = (abs(r1), x1)
            if abs(r1) < tol:
                break
            if r1 != r0:
                x2 = x1 - r1 * (x1 - x0) / (r1 - r0)
            else:
                x2 = p1
            if not (x2 > 0 and math.isfinite(x2)):
                x2 = p1
            x0, r0, x1 = x1, r1, x2
        x_star = best[1]
    except NoEventError as exc:
        raise CycleNotFoundError("return map left the section") from exc
    if best[0] > 1e3 * tol:
        raise CycleNotFoundError(f"secant iteration did not converge (|P(x)-x| = {best[0]:.3g})")

    anchor = State(x_star, 0.0)
    hit, T_fast, _ = section_hit(sys, anchor, PHASE_SECTION, ccfg, t_max_fast)
    return_residual = abs(hit.x - x_star)

    rec = _Recorder()
    res = solve_batch(_augmented_rhs(sys), np.array([[x_star], [0.0], [0.0]]), T_fast, ccfg,
                      on_step=rec)
    if res.status[0] != DONE:
        raise CycleNotFoundError("integration along the cycle failed")
    curve = rec.segments()
    end = res.y[:, 0]
    closure = math.hypot(end[0] - x_star, end[1])
    T = T_fast * eps
    omega = 2.0 * math.pi / T
    ts = np.arange(n_samples) * (T_fast / n_samples)
    samples = curve(ts)[:2].T.copy()

    cyc = LimitCycle(epsilon=eps, period_T=T, omega=omega, floquet_nu=float("nan"),
                     anchor=anchor, samples=samples, curve=curve)
    nu, nu_err = _divergence_quadrature(sys, cyc)
    cyc.floquet_nu = nu
    cyc.residuals = {
        "return_map": return_residual,
        "closure": closure,
        "nu_richardson": nu_err,
        "nu_augmented": cyc._C_total / T,
    }
    return cyc


def _divergence_quadrature(sys, cycle, n=N_QUADRATURE):
    def trap(m):
        t = np.arange(m) * (cycle.period_fast / m)
        c = cycle.curve(t)
        return float(np.mean(sys.fast_divergence(c[0], c[1]))) / sys.epsilon
    a = trap(n)
    b = trap(2 * n)
    # periodic trapezoid: error O(h^2) at worst; extrapolate and report the gap
    return (4.0 * b - a) / 3.0, abs(b - a)


def floquet_exponent_divergence(sys: SlowFastSystem, cycle: LimitCycle) -> float:
    """Floquet exponent (slow-time units) as the period-average of the divergence."""
    nu, _ = _divergence_quadrature(sys, cycle)
    if not math.isfinite(nu):
        raise RangeError("divergence quadrature is not finite")
    return nu


def monodromy_matrix(sys: SlowFastSystem, cycle: LimitCycle,
                     cfg: IntegratorConfig = IntegratorConfig(rtol=1e-12, atol=1e-14)) -> np.ndarray:
    x0, y0 = cycle.anchor
    Y0 = np.array([[x0], [y0], [1.0], [0.0], [0.0], [1.0]])
    res = solve_batch(_variational_rhs(sys), Y0, cycle.period_fast, cfg)
    if res.status[0] != DONE:
        raise RangeError("variational integration failed")
    p11, p21, p12, p22 = res.y[2:, 0]
    return np.array([[p11, p12], [p21, p22]])


def floquet_multipliers(sys: SlowFastSystem, cycle: LimitCycle):
    """``(trivial, nontrivial)`` Floquet multipliers from the monodromy matrix."""
    if abs(cycle.floquet_nu) * cycle.period_T > MAX_LOG_CONTRACTION:
        raise RangeError(
            f"nontrivial multiplier exp({cycle.floquet_nu * cycle.period_T:.1f}) is below "
            "the resolution of the monodromy matrix; use floquet_exponent_divergence")
    mu = np.linalg.eigvals(monodromy_matrix(sys, cycle))
    mu = mu[np.argsort(np.abs(mu - 1.0))]
    return complex(mu[0]), complex(mu[1])


def floquet_exponent_monodromy(sys: SlowFastSystem, cycle: LimitCycle) -> float:
    """Independent Floquet exponent: log of the nontrivial multiplier over T."""
    trivial, mu = floquet_multipliers(sys, cycle)
    if abs(trivial - 1.0) > 1e-6:
        raise RangeError(f"trivial multiplier {trivial} deviates from 1")
    return math.log(abs(mu)) / cycle.period_T


@dataclass
class CycleReport:
    epsilon: float
    period_T: float
    omega: float
    floquet_nu: float
    nu_by_monodromy: Optional[float]
    residuals: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "period": self.period_T,
            "omega": self.omega,
            "nu": self.floquet_nu,
            "nu_monodromy": self.nu_by_monodromy,
            "residuals": dict(self.residuals),
        }

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2)


def cycle_report(sys: SlowFastSystem, cfg: IntegratorConfig = IntegratorConfig()) -> CycleReport:
    t0 = time.perf_counter()
    cyc = find_limit_cycle(sys, cfg)
    try:
        nu_m = floquet_exponent_monodromy(sys, cyc)
    except RangeError:
        nu_m = None
    return CycleReport(epsilon=sys.epsilon, period_T=cyc.period_T, omega=cyc.omega,
                       floquet_nu=cyc.floquet_nu, nu_by_monodromy=nu_m,
                       residuals=dict(cyc.residuals), wall_time=time.perf_counter() - t0)
