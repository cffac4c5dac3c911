"""Adaptive Runge-Kutta integration of slow-fast flows.

Every integration steps the fast-time form ``x' = F, y' = eps*G``; slow-time
horizons are converted with ``t = tau / eps`` and outputs rescaled. For the
systems handled here this form is non-stiff, so an explicit embedded pair is
enough even at ``eps = 0.01``.

The kernel (:func:`solve_batch`) advances ``n`` independent lanes in lockstep,
each with its own step size and acceptance decision. All arithmetic is
elementwise per lane, which makes a lane's result independent of which other
lanes share the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import DivergenceError, DomainError, NoEventError, StiffnessError
from .model import SlowFastSystem, State, TimeScale

# Dormand-Prince 5(4) tableau with the free 4th-order dense output of
# Shampine (1986), as used by DOPRI5 / ode45.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0
# PI controller exponents (Gustafsson), scaled by the embedded order 5
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5

RUNNING, DONE, STOPPED, STIFF, DIVERGED = 0, 1, 2, 3, 4

#: Crossings closer than this (fast time) to the start are ignored.
REFRACTORY = 1e-3


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-9
    atol: float = 1e-11
    max_step: float = math.inf
    max_steps: int = 10**7
    method: str = "rk45"

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise DomainError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise DomainError("max_steps must be positive")
        if self.method not in ("rk45", "rk4"):
            raise DomainError(f"unknown method {self.method!r}")
        if self.method == "rk4" and not math.isfinite(self.max_step):
            raise DomainError("fixed-step rk4 needs a finite max_step (the step size)")


def dense_eval(y0, h, K, theta):
    """Evaluate the continuous extension of accepted steps.

    ``y0`` (d, n), ``h`` (n,), ``K`` (7, d, n), ``theta`` (n,) in [0, 1].
    """
    th = np.asarray(theta, dtype=float)
    powers = np.stack([th, th * th, th * th * th, th * th * th * th])
    Q = _P @ powers  # (7, n)
    return y0 + h * np.einsum("sdn,sn->dn", K, Q)


def dense_derivatives(h, K, theta):
    """First and second time derivatives of the continuous extension."""
    th = np.asarray(theta, dtype=float)
    one = np.ones_like(th)
    d1 = _P @ np.stack([one, 2 * th, 3 * th * th, 4 * th * th * th])
    d2 = _P @ np.stack([0 * one, 2 * one, 6 * th, 12 * th * th])
    v = np.einsum("sdn,sn->dn", K, d1)
    a = np.einsum("sdn,sn->dn", K, d2) / h
    return v, a


def _rk45_attempt(rhs, y, h, k1):
    K = [k1]
    for i in range(1, 6):
        acc = _A[i][0] * K[0]
        for j in range(1, i):
            acc = acc + _A[i][j] * K[j]
        K.append(rhs(y + h * acc))
    acc = _B[0] * K[0]
    for j in range(2, 6):
        acc = acc + _B[j] * K[j]
    y_new = y + h * acc
    K.append(rhs(y_new))
    err = _E[0] * K[0]
    for j in range(2, 7):
        err = err + _E[j] * K[j]
    return y_new, h * err, np.stack(K)


def _rms(v):
    return np.sqrt(np.mean(v * v, axis=0))


def _initial_step(rhs, y, f0, direction_len, rtol, atol):
    sc = atol + rtol * np.abs(y)
    d0 = _rms(y / sc)
    d1 = _rms(f0 / sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.where(d1 > 0, d1, 1.0))
    h0 = np.minimum(h0, direction_len)
    f1 = rhs(y + h0 * f0)
    d2 = _rms((f1 - f0) / sc) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.where(dm > 0, dm, 1.0)) ** (1 / 5))
    return np.minimum(100 * h0, h1)


@dataclass
class BatchResult:
    t: np.ndarray
    y: np.ndarray
    status: np.ndarray
    nsteps: np.ndarray


def solve_batch(rhs: Callable, y0, t_end, cfg: IntegratorConfig = IntegratorConfig(),
                on_step: Optional[Callable] = None, t0=0.0) -> BatchResult:
    """Integrate ``n`` autonomous lanes ``y' = rhs(y)`` from ``t0`` to ``t_end``.

    ``rhs`` maps a (d, m) array to a (d, m) array columnwise. ``on_step`` is
    called after every batch of accepted steps as
    ``on_step(lanes, t_old, y_old, h, K, t_new, y_new)`` and may return a
    boolean array marking lanes to stop (status ``STOPPED``).
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim == 1:
        y = y[:, None]
    d, n = y.shape
    t = np.full(n, float(t0)) if np.ndim(t0) == 0 else np.array(t0, dtype=float)
    t_end = np.full(n, float(t_end)) if np.ndim(t_end) == 0 else np.array(t_end, dtype=float)
    status = np.zeros(n, dtype=np.int8)
    nsteps = np.zeros(n, dtype=np.int64)
    status[t_end <= t] = DONE
    if cfg.method == "rk4":
        return _solve_rk4(rhs, y, t, t_end, status, nsteps, cfg, on_step)

    lanes = np.flatnonzero(status == RUNNING)
    if lanes.size == 0:
        return BatchResult(t, y, status, nsteps)
    k1 = np.zeros_like(y)
    k1[:, lanes] = rhs(y[:, lanes])
    bad = ~np.all(np.isfinite(k1[:, lanes]), axis=0)
    status[lanes[bad]] = DIVERGED
    h = np.zeros(n)
    err_prev = np.full(n, 1e-4)
    lanes = np.flatnonzero(status == RUNNING)
    if lanes.size:
        h[lanes] = _initial_step(rhs, y[:, lanes], k1[:, lanes], t_end[lanes] - t[lanes],
                                 cfg.rtol, cfg.atol)
    h = np.minimum(h, cfg.max_step)

    while True:
        lanes = np.flatnonzero(status == RUNNING)
        if lanes.size == 0:
            break
        tl = t[lanes]
        rem = t_end[lanes] - tl
        hl = np.minimum(h[lanes], rem)
        last = hl >= rem
        yl = y[:, lanes]
        y_new, err, K = _rk45_attempt(rhs, yl, hl, k1[:, lanes])
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(yl), np.abs(y_new))
        en = _rms(err / sc)
        finite = np.all(np.isfinite(y_new), axis=0) & np.isfinite(en)
        accept = finite & (en <= 1.0)

        # step-size update
        en_safe = np.where(en > 0, en, 1e-10)
        fac_acc = _SAFETY * en_safe ** (-_ALPHA) * err_prev[lanes] ** _BETA
        fac_acc = np.clip(fac_acc, _FAC_MIN, _FAC_MAX)
        fac_rej = np.clip(_SAFETY * en_safe ** (-1 / 5), _FAC_MIN, 1.0)
        fac = np.where(accept, fac_acc, np.where(finite, fac_rej, 0.25))
        h_next = np.minimum(hl * fac, cfg.max_step)
        # a truncated final step must not shrink the following ones
        h_next = np.where(accept & last, np.maximum(h_next, h[lanes]), h_next)

        acc_lanes = lanes[accept]
        if acc_lanes.size:
            t_old = tl[accept]
            t_new = np.where(last[accept], t_end[acc_lanes], t_old + hl[accept])
            y_old = yl[:, accept]
            y_acc = y_new[:, accept]
            K_acc = K[:, :, accept]
            t[acc_lanes] = t_new
            y[:, acc_lanes] = y_acc
            k1[:, acc_lanes] = K_acc[6]
            err_prev[acc_lanes] = np.maximum(en[accept], 1e-4)
            nsteps[acc_lanes] += 1
            status[acc_lanes[last[accept]]] = DONE
            if on_step is not None:
                stop = on_step(acc_lanes, t_old, y_old, hl[accept], K_acc, t_new, y_acc)
                if stop is not None:
                    stop = np.asarray(stop, dtype=bool)
                    status[acc_lanes[stop]] = STOPPED
            over = acc_lanes[(nsteps[acc_lanes] >= cfg.max_steps) & (status[acc_lanes] == RUNNING)]
            status[over] = STIFF

        h[lanes] = h_next
        rej = lanes[~accept]
        if rej.size:
            tiny = h[rej] < 10 * np.finfo(float).eps * np.maximum(1.0, np.abs(t[rej]))
            status[rej[tiny]] = STIFF
    return BatchResult(t, y, status, nsteps)


def _solve_rk4(rhs, y, t, t_end, status, nsteps, cfg, on_step):
    h0 = cfg.max_step
    while True:
        lanes = np.flatnonzero(status == RUNNING)
        if lanes.size == 0:
            break
        tl = t[lanes]
        rem = t_end[lanes] - tl
        hl = np.minimum(h0, rem)
        last = hl >= rem
        yl = y[:, lanes]
        k1 = rhs(yl)
        k2 = rhs(yl + 0.5 * hl * k1)
        k3 = rhs(yl + 0.5 * hl * k2)
        k4 = rhs(yl + hl * k3)
        y_new = yl + hl / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        finite = np.all(np.isfinite(y_new), axis=0)
        status[lanes[~finite]] = DIVERGED
        ok = lanes[finite]
        t_new = np.where(last, t_end[lanes], tl + hl)[finite]
        y[:, ok] = y_new[:, finite]
        t[ok] = t_new
        nsteps[ok] += 1
        status[ok[last[finite]]] = DONE
        if on_step is not None:
            stop = on_step(ok, tl[finite], yl[:, finite], hl[finite], None, t_new, y_new[:, finite])
            if stop is not None:
                status[ok[np.asarray(stop, dtype=bool)]] = STOPPED
        status[ok[(nsteps[ok] >= cfg.max_steps) & (status[ok] == RUNNING)]] = STIFF
    return BatchResult(t, y, status, nsteps)


# -- single trajectories -------------------------------------------------------

def system_rhs(sys: SlowFastSystem):
    """Fast-time right-hand side acting on (2, n) arrays."""
    def rhs(Y):
        fx, fy = sys.fast_rhs(Y[0], Y[1])
        return np.stack([fx * np.ones_like(Y[0]), fy * np.ones_like(Y[1])])
    return rhs


@dataclass
class DenseSegments:
    """Accepted steps of one trajectory, kept for continuous evaluation."""

    t0: np.ndarray        # (m,) fast-time step starts
    h: np.ndarray         # (m,)
    y0: np.ndarray        # (d, m)
    K: np.ndarray         # (7, d, m)

    @classmethod
    def from_lists(cls, t0s, hs, y0s, Ks):
        if not t0s:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 0)), np.zeros((7, 0, 0)))
        return cls(np.concatenate(t0s), np.concatenate(hs),
                   np.concatenate(y0s, axis=1), np.concatenate(Ks, axis=2))

    def locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.t0, t, side="right") - 1
        idx = np.clip(idx, 0, self.t0.size - 1)
        theta = np.clip((t - self.t0[idx]) / self.h[idx], 0.0, 1.0)
        return idx, theta

    def __call__(self, t):
        idx, theta = self.locate(t)
        return dense_eval(self.y0[:, idx], self.h[idx], self.K[:, :, idx], theta)

    def derivatives(self, t):
        idx, theta = self.locate(t)
        return dense_derivatives(self.h[idx], self.K[:, :, idx], theta)


class _Recorder:
    def __init__(self):
        self.t0s, self.hs, self.y0s, self.Ks = [], [], [], []
        self.ts, self.ys = [], []

    def __call__(self, lanes, t_old, y_old, h, K, t_new, y_new):
        self.t0s.append(t_old.copy())
        self.hs.append(np.asarray(h, dtype=float).copy())
        self.y0s.append(y_old.copy())
        if K is not None:
            self.Ks.append(K.copy())
        self.ts.append(t_new.copy())
        self.ys.append(y_new.copy())
        return None

    def segments(self):
        if len(self.Ks) != len(self.t0s):
            return None
        return DenseSegments.from_lists(self.t0s, self.hs, self.y0s, self.Ks)


@dataclass
class Trajectory:
    """Sampled solution in one time scale, with dense output when available."""

    scale: TimeScale
    times: np.ndarray
    states: np.ndarray           # (N, 2)
    epsilon: float
    dense: Optional[DenseSegments] = field(default=None, repr=False)

    def __post_init__(self):
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def final(self) -> State:
        return State(float(self.states[-1, 0]), float(self.states[-1, 1]))

    def _to_fast(self, times):
        times = np.asarray(times, dtype=float)
        return times / self.epsilon if self.scale is TimeScale.SLOW else times

    def __call__(self, times):
        """States at arbitrary times (in this trajectory's scale), shape (m, 2)."""
        if self.dense is None:
            raise ValueError("no dense output recorded for this trajectory")
        tf = self._to_fast(times) + self._fast_offset
        return self.dense(np.atleast_1d(tf))[:2].T

    @property
    def _fast_offset(self):
        return self.dense.t0[0] if self.dense is not None and self.dense.t0.size else 0.0


def _raise_status(res: BatchResult, lane=0):
    st = res.status[lane]
    if st == STIFF:
        raise StiffnessError("step size underflow or max_steps exceeded",
                             t=float(res.t[lane]), state=State(*res.y[:2, lane]))
    if st == DIVERGED:
        raise DivergenceError("integration produced a non-finite state",
                              t=float(res.t[lane]), state=State(*res.y[:2, lane]))


def _fast_duration(sys, scale, duration):
    if duration < 0:
        raise DomainError("duration must be non-negative")
    return duration / sys.epsilon if scale is TimeScale.SLOW else float(duration)


def integrate(sys: SlowFastSystem, s0, scale: TimeScale, duration: float,
              cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Solve the flow from ``s0`` for ``duration`` (in units of ``scale``)."""
    x0, y0 = float(s0[0]), float(s0[1])
    tf = _fast_duration(sys, scale, duration)
    rec = _Recorder()
    res = solve_batch(system_rhs(sys), np.array([[x0], [y0]]), tf, cfg, on_step=rec)
    _raise_status(res)
    ts = np.concatenate([[0.0]] + rec.ts) if rec.ts else np.array([0.0])
    ys = np.concatenate([np.array([[x0], [y0]])] + rec.ys, axis=1).T if rec.ys else np.array([[x0, y0]])
    if scale is TimeScale.SLOW:
        ts = ts * sys.epsilon
    return Trajectory(scale, ts, ys, sys.epsilon, rec.segments())


def flow(sys: SlowFastSystem, s0, scale: TimeScale, duration: float,
         cfg: IntegratorConfig = IntegratorConfig()) -> State:
    """Final state of :func:`integrate` (the flow map S_duration)."""
    if duration == 0:
        return State(float(s0[0]), float(s0[1]))
    tf = _fast_duration(sys, scale, duration)
    res = solve_batch(system_rhs(sys), np.array([[float(s0[0])], [float(s0[1])]]), tf, cfg)
    _raise_status(res)
    return State(float(res.y[0, 0]), float(res.y[1, 0]))


def flow_many(sys: SlowFastSystem, states, scale: TimeScale, duration: float,
              cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Vectorised :func:`flow` for an (n, 2) array; failed lanes become NaN."""
    S = np.asarray(states, dtype=float).reshape(-1, 2)
    tf = _fast_duration(sys, scale, duration)
    res = solve_batch(system_rhs(sys), S.T.copy(), tf, cfg)
    out = res.y[:2].T.copy()
    out[res.status != DONE] = np.nan
    return out


# -- sections and events ---------------------------------------------------------

def _phase_section_fn(x, y):
    return y


def _phase_section_where(x, y):
    return x > 0


@dataclass(frozen=True)
class Section:
    """The line event ``fn(x, y) = 0`` crossed in ``direction`` (+1, -1 or 0 for both).

    ``where`` optionally restricts admissible crossings (e.g. ``x > 0``).
    """

    fn: Callable
    direction: int = -1
    where: Optional[Callable] = None

    def __post_init__(self):
        if self.direction not in (-1, 0, 1):
            raise DomainError("direction must be -1, 0 or +1")


#: Canonical phase section {y = 0, x > 0}, crossed with y decreasing.
PHASE_SECTION = Section(_phase_section_fn, direction=-1, where=_phase_section_where)


def _crossed(g_old, g_new, direction):
    down = (g_old > 0) & (g_new <= 0)
    up = (g_old < 0) & (g_new >= 0)
    if direction < 0:
        return down
    if direction > 0:
        return up
    return down | up


def _refine_crossing(section, y0, h, K, g_old, tol=1e-12, max_iter=80):
    lo, hi = 0.0, 1.0
    s_lo = np.sign(g_old)
    th = 1.0
    for _ in range(max_iter):
        th = 0.5 * (lo + hi)
        p = dense_eval(y0, h, K, np.array([th]))
        g = float(section.fn(p[0, 0], p[1, 0]))
        if abs(g) < tol:
            break
        if np.sign(g) == s_lo:
            lo = th
        else:
            hi = th
    return th


def section_hit(sys: SlowFastSystem, s0, section: Section, cfg: IntegratorConfig, t_max_fast: float,
                record: bool = False):
    """Fast-time core of :func:`integrate_until_section`.

    Returns ``(hit_state, t_hit_fast, segments_or_None)``.
    """
    x0, y0 = float(s0[0]), float(s0[1])
    rec = _Recorder() if record else None
    found = {}

    def on_step(lanes, t_old, y_old, h, K, t_new, y_new):
        if rec is not None:
            rec(lanes, t_old, y_old, h, K, t_new, y_new)
        if t_new[0] <= REFRACTORY:
            return None
        g_old = float(section.fn(y_old[0, 0], y_old[1, 0]))
        g_new = float(section.fn(y_new[0, 0], y_new[1, 0]))
        if not _crossed(np.array(g_old), np.array(g_new), section.direction):
            return None
        if g_new == 0.0:
            th = 1.0
        else:
            th = _refine_crossing(section, y_old, h, K, g_old)
        t_c = float(t_old[0] + th * h[0])
        if t_c <= REFRACTORY:
            return None
        p = dense_eval(y_old, h, K, np.array([th]))
        if section.where is not None and not bool(section.where(p[0, 0], p[1, 0])):
            return None
        found["state"] = State(float(p[0, 0]), float(p[1, 0]))
        found["t"] = t_c
        return np.array([True])

    res = solve_batch(system_rhs(sys), np.array([[x0], [y0]]), t_max_fast, cfg, on_step=on_step)
    _raise_status(res)
    if "t" not in found:
        raise NoEventError(f"no section crossing within t_max (fast time {t_max_fast:g})")
    return found["state"], found["t"], (rec.segments() if rec is not None else None)


def integrate_until_section(sys: SlowFastSystem, s0, scale: TimeScale, section: Section,
                            cfg: IntegratorConfig = IntegratorConfig(), t_max: float = 100.0):
    """First admissible crossing of ``section`` after the refractory interval.

    Returns ``(hit_state, t_hit)`` with ``t_hit`` in units of ``scale``.
    """
    if not t_max > 0:
        raise DomainError("t_max must be positive")
    if cfg.method != "rk45":
        raise DomainError("event location needs dense output (method='rk45')")
    tf = _fast_duration(sys, scale, t_max)
    hit, t_fast, _ = section_hit(sys, s0, section, cfg, tf)
    return hit, (t_fast * sys.epsilon if scale is TimeScale.SLOW else t_fast)
