"""Self-checks run by ``koopman-sp verify``.

Each check returns a :class:`CheckResult`; the fast suite skips the
eps = 0.01 grid sweeps.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from .cycle import cycle_report, find_limit_cycle, floquet_exponent_monodromy
from .fields import GridSpec
from .grid_io import write_csv, write_heatmap
from .model import ConstrainedState, ManifoldBranch, TimeScale, van_der_pol
from .ode import IntegratorConfig, flow_many, solve_batch
from . import singular as sg
from . import spectral as sp

TABLE = {
    1.0: ((6.66, 0.01), (0.943, 0.002), (-1.06, 0.01)),
    0.1: ((2.87, 0.01), (2.19, 0.01), (-13.3, 0.2)),
    0.01: ((1.91, 0.01), (3.29, 0.01), (-163.0, 3.0)),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def check_table(cfg: IntegratorConfig) -> tuple:
    lines, ok = [], True
    for eps, ((T, dT), (w, dw), (nu, dnu)) in TABLE.items():
        rep = cycle_report(van_der_pol(eps), cfg)
        good = abs(rep.period_T - T) <= dT and abs(rep.omega - w) <= dw and abs(rep.floquet_nu - nu) <= dnu
        ok &= good and rep.wall_time < 60
        lines.append(f"eps={eps}: T={rep.period_T:.4f} w={rep.omega:.4f} nu={rep.floquet_nu:.4f}")
    return ok, "; ".join(lines)


def check_singular_constants(cfg: IntegratorConfig) -> tuple:
    T0 = sg.T0
    e1 = abs(T0 - (3 - 2 * math.log(2)))
    drop = ConstrainedState(ManifoldBranch.W_PLUS, 2.0)
    e2 = abs(sg.constrained_flow(drop, T0).xbar - 2.0)
    e3 = abs(sg.time_to_jump(drop) - T0 / 2)
    cyc = find_limit_cycle(van_der_pol(0.01), cfg)
    rel = abs(0.01 * cyc.floquet_nu - sg.NU0) / abs(sg.NU0)
    ok = e1 <= 1e-12 and e2 <= 1e-12 and e3 <= 1e-12 and rel < 0.15
    return ok, f"T0 err {e1:.1e}, closure {e2:.1e}, transit {e3:.1e}, eps*nu vs nu0 {rel:.1%}"


def check_eigen_relations(cfg: IntegratorConfig, n_points: int = 200) -> tuple:
    rng = np.random.default_rng(0)
    worst_p = worst_a = 0.0
    for eps in (1.0, 0.1):
        sys = van_der_pol(eps)
        cyc = find_limit_cycle(sys, cfg)
        P = rng.uniform([-4, -2], [4, 2], size=(n_points, 2))
        ph = sp.phase_values(sys, cyc, P, cfg=cfg)
        la, _ = sp.amplitude_values(sys, cyc, P, cfg=cfg)
        for tau in (0.05, 0.2):
            Q = flow_many(sys, P, TimeScale.SLOW, tau, sp.amplitude_cfg(cfg))
            pq = sp.phase_values(sys, cyc, Q, cfg=cfg)
            lq, _ = sp.amplitude_values(sys, cyc, Q, cfg=cfg)
            worst_p = max(worst_p, float(np.max(np.abs(pq - np.exp(1j * cyc.omega * tau) * ph))))
            worst_a = max(worst_a, float(np.max(np.abs(lq - la - cyc.floquet_nu * tau))))
    ok = worst_p < 1e-3 and worst_a < 2e-3
    return ok, f"phase {worst_p:.2e}, log-amplitude {worst_a:.2e}"


def _sample_states(n, rng):
    return sg.random_constrained_states(n, rng)


def check_singular_eigen_relations(cfg: IntegratorConfig) -> tuple:
    rng = np.random.default_rng(1)
    taus = (0.1, 1.0, sg.T0 / 2, sg.T0)
    worst = 0.0
    for cs in _sample_states(100, rng):
        base = sg.slow_eigenfunction(cs)
        for tau in taus + (sg.time_to_jump(cs) + 1e-3, max(sg.time_to_jump(cs) - 1e-3, 0.0)):
            r = abs(sg.slow_eigenfunction(sg.constrained_flow(cs, tau))
                    - np.exp(1j * sg.OMEGA0 * tau) * base)
            worst = max(worst, r)
    P = rng.uniform([-4, -2], [4, 2], size=(100, 2))
    for x, y in P:
        base = sg.singular_eigenfunction((x, y))
        for tau in taus:
            r = abs(sg.singular_eigenfunction(sg.singular_flow((x, y), tau))
                    - np.exp(1j * sg.OMEGA0 * tau) * base)
            worst = max(worst, r)
    return worst < 1e-9, f"max residual {worst:.2e}"


def check_spectrum(cfg: IntegratorConfig) -> tuple:
    reps = [sg.spectrum_check(n, 100, (0.1, 1.0, sg.T0)) for n in range(-3, 4)]
    ok = all(r.passed for r in reps)
    return ok, (f"max residual {max(r.max_residual for r in reps):.2e}, "
                f"periodicity {max(r.max_periodicity_error for r in reps):.2e}")


def invariance_members():
    """Five observables in the continuous class."""
    w = sg.OMEGA0

    def phase(cs):
        return sg.slow_eigenfunction(cs)

    def phase_cubed(cs):
        return sg.slow_eigenfunction(cs, 3)

    def const(cs):
        return 2.5

    def cosine(cs):
        return math.cos(w * sg.varphi(abs(cs.xbar))) * cs.sign

    def mixed(cs):
        z = sg.slow_eigenfunction(cs)
        return 1.0 + 0.3 * z - 0.2 * z.conjugate() ** 2

    return [sg.ObservableSample(f, name=f.__name__) for f in (phase, phase_cubed, const, cosine, mixed)]


def check_invariance(cfg: IntegratorConfig) -> tuple:
    worst = 0.0
    ok = True
    for f in invariance_members():
        rep = sg.observable_invariance_check(f, (0.1, sg.T0 / 2, sg.T0, 1.7), tol=1e-6)
        ok &= rep.passed
        worst = max(worst, rep.max_error)
    return ok, f"max limit mismatch {worst:.2e}"


def check_anisotropy(cfg: IntegratorConfig) -> tuple:
    grid = GridSpec()
    X, Y = grid.mesh()
    band = sp.w0_band(grid, 0.1)
    med_x, max_y = [], []
    for eps in (1.0, 0.1, 0.01):
        sys = van_der_pol(eps)
        cyc = find_limit_cycle(sys, cfg)
        f = sp.eigenfunction_grid(sys, cyc, grid, "phase", cfg)
        dx = np.abs(sp.finite_difference_field(f, "x", "angle").values)
        dy = np.abs(sp.finite_difference_field(f, "y", "angle").values)
        med_x.append(float(np.nanmedian(dx[np.abs(X) > 1.5])))
        max_y.append(float(np.nanmax(dy[band])))
    ok = med_x[0] > med_x[1] > med_x[2] and max_y[2] >= 2 * max_y[1]
    return ok, (f"median |d angle/dx| {['%.4g' % v for v in med_x]}, "
                f"max |d angle/dy| near W0 {['%.4g' % v for v in max_y]}")


def check_cross_methods(cfg: IntegratorConfig) -> tuple:
    sys = van_der_pol(1.0)
    cyc = find_limit_cycle(sys, cfg)
    e1 = abs(cyc.floquet_nu - floquet_exponent_monodromy(sys, cyc))
    rng = np.random.default_rng(2)
    P = rng.uniform([-4, -2], [4, 2], size=(50, 2))
    a = sp.phase_values(sys, cyc, P, sp.TIME_OF_FLIGHT, cfg)
    b = sp.phase_values(sys, cyc, P, sp.FOURIER_AVERAGE, cfg)
    e2 = float(np.max(np.abs(np.angle(a * np.conj(b)))))
    e3 = duality_error()
    ok = e1 < 1e-4 and e2 < 5e-3 and e3 < 1e-6
    return ok, f"nu {e1:.1e}, phase methods {e2:.1e} rad, time-scale duality {e3:.1e}"


def duality_error(n_points: int = 100) -> float:
    """Fast flow for tau/eps against an independent slow-form integration for tau."""
    rng = np.random.default_rng(3)
    P = rng.uniform([-3, -2], [3, 2], size=(n_points, 2))
    cfg = IntegratorConfig(rtol=1e-12, atol=1e-14)
    worst = 0.0
    for eps in (1.0, 0.1, 0.01):
        sys = van_der_pol(eps)

        def slow_rhs(Y, sys=sys):
            return np.stack([sys.F(Y[0], Y[1]) / sys.epsilon, sys.G(Y[0], Y[1])])

        for tau in (0.1, 1.0):
            a = flow_many(sys, P, TimeScale.FAST, tau / eps, cfg)
            b = solve_batch(slow_rhs, P.T.copy(), tau, cfg).y.T
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def check_determinism(cfg: IntegratorConfig) -> tuple:
    sys = van_der_pol(1.0)
    cyc = find_limit_cycle(sys, cfg)
    grid = GridSpec(-3, 3, -2, 2, 13, 9)
    blobs = []
    with tempfile.TemporaryDirectory() as d:
        for k, workers in enumerate((1, 2, 1)):
            f = sp.eigenfunction_grid(sys, cyc, grid, "phase", cfg, workers=workers, chunk_size=16)
            p1, p2 = Path(d) / f"f{k}.csv", Path(d) / f"f{k}.ppm"
            write_csv(f, p1)
            write_heatmap(f, p2, "angle")
            blobs.append(p1.read_bytes() + p2.read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2]
    return ok, "csv and heatmap bytes identical across worker counts" if ok else "outputs differ"


def run_suite(suite: str = "fast", cfg: IntegratorConfig = IntegratorConfig()) -> List[CheckResult]:
    checks = [
        ("cycle table", check_table),
        ("singular constants", check_singular_constants),
        ("eigen-relations", check_eigen_relations),
        ("singular eigen-relations", check_singular_eigen_relations),
        ("spectrum", check_spectrum),
        ("observable invariance", check_invariance),
        ("cross-method oracles", check_cross_methods),
        ("determinism", check_determinism),
    ]
    if suite == "full":
        checks.insert(6, ("anisotropy and steepness", check_anisotropy))
    return [_timed(name, partial_cfg(fn, cfg)) for name, fn in checks]


def partial_cfg(fn, cfg):
    return lambda: fn(cfg)


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    rows = [f"{'check'.ljust(width)}  result  time     detail"]
    for r in results:
        rows.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    "
                    f"{r.seconds:6.1f}s  {r.detail}")
    return "\n".join(rows)
