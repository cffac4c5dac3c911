"""Command-line front end: ``koopman-sp <command> [options]``.

Commands: ``cycle``, ``phase-grid``, ``isostable-grid``, ``singular-grid`` and
``verify``. Settings come from defaults, then an optional ``--config`` file of
``key = value`` lines, then explicit flags. The effective settings are
embedded in every output file.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .cycle import cycle_report, find_limit_cycle
from .exceptions import KoopmanSPError
from .fields import Field, GridSpec
from .grid_io import default_workers, dump_meta, write_csv, write_heatmap
from .model import van_der_pol
from .ode import IntegratorConfig
from . import singular as sg
from . import spectral as sp


@dataclass
class RunConfig:
    epsilon: Optional[float] = None
    x_min: float = -4.0
    x_max: float = 4.0
    y_min: float = -2.0
    y_max: float = 2.0
    nx: int = 201
    ny: int = 101
    rtol: float = 1e-9
    atol: float = 1e-11
    method: str = sp.TIME_OF_FLIGHT
    capture_tol: Optional[float] = None
    budget_periods: float = 50.0
    output_dir: str = "."
    workers: int = 1
    seed: int = 0
    chunk_size: int = 512

    def grid(self) -> GridSpec:
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.nx, self.ny)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(rtol=self.rtol, atol=self.atol)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        if "Optional" in kind:
            return None
        raise ValueError(f"{key} cannot be empty")
    if "float" in kind:
        return float(raw)
    if "int" in kind:
        return int(raw)
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, epsilon: bool = True) -> None:
    if epsilon:
        p.add_argument("--epsilon", type=float, help="time-scale ratio, > 0")
    p.add_argument("--config", help="file of key = value lines")
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--workers", type=int, help="default from KOOPMAN_SP_WORKERS, else 1")
    p.add_argument("--seed", type=int)


def _add_grid(p: argparse.ArgumentParser) -> None:
    for name in ("x-min", "x-max", "y-min", "y-max"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopman-sp",
                                     description="Koopman eigenfunctions of the van der Pol oscillator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cycle", help="period, frequency and Floquet exponent as JSON")
    _add_common(p)
    p.add_argument("--output", help="write the JSON here instead of stdout")

    for name, text in (("phase-grid", "phase eigenfunction on a grid"),
                       ("isostable-grid", "amplitude eigenfunction on a grid")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_grid(p)
        p.add_argument("--capture-tol", dest="capture_tol", type=float)
        p.add_argument("--budget-periods", dest="budget_periods", type=float)
        if name == "phase-grid":
            p.add_argument("--method", choices=sp.PHASE_METHODS)

    p = sub.add_parser("singular-grid", help="singular-limit phase eigenfunction on a grid")
    _add_common(p, epsilon=False)
    _add_grid(p)

    p = sub.add_parser("verify", help="run the self-check suite")
    p.add_argument("--suite", choices=("fast", "full"), default="fast")
    _add_common(p, epsilon=False)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {"workers": default_workers()}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    if cfg.epsilon is not None and not cfg.epsilon > 0:
        raise UsageError("--epsilon must be positive; the eps = 0 limit is available as singular-grid")
    if cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


def _need_epsilon(cfg: RunConfig) -> float:
    if cfg.epsilon is None:
        raise UsageError("--epsilon is required")
    return cfg.epsilon


def embedded_config(cfg: RunConfig) -> dict:
    """Settings recorded in outputs; the worker count only affects scheduling."""
    conf = asdict(cfg)
    conf.pop("workers")
    return conf


def _tag(eps: float) -> str:
    return f"eps{eps:g}"


def _magnitude_field(field: Field, axis: str, transform: str, label: str) -> Field:
    d = sp.finite_difference_field(field, axis, transform)
    with np.errstate(divide="ignore"):
        v = np.log10(np.abs(d.values))
    v[~np.isfinite(v) & ~np.isnan(d.values)] = np.nan
    meta = dict(d.meta)
    meta["observable"] = label
    return Field(field.grid, v, meta)


def _write_outputs(out: Path, stem: str, field: Field, images, config: dict) -> List[str]:
    out.mkdir(parents=True, exist_ok=True)
    field.meta["config"] = config
    written = []
    path = out / f"{stem}.csv"
    write_csv(field, path)
    written.append(str(path))
    for suffix, f, transform in images:
        f.meta["config"] = config
        path = out / f"{stem}_{suffix}.ppm"
        write_heatmap(f, path, transform)
        written.append(str(path))
    return written


def cmd_cycle(cfg: RunConfig, args) -> int:
    eps = _need_epsilon(cfg)
    rep = cycle_report(van_der_pol(eps), cfg.integrator())
    text = rep.to_json(config=embedded_config(cfg))
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_grid(cfg: RunConfig, which: str) -> int:
    eps = _need_epsilon(cfg)
    sysm = van_der_pol(eps)
    icfg = cfg.integrator()
    cyc = find_limit_cycle(sysm, icfg)
    grid = cfg.grid()
    kw = dict(capture_tol=cfg.capture_tol, budget_periods=cfg.budget_periods,
              workers=cfg.workers, chunk_size=cfg.chunk_size)
    conf = embedded_config(cfg)
    if which == "phase":
        field = sp.eigenfunction_grid(sysm, cyc, grid, "phase", icfg, method=cfg.method, **kw)
        images = [("angle", field, "angle"),
                  ("log10_dangle_dx", _magnitude_field(field, "x", "angle", "log10|d angle/dx|"), "re"),
                  ("log10_dangle_dy", _magnitude_field(field, "y", "angle", "log10|d angle/dy|"), "re")]
        stem = f"phase_{_tag(eps)}"
    else:
        field = sp.eigenfunction_grid(sysm, cyc, grid, "amplitude", icfg, **kw)
        images = [("log_abs", field, "re"),
                  ("log10_dlog_dx", _magnitude_field(field, "x", "re", "log10|d ln|phi|/dx|"), "re"),
                  ("log10_dlog_dy", _magnitude_field(field, "y", "re", "log10|d ln|phi|/dy|"), "re")]
        stem = f"isostable_{_tag(eps)}"
    written = _write_outputs(Path(cfg.output_dir), stem, field, images, conf)
    print(dump_meta({"files": written, "n_sentinel": field.n_sentinel,
                     "n_failed": field.meta.get("n_failed", 0)}))
    return 0


def _singular_chunk(xs, ys):
    return sg.singular_eigenfunction_values(xs, ys)


def cmd_singular(cfg: RunConfig) -> int:
    from .grid_io import sweep

    grid = cfg.grid()
    field = sweep(grid, _singular_chunk, workers=cfg.workers, vectorized=True, dtype=complex,
                  chunk_size=cfg.chunk_size)
    field.meta.update({"epsilon": 0.0, "eigenvalue": [0.0, sg.OMEGA0],
                       "method": "singular_limit", "observable": "phase"})
    re = Field(grid, field.values.real, dict(field.meta, observable="re"))
    images = [("angle", field, "angle"), ("re", re, "re")]
    written = _write_outputs(Path(cfg.output_dir), "singular", field, images, embedded_config(cfg))
    print(dump_meta({"files": written, "n_sentinel": field.n_sentinel}))
    return 0


def cmd_verify(cfg: RunConfig, suite: str) -> int:
    from .verification import format_table, run_suite

    results = run_suite(suite, cfg.integrator())
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        cfg = resolve_config(args)
        if args.command == "cycle":
            return cmd_cycle(cfg, args)
        if args.command == "phase-grid":
            return cmd_grid(cfg, "phase")
        if args.command == "isostable-grid":
            return cmd_grid(cfg, "amplitude")
        if args.command == "singular-grid":
            return cmd_singular(cfg)
        return cmd_verify(cfg, args.suite)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, KoopmanSPError) and not isinstance(exc, UsageError):
            print(f"koopman-sp: error: {exc}", file=sys.stderr)
            return 1
        print(f"koopman-sp: usage error: {exc}", file=sys.stderr)
        return 2
    except (KoopmanSPError, OSError, ArithmeticError) as exc:
        print(f"koopman-sp: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
