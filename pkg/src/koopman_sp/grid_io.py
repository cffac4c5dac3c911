"""Grid sweeps, CSV field files and PPM heatmaps.

CSV layout::

    # {"grid": {...}, "epsilon": ..., ...}     metadata as one JSON line
    x,y,re,im                                  or x,y,value for real fields
    -4.0,-2.0,0.123...,-0.99...                one row per node, x fastest

Numbers are printed with ``repr`` (shortest round-trip form), so reading a
file back gives bit-identical floats. Sentinel cells are written as ``NaN``.

Heatmaps are binary PPM (P6): ``P6\\n# <json meta>\\n<nx> <ny>\\n255\\n``
followed by ``nx*ny`` RGB triplets, first row at ``y_max``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .exceptions import DomainError, KoopmanSPError
from .fields import Field, GridSpec

SENTINEL_RGB = (128, 128, 128)
DEFAULT_CHUNK = 512


# -- sweep ----------------------------------------------------------------------

def _eval_chunk(cell_fn, vectorized, dtype, xs, ys):
    """Evaluate one chunk; returns (values, number of failed cells)."""
    nan = complex(np.nan, np.nan) if dtype is complex else np.nan
    if vectorized:
        try:
            out = np.asarray(cell_fn(xs, ys), dtype=dtype).reshape(xs.shape)
            return out, 0
        except (KoopmanSPError, ArithmeticError, ValueError):
            pass
        # retry cell by cell so one failure does not spoil the chunk
        out = np.empty(xs.shape, dtype=dtype)
        failed = 0
        for i in range(xs.size):
            try:
                out[i] = np.asarray(cell_fn(xs[i:i + 1], ys[i:i + 1]), dtype=dtype).ravel()[0]
            except (KoopmanSPError, ArithmeticError, ValueError):
                out[i] = nan
                failed += 1
        return out, failed
    out = np.empty(xs.shape, dtype=dtype)
    failed = 0
    for i in range(xs.size):
        try:
            out[i] = cell_fn(float(xs[i]), float(ys[i]))
        except (KoopmanSPError, ArithmeticError, ValueError):
            out[i] = nan
            failed += 1
    return out, failed


def sweep(grid: GridSpec, cell_fn: Callable, workers: int = 1, vectorized: bool = False,
          dtype=float, chunk_size: Optional[int] = None, skip=None) -> Field:
    """Evaluate ``cell_fn`` on every node of ``grid``.

    ``cell_fn(x, y)`` returns one value, or with ``vectorized=True`` maps
    coordinate arrays to a value array. Chunking is fixed by ``chunk_size``
    alone, so the result does not depend on ``workers``. Cells in ``skip``
    (flat mask) and cells whose evaluation raised are left as NaN.
    """
    dtype = complex if dtype is complex else float
    P = grid.points()
    n = P.shape[0]
    todo = np.arange(n) if skip is None else np.flatnonzero(~np.asarray(skip, dtype=bool).ravel())
    chunk = int(chunk_size or DEFAULT_CHUNK)
    blocks = [todo[i:i + chunk] for i in range(0, todo.size, chunk)]
    values = np.full(n, np.nan, dtype=dtype)
    if dtype is complex:
        values[:] = complex(np.nan, np.nan)
    failed = 0
    args = [(cell_fn, vectorized, dtype, P[b, 0].copy(), P[b, 1].copy()) for b in blocks]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_eval_chunk, *zip(*args)))
    else:
        results = [_eval_chunk(*a) for a in args]
    for b, (out, nf) in zip(blocks, results):
        values[b] = out
        failed += nf
    field = Field(grid, values.reshape(grid.ny, grid.nx),
                  {"grid": grid.to_dict(), "n_failed": failed,
                   "n_skipped": int(n - todo.size)})
    field.meta["n_sentinel"] = field.n_sentinel
    return field


# -- CSV ------------------------------------------------------------------------

def _fmt(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "NaN"
    return repr(v)


def _json_default(o):
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dump_meta(meta: dict) -> str:
    return json.dumps(meta, default=_json_default, allow_nan=True)


def write_csv(field: Field, path) -> None:
    meta = dict(field.meta)
    meta["grid"] = field.grid.to_dict()
    P = field.grid.points()
    v = field.values.ravel()
    lines = ["# " + dump_meta(meta)]
    if field.is_complex:
        lines.append("x,y,re,im")
        ok = field.computed.ravel()
        for (x, y), z, good in zip(P, v, ok):
            re, im = (_fmt(z.real), _fmt(z.imag)) if good else ("NaN", "NaN")
            lines.append(f"{_fmt(x)},{_fmt(y)},{re},{im}")
    else:
        lines.append("x,y,value")
        for (x, y), z in zip(P, v):
            lines.append(f"{_fmt(x)},{_fmt(y)},{_fmt(z)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _grid_from_coords(xs, ys) -> GridSpec:
    ux = np.unique(xs)
    uy = np.unique(ys)
    return GridSpec(float(ux[0]), float(ux[-1]), float(uy[0]), float(uy[-1]), ux.size, uy.size)


def read_csv(path) -> Field:
    """Read a field written by :func:`write_csv`."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body = []
    header = None
    for ln in lines:
        if not ln.strip():
            continue
        if ln.startswith("#"):
            if header is None and not meta:
                try:
                    meta = json.loads(ln[1:])
                except json.JSONDecodeError as exc:
                    raise DomainError(f"malformed metadata line in {path}") from exc
            continue
        if header is None:
            header = ln.split(",")
            continue
        body.append(ln.split(","))
    if header not in (["x", "y", "re", "im"], ["x", "y", "value"]):
        raise DomainError(f"malformed CSV header in {path}: {header}")
    if any(len(r) != len(header) for r in body):
        raise DomainError(f"malformed CSV row in {path}")
    try:
        arr = np.array([[float(t) for t in r] for r in body], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise DomainError(f"malformed number in {path}") from exc
    if "grid" in meta:
        g = meta["grid"]
        grid = GridSpec(g["x_min"], g["x_max"], g["y_min"], g["y_max"], g["nx"], g["ny"])
    else:
        grid = _grid_from_coords(arr[:, 0], arr[:, 1])
    if arr.shape[0] != grid.nx * grid.ny:
        raise DomainError(f"{path}: expected {grid.nx * grid.ny} rows, found {arr.shape[0]}")
    if len(header) == 4:
        values = arr[:, 2] + 1j * arr[:, 3]
        nan = np.isnan(arr[:, 2]) | np.isnan(arr[:, 3])
        values[nan] = complex(np.nan, np.nan)
    else:
        values = arr[:, 2]
    return Field(grid, values.reshape(grid.ny, grid.nx), meta)


# -- heatmaps -------------------------------------------------------------------

_LUT_CACHE: dict = {}


def load_colormap(name: str) -> np.ndarray:
    """256x3 uint8 lookup table shipped with the package."""
    if name not in _LUT_CACHE:
        try:
            text = resources.files("koopman_sp").joinpath("data", f"{name}.csv").read_text()
        except FileNotFoundError as exc:
            raise DomainError(f"unknown colormap {name!r}") from exc
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        _LUT_CACHE[name] = np.array(rows, dtype=np.uint8)
    return _LUT_CACHE[name]


def _transform_values(field: Field, transform: str) -> np.ndarray:
    v = field.values
    if transform == "angle":
        return np.angle(v)
    if transform == "log_abs":
        with np.errstate(divide="ignore"):
            return np.log(np.abs(v))
    if transform == "re":
        return np.real(v).astype(float)
    raise DomainError(f"unknown transform {transform!r}")


def render_heatmap(field: Field, transform: str = "angle", colormap: Optional[str] = None,
                   clip=None):
    """RGB array of shape (ny, nx, 3), row 0 at ``y_max``, plus the clip range used."""
    if field.values.size == 0:
        raise DomainError("empty field")
    cmap = colormap or ("twilight" if transform == "angle" else "viridis")
    lut = load_colormap(cmap)
    n = lut.shape[0]
    t = _transform_values(field, transform)
    ok = field.computed & np.isfinite(t)
    idx = np.zeros(t.shape, dtype=np.int64)
    if transform == "angle":
        # cyclic: -pi and pi share a colour, 0 lands on the midpoint
        idx[ok] = np.floor((t[ok] + math.pi) / (2 * math.pi) * n).astype(np.int64) % n
        used = (-math.pi, math.pi)
    else:
        if clip is None:
            lo = float(t[ok].min()) if ok.any() else 0.0
            hi = float(t[ok].max()) if ok.any() else 1.0
        else:
            lo, hi = float(clip[0]), float(clip[1])
        span = hi - lo
        if span > 0:
            u = (np.clip(t[ok], lo, hi) - lo) / span
            idx[ok] = np.minimum((u * n).astype(np.int64), n - 1)
        else:
            idx[ok] = n // 2
        used = (lo, hi)
    rgb = lut[idx]
    rgb[~ok] = SENTINEL_RGB
    return rgb[::-1].copy(), used


def write_heatmap(field: Field, path, transform: str = "angle", colormap: Optional[str] = None,
                  clip=None, meta: Optional[dict] = None) -> None:
    """Write a binary PPM heatmap, one pixel per grid node."""
    rgb, used = render_heatmap(field, transform, colormap, clip)
    info = dict(meta if meta is not None else field.meta)
    info.update({"transform": transform,
                 "colormap": colormap or ("twilight" if transform == "angle" else "viridis"),
                 "clip": list(used)})
    comment = dump_meta(info).replace("\n", " ")
    header = f"P6\n# {comment}\n{field.grid.nx} {field.grid.ny}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rgb.astype(np.uint8).tobytes())


def read_ppm(path):
    """Return ``(rgb array (ny, nx, 3), metadata dict)`` of a file from :func:`write_heatmap`."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 4)
    if parts[0] != b"P6" or not parts[1].startswith(b"#"):
        raise DomainError(f"{path} is not a heatmap written by this package")
    meta = json.loads(parts[1][1:].decode("ascii"))
    nx, ny = (int(t) for t in parts[2].split())
    rgb = np.frombuffer(parts[4], dtype=np.uint8).reshape(ny, nx, 3)
    return rgb, meta


def default_workers() -> int:
    """Worker count from ``KOOPMAN_SP_WORKERS`` (1 if unset)."""
    raw = os.environ.get("KOOPMAN_SP_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise DomainError(f"KOOPMAN_SP_WORKERS must be an integer, got {raw!r}") from exc
