"""Files: lattice fields, ray datasets, measurements, configs and slices.

Lattice fields are a short text header followed by little-endian float64
values in x-fastest order; everything else is CSV with ``%.17g`` floats and
``# key = value`` header lines, so every round trip is bit-exact.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, IndexOutOfRange
from .grids import Grid, GridFunction
from .metric import Domain, GriddedSpeed

FLOAT_FMT = "%.17g"
FIELD_MAGIC = "geoxray-field 1"
STATE_COLUMNS = ["x", "y", "z", "xi_x", "xi_y", "xi_z"]
MEASUREMENT_COLUMNS = (STATE_COLUMNS + ["exit_" + c for c in STATE_COLUMNS] + ["exit_time"])


# --- lattice fields --------------------------------------------------------

def write_field(path, values, origin, spacing, meta=None):
    """Write a 3D array on a lattice; NaN marks nodes without a value."""
    values = np.asarray(values, float)
    if values.ndim != 3:
        raise ValueError("field values must be a 3D array")
    header = {"shape": list(values.shape), "origin": [float(o) for o in np.asarray(origin, float).ravel()],
              "spacing": float(spacing), "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(f"{FIELD_MAGIC}\n{json.dumps(header)}\n".encode())
        fh.write(values.astype("<f8").tobytes(order="F"))


def read_field(path):
    """Inverse of ``write_field``: ``(values, origin, spacing, meta)``."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").strip()
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: not a geoxray field file")
        header = json.loads(fh.readline())
        raw = fh.read()
    shape = tuple(header["shape"])
    if len(raw) != 8 * math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, found {len(raw) // 8}")
    values = np.frombuffer(raw, "<f8").reshape(shape, order="F").astype(float)
    return values, np.array(header["origin"], float), float(header["spacing"]), header.get("meta", {})


def write_speed(path, speed):
    write_field(path, speed.values, speed.origin, speed.spacing[0], {"kind": "speed"})


def read_speed(path):
    values, origin, h, _ = read_field(path)
    if np.any(~np.isfinite(values)):
        raise ValueError(f"{path}: a speed file must define every node")
    return GriddedSpeed(origin, h, values, source=str(path))


def write_grid_function(path, gf, domain=None):
    """Grid function with nodes outside the support stored as NaN."""
    meta = {"kind": "grid_function", "level": gf.grid.level}
    if domain is not None:
        meta["domain"] = {"center": domain.center.tolist(), "radius": domain.radius}
    write_field(path, np.where(gf.grid.support, gf.values, np.nan), gf.grid.origin, gf.grid.h, meta)


def read_grid_function(path):
    values, origin, h, meta = read_field(path)
    support = np.isfinite(values)
    inside = support
    if "domain" in meta:
        dom = Domain(np.array(meta["domain"]["center"]), meta["domain"]["radius"])
        axes = [origin[a] + h * np.arange(values.shape[a]) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        inside = support & (dom.distance(pts) <= dom.radius)
    grid = Grid(origin, h, values.shape, support, inside, meta.get("level", "fine"))
    return GridFunction(grid, np.where(support, values, 0.0))


# --- CSV tables ------------------------------------------------------------

def _write_table(path, columns, data, header=None):
    lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
    lines.append(",".join(columns))
    data = np.asarray(data, float).reshape(-1, len(columns))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, data, fmt=FLOAT_FMT, delimiter=",")


def _read_table(path, columns=None):
    header = {}
    with open(path) as fh:
        line = fh.readline()
        while line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
            line = fh.readline()
        names = line.strip().split(",")
        if columns is not None and names[:len(columns)] != list(columns):
            raise ValueError(f"{path}: unexpected columns {names}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(names)))
    return names, data, header


def write_states(path, states, header=None):
    _write_table(path, STATE_COLUMNS, states, header)


def read_states(path):
    _, data, header = _read_table(path, STATE_COLUMNS)
    return data[:, :6], header


def write_xray_dataset(path, data, header=None):
    """Entry states, exit time and one column per right-hand side."""
    values = np.asarray(data.meta.get("values", data.values), float).reshape(len(data), -1)
    names = data.meta.get("names") or [f"value{j}" for j in range(values.shape[1])]
    exit_time = np.array([g.exit_time for g in data.geodesics])
    table = np.column_stack([data.initial, exit_time, values])
    _write_table(path, STATE_COLUMNS + ["exit_time"] + list(names), table, header)


def read_xray_dataset(path):
    """``(states, exit_time, values (m, q), names, header)``."""
    names, data, header = _read_table(path, STATE_COLUMNS + ["exit_time"])
    return data[:, :6], data[:, 6], data[:, 7:], names[7:], header


def write_measurements(path, meas, header=None):
    _write_table(path, MEASUREMENT_COLUMNS, meas.as_array(), header)


def read_measurements(path):
    from .traveltime import Measurement

    _, data, header = _read_table(path, MEASUREMENT_COLUMNS)
    return Measurement(data[:, :6], data[:, 6:12], data[:, 12]), header


def write_geodesics(path, geodesics):
    """Long-format samples: ``ray, s, x, y, z, xi_x, xi_y, xi_z``."""
    rows = [np.column_stack([np.full(g.n_samples, j), g.s, g.x, g.xi]) for j, g in enumerate(geodesics)]
    table = np.vstack(rows) if rows else np.zeros((0, 8))
    _write_table(path, ["ray", "s"] + STATE_COLUMNS, table)


# --- configs ---------------------------------------------------------------

def read_config(path):
    """``key = value`` lines; ``#`` starts a comment.  Values stay strings."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_config(path, cfg):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in cfg.items()))


# --- slices ----------------------------------------------------------------

def slice_table(gf, axis, index):
    """Rows ``x, y, z, value`` of the lattice plane ``axis = index``.

    Nodes outside the domain are emitted as NaN.
    """
    if axis not in (0, 1, 2):
        raise ConfigError("axis must be 0, 1 or 2")
    n = gf.grid.shape[axis]
    if not 0 <= index < n:
        raise IndexOutOfRange(f"slice index {index} outside 0..{n - 1}")
    pts = np.take(gf.grid.coords(), index, axis=axis).reshape(-1, 3)
    vals = np.where(gf.grid.inside, gf.values, np.nan)
    return np.column_stack([pts, np.take(vals, index, axis=axis).ravel()])


def export_slice(path, gf, axis, index):
    table = slice_table(gf, axis, index)
    _write_table(path, ["x", "y", "z", "value"], table, {"axis": axis, "index": index})
    return table


def speed_from_ref(ref, params=None):
    """Resolve ``analytic:<id>:<json>``, a bare analytic id or a speed file path."""
    from .metric import analytic_speed

    ref = str(ref)
    if ref.startswith("analytic:"):
        _, kind, rest = ref.split(":", 2)
        return analytic_speed(kind, **json.loads(rest))
    if Path(ref).is_file():
        return read_speed(ref)
    return analytic_speed(ref, **(params or {}))
