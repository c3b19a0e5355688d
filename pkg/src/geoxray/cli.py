"""Command-line interface.

Every subcommand prints JSON lines on stdout; the last line has
``"event": "done"``.  Settings come from built-in defaults, then an optional
``key = value`` config file (``--config``), then command-line flags.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 file-system error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io, synth
from .errors import ConfigError, GeoXrayError, NumericalError
from .grids import Grid
from .layers import DEFAULT_DIRECTIONS, build_partition, layer_errors, strip_reconstruct
from .metric import Domain, hamiltonian
from .neumann import relative_error
from .tracer import TracerConfig, trace_many
from .traveltime import (TraveltimeConfig, layer_speed_errors, simulate_measurements, solve_traveltime,
                         speed_lattice)
from .xray import XRayDataSet, forward_matrix

log = logging.getLogger("geoxray")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


@dataclass
class RunConfig:
    """Every setting a subcommand may read.  Strings are parsed on load."""

    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.4
    speed: str = "radial_cosine"
    speed_params: dict | None = None
    mode: str = "xray"
    functions: tuple = ("f1",)
    h: float = 0.04
    layers: int = 10
    directions: str | None = None
    rays: int = 900
    terms: int = 4
    delta: float | None = None
    eps: float | None = None
    bc: str | None = None
    step: float | None = None
    noise: float = 0.0
    seed: int = 0
    shells: tuple | None = None
    sweeps: int = 3
    initial_speed: str = "10"
    background: float | None = None
    out: str = "."

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if self.h <= 0:
            raise ConfigError("h must be positive")
        if self.layers < 1 or self.terms < 0 or self.rays < 1 or self.sweeps < 1:
            raise ConfigError("layers, rays and sweeps must be positive and terms non-negative")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.mode not in ("xray", "traveltime"):
            raise ConfigError("mode must be 'xray' or 'traveltime'")
        if self.directions not in (None, "all", "axes", "none"):
            raise ConfigError("directions must be 'all', 'axes' or 'none'")
        if self.step is not None and self.step <= 0:
            raise ConfigError("step must be positive")
        if self.bc not in (None, "dirichlet", "neumann"):
            raise ConfigError("bc must be 'dirichlet' or 'neumann'")

    @property
    def domain(self):
        return Domain(np.array(self.center, float), self.radius)

    def direction_set(self, mode):
        """Slab directions; by default all seven for X-ray data, whole shells for traveltime."""
        choice = self.directions or ("all" if mode == "xray" else "none")
        return {"all": DEFAULT_DIRECTIONS, "axes": DEFAULT_DIRECTIONS[:3], "none": None}[choice]


def _floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def _names(s):
    return tuple(v for v in s.replace(",", " ").split())


PARSERS = {"center": _floats, "radius": float, "speed_params": json.loads, "functions": _names,
           "h": float, "layers": int, "rays": int, "terms": int, "delta": float, "eps": float,
           "step": float, "noise": float, "seed": int, "shells": _ints, "sweeps": int, "background": float}


def load_config(file_values, overrides):
    """Merge config-file strings and parsed flag values into a RunConfig."""
    known = {f.name for f in fields(RunConfig)}
    merged = {}
    for key, raw in file_values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            merged[key] = PARSERS.get(key, str)(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    merged.update({k: v for k, v in overrides.items() if k in known and v is not None})
    return RunConfig(**merged)


def emit(event, **payload):
    print(json.dumps({"event": event, **payload}, default=_jsonable), flush=True)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    return str(v)


def _speed(cfg):
    return io.speed_from_ref(cfg.speed, cfg.speed_params)


def _out(cfg, name):
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return Path(cfg.out) / name


def _partition(cfg, mode):
    grid = Grid.for_domain(cfg.domain, cfg.h)
    return build_partition(cfg.domain, grid, cfg.layers, cfg.direction_set(mode))


def _header(cfg, field, step):
    return {"speed": field.to_ref(), "center": " ".join(map(repr, cfg.domain.center.tolist())),
            "radius": repr(cfg.radius), "step": repr(step), "seed": cfg.seed, "noise": repr(cfg.noise)}


# --- subcommands -----------------------------------------------------------

def cmd_synth(cfg):
    field = _speed(cfg)
    part = _partition(cfg, cfg.mode)
    if cfg.mode == "xray":
        step = cfg.step or 0.01
        funcs = {name: synth.reference_function(name) for name in cfg.functions}
        data = synth.xray_dataset(part, field, funcs, cfg.rays, step, cfg.noise, cfg.seed)
        path = _out(cfg, "dataset.csv")
        io.write_xray_dataset(path, data, _header(cfg, field, step))
        emit("synth", mode="xray", rays=len(data), functions=list(funcs), path=str(path))
    else:
        step = cfg.step or 0.01 / float(field.speed(cfg.domain.center))
        shells = cfg.shells or tuple(range(1, cfg.layers + 1))
        disks = [d for i in shells for d in part.disks[i - 1]]
        states, _ = synth.ray_bundle(disks, field, cfg.rays, step)
        meas, _ = simulate_measurements(cfg.domain, field, states, step)
        path = _out(cfg, "measurements.csv")
        io.write_measurements(path, meas, _header(cfg, field, step))
        emit("synth", mode="traveltime", rays=len(meas), path=str(path))


def cmd_trace(cfg, states_path=None):
    field = _speed(cfg)
    step = cfg.step or 0.01
    if states_path:
        states, _ = io.read_states(states_path)
    else:
        states = synth.random_inflow_states(cfg.domain, field, cfg.rays, np.random.default_rng(cfg.seed))
    geos = trace_many(cfg.domain, field, states, TracerConfig(step))
    kept = [g for g in geos if g is not None]
    path = _out(cfg, "geodesics.csv")
    io.write_geodesics(path, kept)
    drift = max((float(np.max(np.abs(hamiltonian(field, np.hstack([g.x, g.xi]))))) for g in kept), default=0.0)
    emit("trace", rays=len(states), exited=len(kept), max_h_drift=drift,
         mean_exit_time=float(np.mean([g.exit_time for g in kept])) if kept else None, path=str(path))


def cmd_forward(cfg, states_path, field_path=None):
    speed = _speed(cfg)
    step = cfg.step or 0.01
    states, _ = io.read_states(states_path)
    if field_path:
        gf = io.read_grid_function(field_path)
        geos = trace_many(cfg.domain, speed, states, TracerConfig(step), on_trapped="raise")
        values = (forward_matrix(geos, gf.grid) @ gf.values.ravel())[:, None]
        names = ["value"]
    else:
        names = list(cfg.functions)
        geos = trace_many(cfg.domain, speed, states, TracerConfig(step), on_trapped="raise")
        values = synth.line_integrals(cfg.domain, speed, states, [synth.reference_function(n) for n in names], step)
    data = XRayDataSet(states, geos, values[:, 0], meta={"values": values, "names": names})
    path = _out(cfg, "forward.csv")
    io.write_xray_dataset(path, data, _header(cfg, speed, step))
    emit("forward", rays=len(states), path=str(path))


def cmd_invert_xray(cfg, dataset_path):
    states, _, values, names, header = io.read_xray_dataset(dataset_path)
    field = io.speed_from_ref(header.get("speed", cfg.speed), cfg.speed_params)
    step = float(header.get("step", cfg.step or 0.01))
    geos = trace_many(cfg.domain, field, states, TracerConfig(step), on_trapped="raise")
    data = XRayDataSet(states, geos, values[:, 0], "file", {"values": values, "names": names})
    part = _partition(cfg, "xray")
    kwargs = {k: v for k, v in (("delta", cfg.delta), ("eps", cfg.eps), ("bc", cfg.bc)) if v is not None}
    res = strip_reconstruct(data, part, cfg.terms, **kwargs)
    cg = res.grid
    for j, name in enumerate(names):
        path = _out(cfg, f"recon_{name}.bin")
        io.write_grid_function(path, res.field(-1, j), cfg.domain)
        report = {"name": name, "path": str(path), "uncovered": res.uncovered}
        if name in synth.TEST_FUNCTIONS:
            truth = cg.sample(synth.reference_function(name))
            report["term_errors"] = [relative_error(res.field(n, j), truth) for n in range(cfg.terms + 1)]
            report["layer_errors"] = layer_errors(res, truth, part, -1, j)
        emit("invert-xray", **report)


def _initial_speed(cfg, grid):
    try:
        value = float(cfg.initial_speed)
    except ValueError:
        g0 = io.read_speed(cfg.initial_speed)
        if g0.shape != grid.shape:
            raise ConfigError("the initial speed file does not match the grid") from None
        return g0, None
    if value <= 0:
        raise ConfigError("the initial speed must be positive")
    return speed_lattice(grid, np.full(grid.n_total, value)), value


def cmd_invert_traveltime(cfg, measurements_path, truth=None):
    meas, _ = io.read_measurements(measurements_path)
    part = _partition(cfg, "traveltime")
    g0, const = _initial_speed(cfg, part.grid)
    tcfg = TraveltimeConfig(step=cfg.step, sweeps=cfg.sweeps, n_terms=cfg.terms, layers=cfg.shells,
                            **{k: v for k, v in (("delta", cfg.delta), ("bc", cfg.bc)) if v is not None})
    res = solve_traveltime(meas, g0, part, tcfg)
    for entry in res.log:
        emit("disk", **entry)
    path = _out(cfg, "speed.bin")
    io.write_speed(path, res.iterate.speed)
    report = {"path": str(path), "clamped": res.clamped}
    if truth is not None:
        shells = cfg.shells or tuple(range(1, part.k + 1))
        report["layer_errors"] = layer_speed_errors(res.iterate.speed, truth, part, shells)
        bg = cfg.background if cfg.background is not None else const
        if bg is not None:
            report["perturbation_errors"] = layer_speed_errors(res.iterate.speed, truth, part, shells, bg)
    emit("invert-traveltime", **report)


def cmd_export(cfg, field_path, axis, index):
    gf = io.read_grid_function(field_path)
    path = _out(cfg, f"slice_axis{axis}_{index}.csv")
    table = io.export_slice(path, gf, axis, index)
    emit("export", nodes=len(table), nan=int(np.isnan(table[:, 3]).sum()), path=str(path))


# --- argument parsing ------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key = value settings file; flags override it")
    p.add_argument("--center", type=_floats)
    p.add_argument("--radius", type=float)
    p.add_argument("--speed", help="analytic speed id or a speed file")
    p.add_argument("--speed-params", type=json.loads, help="JSON parameters of an analytic speed")
    p.add_argument("--h", type=float, help="fine grid spacing")
    p.add_argument("--layers", type=int, help="number of shells")
    p.add_argument("--directions", choices=["all", "axes", "none"],
                   help="slab directions (default: all for X-ray, none for traveltime)")
    p.add_argument("--rays", type=int, help="ray budget per disk")
    p.add_argument("--terms", type=int, help="Neumann series terms N")
    p.add_argument("--delta", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--bc", choices=["dirichlet", "neumann"])
    p.add_argument("--step", type=float, help="RK4 step")
    p.add_argument("--noise", type=float, help="relative noise level")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="geoxray", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="simulate an X-ray dataset or traveltime measurements")
    _common(p)
    p.add_argument("--mode", choices=["xray", "traveltime"])
    p.add_argument("--functions", type=_names, help="test functions, e.g. f1,f3")
    p.add_argument("--shells", type=_ints, help="shells whose disks get rays (traveltime)")
    p = sub.add_parser("trace", help="trace geodesics and write their samples")
    _common(p)
    p.add_argument("--states", help="entry states CSV; default random inflow states")
    p = sub.add_parser("forward", help="X-ray transform of test functions or a field file")
    _common(p)
    p.add_argument("--states", required=True)
    p.add_argument("--functions", type=_names)
    p.add_argument("--field", help="grid function file instead of test functions")
    p = sub.add_parser("invert-xray", help="layer-stripping Neumann-series reconstruction")
    _common(p)
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("invert-traveltime", help="recover the speed from scattering measurements")
    _common(p)
    p.add_argument("--measurements", required=True)
    p.add_argument("--initial-speed", help="constant value or speed file")
    p.add_argument("--shells", type=_ints)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--truth", help="analytic speed id to report errors against")
    p.add_argument("--truth-params", type=json.loads)
    p.add_argument("--background", type=float, help="reference speed for perturbation errors")
    p = sub.add_parser("export", help="write a lattice slice as CSV")
    _common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--axis", type=int, required=True)
    p.add_argument("--index", type=int, required=True)
    return parser


def run(args):
    file_values = io.read_config(args.config) if args.config else {}
    cfg = load_config(file_values, vars(args))
    cmd = args.command
    if cmd == "synth":
        cmd_synth(cfg)
    elif cmd == "trace":
        cmd_trace(cfg, args.states)
    elif cmd == "forward":
        cmd_forward(cfg, args.states, args.field)
    elif cmd == "invert-xray":
        cmd_invert_xray(cfg, args.dataset)
    elif cmd == "invert-traveltime":
        truth = io.speed_from_ref(args.truth, args.truth_params) if args.truth else None
        cmd_invert_traveltime(cfg, args.measurements, truth)
    elif cmd == "export":
        cmd_export(cfg, args.field, args.axis, args.index)
    emit("done", command=cmd, config=asdict(cfg))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except BrokenPipeError:
        # the reader went away (e.g. piped into head); silence the final flush
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except NumericalError as exc:
        emit("error", kind=type(exc).__name__, message=str(exc))
        return EXIT_NUMERIC
    except (ConfigError, GeoXrayError, ValueError, KeyError) as exc:
        emit("error", kind=type(exc).__name__, message=str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        emit("error", kind=type(exc).__name__, message=str(exc))
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
