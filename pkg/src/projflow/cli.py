"""Command-line entry point.

    projflow run <config.json>
    projflow study <study.json>
    projflow lbb --nx N [--ny N]
    projflow validate <config.json>

Exit codes: 0 ok, 2 configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import linsolve
from .assembly import build_operators
from .diagnostics import fmt
from .fespace import basis_values, build_space
from .linsolve import SolverConfig
from .mesh import MeshError, TriMesh, generate_structured, read_mesh
from .scheme import ConfigError, Discretization, SimulationConfig, StepFailure, check_coupling, run
from .verification import FORCINGS, INITIALS, StudyAborted, convergence_study, get_case

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


@dataclass
class OutputOptions:
    directory: str = "output"
    field_stride: int = 0
    checkpoint_stride: int = 0


@dataclass
class RunManifest:
    config: dict
    mesh: dict
    input_hash: str
    timings: dict = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _get(d: dict, key: str, prefix: str = "", default=None, required: bool = False):
    name = f"{prefix}{key}"
    if key not in d:
        if required:
            raise ConfigError(name, "missing required field")
        return default
    return d[key]


def _number(d: dict, key: str, prefix: str = "", default=None, required: bool = False):
    v = _get(d, key, prefix, default, required)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{prefix}{key}", f"expected a number, got {v!r}")
    return v


def _positive_int(d: dict, key: str, prefix: str = "", default=None, required: bool = False, allow_zero=False):
    v = _get(d, key, prefix, default, required)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < (0 if allow_zero else 1):
        raise ConfigError(f"{prefix}{key}", f"expected a {'nonnegative' if allow_zero else 'positive'} integer, got {v!r}")
    return v


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return data


def parse_mesh(entry, base_dir: str = ".") -> TriMesh:
    if not isinstance(entry, dict):
        raise ConfigError("mesh", "expected an object")
    kind = _get(entry, "type", "mesh.", "structured")
    if kind == "structured":
        nx = _positive_int(entry, "nx", "mesh.", required=True)
        ny = _positive_int(entry, "ny", "mesh.", default=nx)
        rect = _get(entry, "rect", "mesh.", [0.0, 1.0, 0.0, 1.0])
        if not (isinstance(rect, list) and len(rect) == 4 and all(isinstance(r, (int, float)) for r in rect)):
            raise ConfigError("mesh.rect", "expected [x0, x1, y0, y1]")
        if rect[1] <= rect[0] or rect[3] <= rect[2]:
            raise ConfigError("mesh.rect", "empty rectangle")
        return generate_structured(nx, ny, tuple(float(r) for r in rect))
    if kind == "file":
        path = _get(entry, "path", "mesh.", required=True)
        path = path if os.path.isabs(path) else os.path.join(base_dir, path)
        try:
            return read_mesh(path)
        except (OSError, MeshError) as exc:
            raise ConfigError("mesh.path", str(exc))
    raise ConfigError("mesh.type", f"expected 'structured' or 'file', got {kind!r}")


def _solver(entry, name: str, default_method: str) -> SolverConfig:
    prefix = f"solver.{name}."
    if entry is None:
        entry = {}
    if not isinstance(entry, dict):
        raise ConfigError(f"solver.{name}", "expected an object")
    kwargs = {"method": _get(entry, "method", prefix, default_method)}
    for key in ("rel_tol", "abs_tol"):
        v = _number(entry, key, prefix)
        if v is not None:
            if not v > 0:
                raise ConfigError(prefix + key, "must be positive")
            kwargs[key] = float(v)
    v = _positive_int(entry, "max_iter", prefix)
    if v is not None:
        kwargs["max_iter"] = v
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(prefix + "method", str(exc))


def parse_run_config(data: dict, base_dir: str = "."):
    """JSON object -> ``(SimulationConfig, TriMesh, OutputOptions)``."""
    mesh = parse_mesh(_get(data, "mesh", required=True), base_dir)
    forcing = _get(data, "forcing", default="zero")
    if forcing not in FORCINGS:
        raise ConfigError("forcing", f"unknown forcing {forcing!r}; expected one of {FORCINGS}")
    initial = _get(data, "initial", default="zero")
    if initial not in INITIALS:
        raise ConfigError("initial", f"unknown initial field {initial!r}; expected one of {INITIALS}")
    out = _get(data, "output", default={}) or {}
    if not isinstance(out, dict):
        raise ConfigError("output", "expected an object")
    opts = OutputOptions(
        directory=str(_get(out, "dir", "output.", "output")),
        field_stride=_positive_int(out, "field_stride", "output.", 0, allow_zero=True),
        checkpoint_stride=_positive_int(out, "checkpoint_stride", "output.", 0, allow_zero=True),
    )
    if not os.path.isabs(opts.directory):
        opts.directory = os.path.join(base_dir, opts.directory)
    solver = _get(data, "solver", default={}) or {}
    if not isinstance(solver, dict):
        raise ConfigError("solver", "expected an object")
    coupling = _get(data, "coupling", default={}) or {}
    cfg = SimulationConfig(
        mu=_number(data, "mu", required=True),
        T=_number(data, "T", required=True),
        dt=_number(data, "dt", required=True),
        scheme=_get(data, "scheme", default="chorin_darcy"),
        coupling_exponent=_positive_int(coupling, "exponent", "coupling.", 2),
        coupling_safety=_number(coupling, "safety", "coupling.", 1.0),
        forcing=forcing,
        initial_data=initial,
        n_time_quad=_positive_int(data, "n_time_quad", default=4),
        prediction_solver=_solver(solver.get("prediction"), "prediction", "direct"),
        projection_solver=_solver(solver.get("projection"), "projection", "schur_cg"),
        checkpoint_stride=opts.checkpoint_stride,
        checkpoint_dir=os.path.join(opts.directory, "checkpoints"),
        debug=bool(_get(data, "debug", default=False)),
    )
    return cfg, mesh, opts


# ---------------------------------------------------------------- VTK output


def _sub_triangles(space) -> np.ndarray:
    """Split every P2 cell into four linear cells on its six nodes."""
    d = space.cell_dofs
    v0, v1, v2, m0, m1, m2 = (d[:, k] for k in range(6))
    return np.concatenate(
        [np.stack(c, axis=1) for c in [(v0, m2, m1), (m2, v1, m0), (m1, m0, v2), (m0, m1, m2)]]
    )


def nodal_fields(state, disc: Discretization):
    """Velocity and pressure at the P2 nodes.  The gradient part of a composite
    velocity is cellwise constant; it is averaged over the cells sharing a node."""
    ops = disc.ops
    V, P = ops.velocity, ops.pressure
    n = V.n_dofs
    u = np.stack([state.u.a[:n], state.u.a[n:]], axis=1)
    grad = np.einsum("tid,ti->td", P.dphi[:, 0], state.u.c[P.cell_dofs])
    acc = np.zeros((n, 2))
    count = np.zeros(n)
    for k in range(V.nloc):
        np.add.at(acc, V.cell_dofs[:, k], grad)
        np.add.at(count, V.cell_dofs[:, k], 1.0)
    u = u + acc / count[:, None]
    u[V.boundary_dofs] = 0.0
    nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    p_local = np.einsum("ki,ti->tk", basis_values(1, nodes), state.p[P.cell_dofs])
    p = np.zeros(n)
    p[V.cell_dofs.ravel()] = p_local.ravel()
    return u, p


def write_vtk(path, state, disc: Discretization) -> None:
    """Legacy ASCII VTK (version 2.0), triangle cells, point data at P2 nodes."""
    V = disc.ops.velocity
    cells = _sub_triangles(V)
    u, p = nodal_fields(state, disc)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(f"projflow step {state.m} t={fmt(state.t)}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {V.n_dofs} double\n")
        for x, y in V.dof_coords:
            fh.write(f"{fmt(x)} {fmt(y)} 0\n")
        fh.write(f"CELLS {len(cells)} {4 * len(cells)}\n")
        for c in cells:
            fh.write(f"3 {c[0]} {c[1]} {c[2]}\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("5\n" * len(cells))
        fh.write(f"POINT_DATA {V.n_dofs}\nVECTORS velocity double\n")
        for a, b in u:
            fh.write(f"{fmt(a)} {fmt(b)} 0\n")
        fh.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for v in p:
            fh.write(f"{fmt(v)}\n")


# ---------------------------------------------------------------- commands


def _input_hash(path, mesh: TriMesh) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    h.update(mesh.content_hash.encode())
    return h.hexdigest()


def cmd_run(config_path) -> int:
    timings = {}
    t0 = time.perf_counter()
    data = load_json(config_path)
    cfg, mesh, opts = parse_run_config(data, os.path.dirname(os.path.abspath(config_path)))
    os.makedirs(opts.directory, exist_ok=True)
    disc = Discretization.taylor_hood(mesh)
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = run(cfg, mesh, disc=disc)
    timings["run"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    outputs = []
    ledger_path = os.path.join(opts.directory, "ledger.csv")
    result.ledger.to_csv(ledger_path)
    outputs.append(ledger_path)
    if opts.field_stride:
        for s in result.states:
            if s.m % opts.field_stride == 0 or s.m == cfg.N:
                path = os.path.join(opts.directory, f"fields_{s.m:06d}.vtk")
                write_vtk(path, s, disc)
                outputs.append(path)
    outputs += result.checkpoints
    timings["output"] = time.perf_counter() - t0
    manifest = RunManifest(
        config=data,
        mesh={"nv": mesh.nv, "nt": mesh.nt, "h": mesh.h, "hash": mesh.content_hash},
        input_hash=_input_hash(config_path, mesh),
        timings=timings,
        outputs=outputs,
    )
    manifest_path = os.path.join(opts.directory, "manifest.json")
    manifest.outputs.append(manifest_path)
    manifest.write(manifest_path)
    print(f"{cfg.N} steps, ledger written to {ledger_path}")
    return EXIT_OK


def cmd_validate(config_path) -> int:
    data = load_json(config_path)
    cfg, mesh, _ = parse_run_config(data, os.path.dirname(os.path.abspath(config_path)))
    status = check_coupling(mesh.h, cfg.dt, cfg.coupling_exponent, cfg.coupling_safety)
    print(f"config ok: scheme={cfg.scheme} N={cfg.N} nv={mesh.nv} nt={mesh.nt}")
    print(
        f"coupling: {status} (h^{cfg.coupling_exponent} = {fmt(mesh.h ** cfg.coupling_exponent)}, "
        f"safety*sqrt(dt) = {fmt(cfg.coupling_safety * math.sqrt(cfg.dt))})"
    )
    return EXIT_OK


def cmd_study(study_path) -> int:
    data = load_json(study_path)
    name = _get(data, "case", default="case_a")
    mu = float(_number(data, "mu", default=0.05))
    T = float(_number(data, "T", default=1.0))
    if not (mu > 0 and T > 0):
        raise ConfigError("mu" if not mu > 0 else "T", "must be positive")
    try:
        case = get_case(name, mu, T)
    except KeyError as exc:
        raise ConfigError("case", str(exc))
    schemes = _get(data, "scheme", default="chorin_darcy")
    schemes = [schemes] if isinstance(schemes, str) else schemes
    sched = _get(data, "schedule", required=True)
    if not isinstance(sched, list) or not sched:
        raise ConfigError("schedule", "expected a nonempty list of {nx, dt}")
    schedule = []
    for k, lvl in enumerate(sched):
        if not isinstance(lvl, dict):
            raise ConfigError(f"schedule[{k}]", "expected an object with nx and dt")
        nx = _positive_int(lvl, "nx", f"schedule[{k}].", required=True)
        dt = _number(lvl, "dt", f"schedule[{k}].", required=True)
        try:
            SimulationConfig(mu=mu, T=T, dt=dt)
        except ConfigError as exc:
            raise ConfigError(f"schedule[{k}].{exc.field}", str(exc))
        schedule.append((nx, float(dt)))
    out_dir = os.path.join(os.path.dirname(os.path.abspath(study_path)), str(_get(data, "output_dir", default="study")))
    os.makedirs(out_dir, exist_ok=True)
    for scheme in schemes:
        try:
            base = SimulationConfig(mu=mu, T=T, dt=schedule[0][1], scheme=scheme)
        except ConfigError as exc:
            raise ConfigError("scheme", str(exc))
        try:
            report = convergence_study(case, schedule, scheme, base)
        except ValueError as exc:
            raise ConfigError("schedule", str(exc))
        except StudyAborted as exc:
            print(exc.partial.table())
            cause = exc.__cause__
            step = getattr(cause, "step", "?")
            print(f"error: {exc} (step {step})", file=sys.stderr)
            return EXIT_SOLVER
        path = os.path.join(out_dir, f"study_{case.name}_{scheme}.csv")
        report.to_csv(path)
        print(report.table())
        print(f"written {path}")
    return EXIT_OK


def cmd_lbb(nxs: List[int], ny: Optional[int], pair: str, method: str) -> int:
    for nx in nxs:
        if nx < 1 or (ny is not None and ny < 1):
            raise ConfigError("nx", "mesh resolution must be positive")
        mesh = generate_structured(nx, ny or nx)
        vdeg = 2 if pair == "p2p1" else 1
        ops = build_operators(build_space(mesh, vdeg, "zero_trace"), build_space(mesh, 1, "zero_mean"))
        m = method if pair == "p2p1" else "dense"
        beta = linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method=m)
        print(f"nx={nx} ny={ny or nx} pair={pair} beta_h={fmt(beta)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="projflow", description="Projection-method Navier-Stokes solver")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a simulation from a JSON config")
    p.add_argument("config")
    p = sub.add_parser("study", help="run a convergence study from a JSON study file")
    p.add_argument("study")
    p = sub.add_parser("lbb", help="estimate the discrete inf-sup constant")
    p.add_argument("--nx", type=int, nargs="+", required=True)
    p.add_argument("--ny", type=int)
    p.add_argument("--pair", choices=("p2p1", "p1p1"), default="p2p1")
    p.add_argument("--method", choices=("iterative", "dense"), default="iterative")
    p = sub.add_parser("validate", help="check a config and report the h/dt coupling status")
    p.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "study":
            return cmd_study(args.study)
        if args.command == "lbb":
            return cmd_lbb(args.nx, args.ny, args.pair, args.method)
        return cmd_validate(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
