"""Chorin projection (Darcy-form projection) and incremental projection
(Poisson-form projection) time stepping on a Taylor-Hood P2/P1 pair."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp

from . import linsolve
from .assembly import OperatorSet, apply_dirichlet, assemble_forcing, build_operators
from .fespace import FEFunction, build_space, l2_project
from .linsolve import SolverConfig, SolverError
from .mesh import TriMesh

logger = logging.getLogger(__name__)

SCHEMES = ("chorin_darcy", "incremental_poisson")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class StepFailure(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"solver failure at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class SimulationConfig:
    mu: float
    T: float
    dt: float
    scheme: str = "chorin_darcy"
    coupling_exponent: int = 2
    coupling_safety: float = 1.0
    forcing: str = "zero"
    initial_data: str = "zero"
    n_time_quad: int = 4
    prediction_solver: SolverConfig = SolverConfig(method="direct")
    projection_solver: SolverConfig = SolverConfig(method="schur_cg")
    checkpoint_stride: int = 0
    checkpoint_dir: Optional[str] = None
    debug: bool = False

    def __post_init__(self):
        for name in ("mu", "T", "dt"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be a finite positive number, got {v!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError("dt", f"T/dt = {ratio!r} is not a positive integer")
        if self.n_time_quad < 1:
            raise ConfigError("n_time_quad", "must be at least 1")
        if not (isinstance(self.coupling_safety, (int, float)) and self.coupling_safety > 0):
            raise ConfigError("coupling_safety", "must be positive")
        if self.coupling_exponent < 1:
            raise ConfigError("coupling_exponent", "must be at least 1")
        if self.checkpoint_stride < 0:
            raise ConfigError("checkpoint_stride", "must be nonnegative")

    @property
    def N(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def incremental(self) -> bool:
        return self.scheme == "incremental_poisson"


@dataclass(frozen=True)
class CompositeVelocity:
    """Velocity ``sum a_i phi_i + sum c_j grad psi_j`` in ``U_h + grad P_h``."""

    a: np.ndarray
    c: np.ndarray

    def tested_on_velocity(self, ops: OperatorSet) -> np.ndarray:
        """``(u, phi_i)`` for every velocity basis function."""
        return ops.M_u @ self.a + ops.G @ self.c

    def tested_on_gradients(self, ops: OperatorSet) -> np.ndarray:
        """``(u, grad psi_j)`` for every pressure basis function."""
        return ops.G.T @ self.a + ops.A_p @ self.c

    def inner(self, other: "CompositeVelocity", ops: OperatorSet) -> float:
        return float(
            self.a @ (ops.M_u @ other.a)
            + self.a @ (ops.G @ other.c)
            + other.a @ (ops.G @ self.c)
            + self.c @ (ops.A_p @ other.c)
        )

    def norm2(self, ops: OperatorSet) -> float:
        return self.inner(self, ops)

    def __sub__(self, other: "CompositeVelocity") -> "CompositeVelocity":
        return CompositeVelocity(self.a - other.a, self.c - other.c)

    def __add__(self, other: "CompositeVelocity") -> "CompositeVelocity":
        return CompositeVelocity(self.a + other.a, self.c + other.c)

    def scaled(self, s: float) -> "CompositeVelocity":
        return CompositeVelocity(s * self.a, s * self.c)

    @classmethod
    def from_velocity(cls, a: np.ndarray, n_p: int) -> "CompositeVelocity":
        return cls(np.asarray(a, dtype=float), np.zeros(n_p))


@dataclass(frozen=True)
class State:
    m: int
    t: float
    u: CompositeVelocity  # corrected velocity; gradient part is zero for chorin_darcy
    u_tilde: np.ndarray  # intermediate velocity, zero trace
    p: np.ndarray  # pressure, zero mean


@dataclass
class Discretization:
    """Spaces, operators and per-mesh caches for one run."""

    mesh: TriMesh
    ops: OperatorSet
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def taylor_hood(cls, mesh: TriMesh) -> "Discretization":
        V = build_space(mesh, 2, "zero_trace")
        P = build_space(mesh, 1, "zero_mean")
        return cls(mesh, build_operators(V, P))

    @property
    def mass_solve(self) -> Callable:
        if "mass" not in self._cache:
            self._cache["mass"] = linsolve.factorize(self.ops.M_u)
        return self._cache["mass"]

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.ops.n_u, bool)
        mask[self.ops.bdofs] = False
        return np.flatnonzero(mask)


def check_coupling(h: float, dt: float, k: int, safety: float = 1.0) -> str:
    """``'warn'`` when ``h**k > safety * sqrt(dt)``; the schemes are stable
    regardless, the relation only matters for convergence."""
    if min(h, dt, k, safety) <= 0:
        raise ValueError("check_coupling expects positive inputs")
    return "warn" if h**k > safety * math.sqrt(dt) else "ok"


def prediction_matrix(disc: Discretization, w: np.ndarray, config: SimulationConfig) -> sp.csr_matrix:
    ops = disc.ops
    N = ops.convection(FEFunction(ops.velocity, w, 2))
    S = ops.M_u / config.dt + N + config.mu * ops.A_u
    return apply_dirichlet(S, ops.bdofs)


def prediction_step(state: State, disc: Discretization, config: SimulationConfig, forcing_vec: np.ndarray) -> np.ndarray:
    """Intermediate velocity from the linearly implicit convection-diffusion step.

    The advecting field is the previous intermediate velocity.  The
    incremental scheme adds the previous pressure gradient.
    """
    ops = disc.ops
    S = prediction_matrix(disc, state.u_tilde, config)
    rhs = state.u.tested_on_velocity(ops) / config.dt + forcing_vec
    if config.incremental:
        rhs = rhs - ops.B.T @ state.p
    rhs = ops.zero_boundary(rhs)
    return linsolve.solve_prediction(S, rhs, config.prediction_solver)


def projection_step_darcy(u_tilde: np.ndarray, disc: Discretization, dt: float, solver: SolverConfig):
    ops = disc.ops
    u, p = linsolve.solve_darcy_saddle(
        ops.M_u, ops.B, ops.M_u @ u_tilde, dt, solver, M_p=ops.M_p, mass_solve=disc.mass_solve
    )
    return CompositeVelocity.from_velocity(u, ops.n_p), p


def projection_step_poisson(u_tilde: np.ndarray, p_prev: np.ndarray, disc: Discretization, dt: float, solver: SolverConfig):
    """Pressure from ``A_p p = A_p p_prev - (div u_tilde, .)/dt``; the corrected
    velocity is ``u_tilde - dt grad(p - p_prev)``, kept in composite form."""
    ops = disc.ops
    rhs = ops.A_p @ p_prev + (ops.B @ u_tilde) / dt
    if solver.method == "direct":
        w = ops.M_p @ np.ones(ops.n_p)
        K = sp.bmat([[ops.A_p, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
        p = linsolve.solve_direct(K, np.append(rhs, 0.0))[:-1]
    else:
        cg = replace(solver, method="cg")
        p = linsolve.solve_cg(ops.A_p, rhs, cg, deflate_constants=True, x0=p_prev)
    p = linsolve.zero_mean(p, ops.M_p)
    return CompositeVelocity(np.array(u_tilde, dtype=float), -dt * (p - p_prev)), p


def project(u_tilde: np.ndarray, p_prev: np.ndarray, disc: Discretization, config: SimulationConfig):
    if config.incremental:
        solver = config.projection_solver
        if solver.method == "schur_cg":
            solver = replace(solver, method="cg")
        return projection_step_poisson(u_tilde, p_prev, disc, config.dt, solver)
    return projection_step_darcy(u_tilde, disc, config.dt, config.projection_solver)


def init_state(config: SimulationConfig, disc: Discretization, initial: Optional[Callable]) -> State:
    """``u_tilde^0`` is the L2 projection of the initial field; ``(u^0, p^0)``
    come from one projection step (with zero previous pressure)."""
    ops = disc.ops
    if initial is None:
        ut0 = np.zeros(ops.n_u)
    else:
        ut0 = l2_project(initial, ops.velocity, ops.M_u, ncomp=2, solver=disc.mass_solve).coeffs
    u0, p0 = project(ut0, np.zeros(ops.n_p), disc, config)
    return State(0, 0.0, u0, ut0, p0)


def step(state: State, disc: Discretization, config: SimulationConfig, forcing_vec: np.ndarray) -> State:
    ut = prediction_step(state, disc, config, forcing_vec)
    u, p = project(ut, state.p, disc, config)
    m = state.m + 1
    return State(m, m * config.dt, u, ut, p)


def forcing_vector(disc: Discretization, forcing: Optional[Callable], m: int, config: SimulationConfig) -> np.ndarray:
    return assemble_forcing(forcing, disc.ops.velocity, m, config.dt, config.n_time_quad)


def check_state(state: State, disc: Discretization, config: SimulationConfig) -> None:
    """Per-step invariants (debug mode)."""
    from .diagnostics import weak_div_residual

    ops = disc.ops
    if np.abs(state.u_tilde[ops.bdofs]).max(initial=0.0) != 0.0:
        raise AssertionError(f"step {state.m}: intermediate velocity has nonzero trace")
    mean = (ops.M_p @ np.ones(ops.n_p)) @ state.p
    pn = math.sqrt(max(state.p @ (ops.M_p @ state.p), 0.0))
    if abs(mean) > 1e-12 * max(pn, 1e-300) and abs(mean) > 1e-15:
        raise AssertionError(f"step {state.m}: pressure mean {mean:.3e}")
    res = weak_div_residual(state.u, ops)
    tol = 10 * config.projection_solver.rel_tol * max(1.0, math.sqrt(state.u.norm2(ops)))
    if res > tol:
        raise AssertionError(f"step {state.m}: weak divergence residual {res:.3e} > {tol:.3e}")


@dataclass
class RunResult:
    config: SimulationConfig
    disc: Discretization
    states: List[State]
    forcing_vectors: List[np.ndarray]
    ledger: "EnergyLedger"  # noqa: F821
    checkpoints: List[str] = field(default_factory=list)

    @property
    def ops(self) -> OperatorSet:
        return self.disc.ops


def run(
    config: SimulationConfig,
    mesh: TriMesh,
    forcing: Optional[Callable] = None,
    initial: Optional[Callable] = None,
    disc: Optional[Discretization] = None,
) -> RunResult:
    """Run ``config.N`` steps.  ``forcing(t, x, y)`` and ``initial(x, y)``
    default to the builtin fields named in the config."""
    from .diagnostics import EnergyLedger
    from .verification import resolve_forcing, resolve_initial

    if forcing is None:
        forcing = resolve_forcing(config.forcing, config.mu)
    if initial is None:
        initial = resolve_initial(config.initial_data, config.mu)
    if disc is None:
        disc = Discretization.taylor_hood(mesh)
    if check_coupling(mesh.h, config.dt, config.coupling_exponent, config.coupling_safety) == "warn":
        logger.warning("h^k = %.3g exceeds safety*sqrt(dt) = %.3g", mesh.h**config.coupling_exponent,
                       config.coupling_safety * math.sqrt(config.dt))

    state = init_state(config, disc, initial)
    ledger = EnergyLedger(config.scheme, config.dt, config.mu)
    ledger.start(state, disc.ops)
    states, fvecs, checkpoints = [state], [], []
    for m in range(config.N):
        F = forcing_vector(disc, forcing, m, config)
        try:
            new = step(state, disc, config, F)
        except SolverError as exc:
            raise StepFailure(m + 1, exc) from exc
        ledger.append(state, new, disc.ops, F, f_norm2=float(F @ disc.mass_solve(disc.ops.zero_boundary(F))))
        if config.debug:
            check_state(new, disc, config)
        states.append(new)
        fvecs.append(F)
        state = new
        if config.checkpoint_stride and new.m % config.checkpoint_stride == 0:
            checkpoints.append(write_checkpoint(new, config, mesh, config.checkpoint_dir or "."))
    return RunResult(config, disc, states, fvecs, ledger, checkpoints)


CHECKPOINT_VERSION = 1


def write_checkpoint(state: State, config: SimulationConfig, mesh: TriMesh, directory) -> str:
    """``checkpoint_<m>.npz`` holding the coefficient vectors and a JSON header
    with version, step, time, scheme and mesh hash."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"checkpoint_{state.m:06d}.npz")
    header = {
        "version": CHECKPOINT_VERSION,
        "m": state.m,
        "t": state.t,
        "scheme": config.scheme,
        "mesh_hash": mesh.content_hash,
    }
    np.savez(path, header=json.dumps(header), u=state.u.a, u_grad=state.u.c, u_tilde=state.u_tilde, p=state.p)
    return path


def read_checkpoint(path):
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        state = State(
            header["m"], header["t"], CompositeVelocity(data["u"], data["u_grad"]), data["u_tilde"], data["p"]
        )
    return header, state


def config_to_dict(config: SimulationConfig) -> dict:
    return asdict(config)
