"""Manufactured solutions, a dense monolithic reference stepper, and
refinement studies."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fespace import FESpace, basis_bary_derivatives, basis_values
from .mesh import generate_structured
from .scheme import CompositeVelocity, Discretization, SimulationConfig, State, check_coupling, run


# ---------------------------------------------------------------- exact fields


@dataclass(frozen=True)
class _Profile:
    """``g`` and its first three derivatives."""

    g: Callable
    d1: Callable
    d2: Callable
    d3: Callable


POLY = _Profile(
    g=lambda x: x**2 * (1 - x) ** 2,
    d1=lambda x: 2 * x * (1 - x) * (1 - 2 * x),
    d2=lambda x: 2 - 12 * x + 12 * x**2,
    d3=lambda x: -12 + 24 * x,
)

PI = math.pi
TRIG = _Profile(
    g=lambda x: np.sin(PI * x) ** 2,
    d1=lambda x: PI * np.sin(2 * PI * x),
    d2=lambda x: 2 * PI**2 * np.cos(2 * PI * x),
    d3=lambda x: -4 * PI**3 * np.sin(2 * PI * x),
)


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact solution ``u = s(t) curl(g(x) g(y))``, ``p = q(t) P(x, y)`` on the
    unit square with the forcing that makes it solve Navier-Stokes, convection
    included."""

    name: str
    mu: float
    T: float
    profile: _Profile
    s: Callable
    ds: Callable
    q: Callable
    P: Callable
    gradP: Callable

    def u_shape(self, x, y):
        pr = self.profile
        return pr.g(x) * pr.d1(y), -pr.d1(x) * pr.g(y)

    def u_exact(self, t, x, y):
        u1, u2 = self.u_shape(x, y)
        s = self.s(t)
        return s * u1, s * u2

    def p_exact(self, t, x, y):
        return self.q(t) * self.P(x, y)

    def f(self, t, x, y):
        pr = self.profile
        gx, gy = pr.g(x), pr.g(y)
        d1x, d1y = pr.d1(x), pr.d1(y)
        d2x, d2y = pr.d2(x), pr.d2(y)
        d3x, d3y = pr.d3(x), pr.d3(y)
        U1, U2 = gx * d1y, -d1x * gy
        U1x, U1y = d1x * d1y, gx * d2y
        U2x, U2y = -d2x * gy, -d1x * d1y
        lap1 = d2x * d1y + gx * d3y
        lap2 = -d3x * gy - d1x * d2y
        Px, Py = self.gradP(x, y)
        s, ds, q = self.s(t), self.ds(t), self.q(t)
        f1 = ds * U1 + s * s * (U1 * U1x + U2 * U1y) + q * Px - self.mu * s * lap1
        f2 = ds * U2 + s * s * (U1 * U2x + U2 * U2y) + q * Py - self.mu * s * lap2
        return f1, f2

    def initial(self, x, y):
        return self.u_exact(0.0, x, y)


def builtin_cases(mu: float = 0.05, T: float = 1.0) -> List[ManufacturedCase]:
    case_a = ManufacturedCase(
        name="case_a",
        mu=mu,
        T=T,
        profile=POLY,
        s=np.cos,
        ds=lambda t: -np.sin(t),
        q=np.cos,
        P=lambda x, y: x**3 * y - 0.125,
        gradP=lambda x, y: (3 * x**2 * y, x**3),
    )
    case_b = ManufacturedCase(
        name="case_b",
        mu=mu,
        T=T,
        profile=TRIG,
        s=lambda t: np.exp(-t),
        ds=lambda t: -np.exp(-t),
        q=lambda t: np.exp(-2 * t),
        P=lambda x, y: np.cos(PI * x) * np.cos(PI * y),
        gradP=lambda x, y: (-PI * np.sin(PI * x) * np.cos(PI * y), -PI * np.cos(PI * x) * np.sin(PI * y)),
    )
    return [case_a, case_b]


def get_case(name: str, mu: float = 0.05, T: float = 1.0) -> ManufacturedCase:
    for c in builtin_cases(mu, T):
        if c.name == name:
            return c
    raise KeyError(f"unknown manufactured case {name!r}")


def vortex_patch(x, y, omega: float = 1.0, radius: float = 0.25):
    """Rigidly rotating disc around the square's centre, at rest outside.
    Divergence free with a tangential jump on the circle: in L2 but not H1."""
    dx, dy = x - 0.5, y - 0.5
    inside = (dx * dx + dy * dy < radius * radius).astype(float)
    return -omega * dy * inside, omega * dx * inside


FORCINGS = ("zero", "case_a", "case_b")
INITIALS = ("zero", "case_a", "case_b", "vortex_patch")


def resolve_forcing(name: str, mu: float) -> Optional[Callable]:
    if name == "zero":
        return None
    if name in ("case_a", "case_b"):
        return get_case(name, mu).f
    raise KeyError(f"unknown forcing {name!r}; expected one of {FORCINGS}")


def resolve_initial(name: str, mu: float) -> Optional[Callable]:
    if name == "zero":
        return None
    if name in ("case_a", "case_b"):
        return get_case(name, mu).initial
    if name == "vortex_patch":
        return vortex_patch
    raise KeyError(f"unknown initial field {name!r}; expected one of {INITIALS}")


def _d(f, h, x):
    """Fourth-order central first derivative."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def _dd(f, h, x):
    """Fourth-order central second derivative."""
    return (-f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)) / (12 * h * h)


def pde_residual(case: ManufacturedCase, t: float, x: float, y: float, h: float = 1e-3) -> float:
    """Max-norm Navier-Stokes residual of ``(u, p, f)`` by finite differences."""
    res = []
    for c in range(2):
        u = lambda tt, xx, yy: case.u_exact(tt, xx, yy)[c]
        ut = _d(lambda s: u(s, x, y), h, t)
        ux = _d(lambda s: u(t, s, y), h, x)
        uy = _d(lambda s: u(t, x, s), h, y)
        lap = _dd(lambda s: u(t, s, y), h, x) + _dd(lambda s: u(t, x, s), h, y)
        px = _d(lambda s: case.p_exact(t, s, y), h, x) if c == 0 else _d(lambda s: case.p_exact(t, x, s), h, y)
        u1, u2 = case.u_exact(t, x, y)
        r = ut + u1 * ux + u2 * uy + px - case.mu * lap - case.f(t, x, y)[c]
        res.append(abs(r))
    return max(res)


def divergence_fd(case: ManufacturedCase, t: float, x: float, y: float, h: float = 1e-3) -> float:
    du = _d(lambda s: case.u_exact(t, s, y)[0], h, x)
    dv = _d(lambda s: case.u_exact(t, x, s)[1], h, y)
    return du + dv


# ---------------------------------------------------------------- dense oracle

MAX_ORACLE_DOFS = 200


def _dense_convection(w: np.ndarray, space: FESpace) -> np.ndarray:
    """``b(w, phi_j, phi_i)`` by an element loop, independent of the vectorized
    assembly path."""
    n = space.n_dofs
    out = np.zeros((n, n))
    rule = space.quadrature
    phi = basis_values(space.degree, rule.points)
    dbary = basis_bary_derivatives(space.degree, rule.points)
    V = space.mesh.vertices
    for t, tri in enumerate(space.mesh.triangles):
        p0, p1, p2 = V[tri]
        J = np.column_stack([p1 - p0, p2 - p0])
        area = 0.5 * abs(np.linalg.det(J))
        Jinv = np.linalg.inv(J)
        gl = np.vstack([-Jinv.sum(axis=0), Jinv])  # gradients of barycentrics
        dofs = space.cell_dofs[t]
        w1, w2 = w[:n][dofs], w[n:][dofs]
        for q in range(len(rule.weights)):
            grads = dbary[q] @ gl  # (nloc, 2)
            wq = np.array([phi[q] @ w1, phi[q] @ w2])
            div = grads[:, 0] @ w1 + grads[:, 1] @ w2
            weight = 2 * area * rule.weights[q]
            local = np.outer(phi[q], grads @ wq) + 0.5 * div * np.outer(phi[q], phi[q])
            out[np.ix_(dofs, dofs)] += weight * local
    return out


class DenseOracle:
    """Reference stepper: dense matrices, Dirichlet DOFs removed rather than
    eliminated, and one monolithic solve per projection."""

    def __init__(self, disc: Discretization, config: SimulationConfig):
        ops = disc.ops
        if ops.n_u > MAX_ORACLE_DOFS:
            raise ValueError(f"dense oracle limited to {MAX_ORACLE_DOFS} velocity DOFs, got {ops.n_u}")
        self.ops = ops
        self.config = config
        self.free = disc.free
        f = self.free
        self.M = ops.M_u.toarray()[np.ix_(f, f)]
        self.A = ops.A_u.toarray()[np.ix_(f, f)]
        self.B = ops.B.toarray()[:, f]
        self.G = ops.G.toarray()[f]
        self.Ap = ops.A_p.toarray()
        self.w = ops.M_p.toarray() @ np.ones(ops.n_p)

    def _full(self, x_free):
        out = np.zeros(self.ops.n_u)
        out[self.free] = x_free
        return out

    def project(self, ut_free: np.ndarray, p_prev: np.ndarray):
        dt, n, npr = self.config.dt, len(self.free), self.ops.n_p
        if not self.config.incremental:
            K = np.zeros((n + npr + 1, n + npr + 1))
            K[:n, :n] = self.M
            K[:n, n : n + npr] = dt * self.B.T
            K[n : n + npr, :n] = self.B
            K[n : n + npr, -1] = self.w
            K[-1, n : n + npr] = self.w
            rhs = np.concatenate([self.M @ ut_free, np.zeros(npr + 1)])
            sol = np.linalg.solve(K, rhs)
            return CompositeVelocity(self._full(sol[:n]), np.zeros(npr)), sol[n : n + npr]
        # unknowns (a, c, p, lambda_c, lambda_p) with u = sum a phi + sum c grad psi
        Gram = np.block([[self.M, self.G], [self.G.T, self.Ap]])
        coupling = np.vstack([self.G, self.Ap])  # (v, grad q) over v in the composite basis
        m = n + npr
        K = np.zeros((m + npr + 2, m + npr + 2))
        K[:m, :m] = Gram
        K[:m, m : m + npr] = dt * coupling
        K[m : m + npr, :m] = coupling.T
        K[m : m + npr, -1] = self.w
        K[-1, m : m + npr] = self.w
        K[-2, n:m] = self.w
        K[n:m, -2] = self.w
        rhs = np.zeros(m + npr + 2)
        rhs[:m] = Gram @ np.concatenate([ut_free, np.zeros(npr)]) + dt * coupling @ p_prev
        sol = np.linalg.solve(K, rhs)
        return CompositeVelocity(self._full(sol[:n]), sol[n:m]), sol[m : m + npr]

    def init(self, state0: State) -> State:
        ut = state0.u_tilde[self.free]
        u, p = self.project(ut, np.zeros(self.ops.n_p))
        return State(0, 0.0, u, state0.u_tilde.copy(), p)

    def step(self, state: State, forcing_vec: np.ndarray) -> State:
        ops, cfg, f = self.ops, self.config, self.free
        N = _dense_convection(state.u_tilde, ops.velocity)
        Nv = np.zeros((ops.n_u, ops.n_u))
        nu = ops.velocity.n_dofs
        Nv[:nu, :nu] = N
        Nv[nu:, nu:] = N
        S = self.M / cfg.dt + Nv[np.ix_(f, f)] + cfg.mu * self.A
        u_prev = state.u.tested_on_velocity(ops)[f]
        rhs = u_prev / cfg.dt + forcing_vec[f]
        if cfg.incremental:
            rhs = rhs - self.B.T @ state.p
        ut_free = np.linalg.solve(S, rhs)
        u, p = self.project(ut_free, state.p)
        m = state.m + 1
        return State(m, m * cfg.dt, u, self._full(ut_free), p)


def dense_oracle_step(state: State, disc: Discretization, config: SimulationConfig, forcing_vec: np.ndarray) -> State:
    return DenseOracle(disc, config).step(state, forcing_vec)


# ---------------------------------------------------------------- studies


def composite_at_quad(u: CompositeVelocity, disc: Discretization) -> np.ndarray:
    """Values ``(2, nt, nq)`` of a composite velocity at quadrature points."""
    ops = disc.ops
    V, P = ops.velocity, ops.pressure
    n = V.n_dofs
    vals = np.stack([np.einsum("qi,ti->tq", V.phi, u.a[c * n : (c + 1) * n][V.cell_dofs]) for c in range(2)])
    grad_c = np.einsum("tqid,ti->tqd", P.dphi, u.c[P.cell_dofs])
    return vals + np.moveaxis(grad_c, -1, 0)


def velocity_error(u: CompositeVelocity, exact: Callable, disc: Discretization) -> float:
    V = disc.ops.velocity
    qp = V.quad_points
    ex = np.stack([np.asarray(v) for v in exact(qp[..., 0], qp[..., 1])])
    d = composite_at_quad(u, disc) - ex
    return float(np.sqrt(np.einsum("ctq,ctq,tq->", d, d, V.quad_weights)))


def space_time_error(states: Sequence[State], case: ManufacturedCase, disc: Discretization, dt: float, n_time: int = 3) -> float:
    """``L2(0,T;L2)`` error of the piecewise-constant intermediate velocity
    (``u_tilde^{m+1}`` on ``(t^m, t^{m+1}]``)."""
    nodes, weights = np.polynomial.legendre.leggauss(n_time)
    total = []
    zero_c = np.zeros(disc.ops.n_p)
    for m in range(len(states) - 1):
        u = CompositeVelocity(states[m + 1].u_tilde, zero_c)
        for s, w in zip(nodes, weights):
            t = m * dt + 0.5 * dt * (s + 1)
            e = velocity_error(u, lambda x, y: case.u_exact(t, x, y), disc)
            total.append(0.5 * dt * w * e * e)
    return math.sqrt(math.fsum(total))


@dataclass
class StudyReport:
    case: str
    scheme: str
    levels: List[Tuple[int, float]]
    h: List[float] = field(default_factory=list)
    errors_l2l2: List[float] = field(default_factory=list)
    errors_terminal: List[float] = field(default_factory=list)
    coupling: List[str] = field(default_factory=list)

    def rates(self, errors: Sequence[float]) -> List[float]:
        out = []
        for k in range(1, len(errors)):
            dt0, dt1 = self.levels[k - 1][1], self.levels[k][1]
            h0, h1 = self.h[k - 1], self.h[k]
            ratio = dt0 / dt1 if dt0 != dt1 else h0 / h1
            out.append(math.log(errors[k - 1] / errors[k]) / math.log(ratio))
        return out

    @property
    def observed_rates(self) -> List[float]:
        return self.rates(self.errors_terminal)

    @property
    def observed_rates_l2l2(self) -> List[float]:
        return self.rates(self.errors_l2l2)

    def to_csv(self, path) -> None:
        rt = [float("nan")] + self.observed_rates
        rs = [float("nan")] + self.observed_rates_l2l2
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "nx", "h", "dt", "error_l2l2", "rate_l2l2", "error_terminal", "rate_terminal", "coupling"])
            for k, (nx, dt) in enumerate(self.levels):
                w.writerow(
                    [k, nx, format(self.h[k], ".17g"), format(dt, ".17g"), format(self.errors_l2l2[k], ".17g"),
                     format(rs[k], ".17g"), format(self.errors_terminal[k], ".17g"), format(rt[k], ".17g"),
                     self.coupling[k]]
                )

    def table(self) -> str:
        rt = ["-"] + [f"{r:.3f}" for r in self.observed_rates]
        rs = ["-"] + [f"{r:.3f}" for r in self.observed_rates_l2l2]
        lines = [
            f"case {self.case}, scheme {self.scheme}",
            f"{'nx':>4} {'h':>10} {'dt':>10} {'L2L2 err':>12} {'rate':>7} {'terminal err':>13} {'rate':>7}",
        ]
        for k, (nx, dt) in enumerate(self.levels):
            lines.append(
                f"{nx:>4} {self.h[k]:>10.4g} {dt:>10.4g} {self.errors_l2l2[k]:>12.4e} {rs[k]:>7} "
                f"{self.errors_terminal[k]:>13.4e} {rt[k]:>7}"
            )
        return "\n".join(lines)


class StudyAborted(RuntimeError):
    def __init__(self, message: str, partial: StudyReport):
        super().__init__(message)
        self.partial = partial


def _run_level(case: ManufacturedCase, nx: int, dt: float, scheme: str, base: SimulationConfig):
    mesh = generate_structured(nx, nx)
    cfg = replace(base, dt=dt, scheme=scheme)
    res = run(cfg, mesh, forcing=case.f, initial=case.initial)
    disc = res.disc
    term = velocity_error(res.states[-1].u, lambda x, y: case.u_exact(cfg.T, x, y), disc)
    l2l2 = space_time_error(res.states, case, disc, dt)
    return mesh.h, l2l2, term


def convergence_study(
    case: ManufacturedCase,
    schedule: Sequence[Tuple[int, float]],
    scheme: str = "chorin_darcy",
    base: Optional[SimulationConfig] = None,
    threads: Optional[int] = None,
    safety: float = 1.0,
) -> StudyReport:
    """Run ``case`` on each ``(nx, dt)`` level; every level must satisfy the
    ``h^k <= safety sqrt(dt)`` coupling."""
    if base is None:
        base = SimulationConfig(mu=case.mu, T=case.T, dt=schedule[0][1], scheme=scheme)
    report = StudyReport(case.name, scheme, list(schedule))
    for nx, dt in schedule:
        h = generate_structured(nx, nx).h
        status = check_coupling(h, dt, base.coupling_exponent, safety)
        if status != "ok":
            raise ValueError(f"level nx={nx}, dt={dt} violates the h^k = o(sqrt(dt)) coupling")
        report.coupling.append(status)
    if threads is None:
        threads = int(os.environ.get("PROJFLOW_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futures = [ex.submit(_run_level, case, nx, dt, scheme, base) for nx, dt in schedule]
            results = []
            for fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:
                    _fill(report, results)
                    raise StudyAborted(f"level {len(results)} failed: {exc}", report) from exc
    else:
        results = []
        for nx, dt in schedule:
            try:
                results.append(_run_level(case, nx, dt, scheme, base))
            except Exception as exc:
                _fill(report, results)
                raise StudyAborted(f"level {len(results)} failed: {exc}", report) from exc
    _fill(report, results)
    return report


def _fill(report: StudyReport, results):
    report.h = [r[0] for r in results]
    report.errors_l2l2 = [r[1] for r in results]
    report.errors_terminal = [r[2] for r in results]
