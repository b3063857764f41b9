"""Sparse operators of the projection schemes.

Sign conventions, with velocity basis ``phi_i`` and pressure basis ``psi_j``:

* ``B[j, i] = -(div phi_i, psi_j)``  (divergence coupling, pressure rows)
* ``G[i, j] = (phi_i, grad psi_j)``  (pressure-gradient coupling, velocity rows)

For zero-trace velocities integration by parts gives ``B == G.T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fespace import Constraint, FEFunction, FESpace, load_vector


def _scatter(rows_dofs: np.ndarray, cols_dofs: np.ndarray, local: np.ndarray, shape) -> sp.csr_matrix:
    nt, nr = rows_dofs.shape
    nc = cols_dofs.shape[1]
    r = np.broadcast_to(rows_dofs[:, :, None], (nt, nr, nc)).ravel()
    c = np.broadcast_to(cols_dofs[:, None, :], (nt, nr, nc)).ravel()
    return sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()


def _vector(S: sp.spmatrix, ncomp: int = 2) -> sp.csr_matrix:
    return sp.block_diag([S] * ncomp, format="csr")


def apply_dirichlet(S: sp.spmatrix, dofs: np.ndarray) -> sp.csr_matrix:
    """Symmetric elimination of homogeneous Dirichlet DOFs: zero rows and
    columns, unit diagonal."""
    n = S.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    D = sp.diags(keep)
    out = (D @ S @ D).tocsr()
    fix = np.zeros(n)
    fix[dofs] = 1.0
    out = (out + sp.diags(fix)).tocsr()
    out.eliminate_zeros()
    return out


def vector_boundary_dofs(space: FESpace, ncomp: int = 2) -> np.ndarray:
    return np.concatenate([c * space.n_dofs + space.boundary_dofs for c in range(ncomp)])


def assemble_mass(space: FESpace) -> sp.csr_matrix:
    """Scalar mass matrix, no constraint applied."""
    local = np.einsum("tq,qi,qj->tij", space.quad_weights, space.phi, space.phi)
    return _scatter(space.cell_dofs, space.cell_dofs, local, (space.n_dofs, space.n_dofs))


def assemble_stiffness(space: FESpace) -> sp.csr_matrix:
    """Scalar stiffness matrix ``(grad phi_i, grad phi_j)``, no constraint applied."""
    local = np.einsum("tq,tqid,tqjd->tij", space.quad_weights, space.dphi, space.dphi)
    return _scatter(space.cell_dofs, space.cell_dofs, local, (space.n_dofs, space.n_dofs))


def assemble_convection_scalar(w: FEFunction, space: FESpace) -> sp.csr_matrix:
    """``n[i, j] = int (w . grad phi_j) phi_i + 1/2 int (div w) phi_j phi_i``."""
    if w.space.mesh is not space.mesh:
        raise ValueError("advecting field and space live on different meshes")
    if w.ncomp != 2:
        raise ValueError("advecting field must be a 2-component vector field")
    wq = w.at_quad()  # (2, nt, nq)
    gw = w.grad_at_quad()  # (2, nt, nq, 2)
    divw = gw[0, ..., 0] + gw[1, ..., 1]
    wt = space.quad_weights
    adv = np.einsum("tq,tqj,qi->tij", wt * wq[0], space.dphi[..., 0], space.phi)
    adv += np.einsum("tq,tqj,qi->tij", wt * wq[1], space.dphi[..., 1], space.phi)
    adv += 0.5 * np.einsum("tq,qj,qi->tij", wt * divw, space.phi, space.phi)
    return _scatter(space.cell_dofs, space.cell_dofs, adv, (space.n_dofs, space.n_dofs))


def assemble_convection(w: FEFunction, trial_space: FESpace, test_space: Optional[FESpace] = None) -> sp.csr_matrix:
    """Vector convection matrix ``N(w)`` with entries ``b(w, phi_j, phi_i)``."""
    if test_space is not None and test_space is not trial_space:
        raise ValueError("trial and test spaces must coincide")
    return _vector(assemble_convection_scalar(w, trial_space))


def _check_pair(velocity: FESpace, pressure: FESpace):
    if velocity.mesh is not pressure.mesh:
        raise ValueError("velocity and pressure spaces live on different meshes")


def assemble_divergence(velocity: FESpace, pressure: FESpace) -> sp.csr_matrix:
    """``B`` of shape ``(n_p, 2 n_u)``, no boundary constraint applied."""
    _check_pair(velocity, pressure)
    nu, npr = velocity.n_dofs, pressure.n_dofs
    blocks = []
    for d in range(2):
        local = -np.einsum("tq,tqi,qj->tji", velocity.quad_weights, velocity.dphi[..., d], pressure.phi)
        blocks.append(_scatter(pressure.cell_dofs, velocity.cell_dofs, local, (npr, nu)))
    return sp.hstack(blocks, format="csr")


def assemble_pressure_gradient(velocity: FESpace, pressure: FESpace) -> sp.csr_matrix:
    """``G`` of shape ``(2 n_u, n_p)``, no boundary constraint applied."""
    _check_pair(velocity, pressure)
    nu, npr = velocity.n_dofs, pressure.n_dofs
    blocks = []
    for d in range(2):
        local = np.einsum("tq,qi,tqj->tij", velocity.quad_weights, velocity.phi, pressure.dphi[..., d])
        blocks.append(_scatter(velocity.cell_dofs, pressure.cell_dofs, local, (nu, npr)))
    return sp.vstack(blocks, format="csr")


def time_average(f: Callable, t0: float, dt: float, n_time_quad: int = 4) -> Callable:
    """Spatial field ``(x, y) -> (1/dt) int_{t0}^{t0+dt} f(s, x, y) ds`` by Gauss-Legendre."""
    nodes, weights = np.polynomial.legendre.leggauss(n_time_quad)
    times = t0 + 0.5 * dt * (nodes + 1.0)

    def avg(x, y):
        acc = None
        for s, w in zip(times, weights):
            v = np.asarray(f(s, x, y), dtype=float) * (0.5 * w)
            acc = v if acc is None else acc + v
        return acc

    return avg


def assemble_forcing(f: Optional[Callable], space: FESpace, m: int, dt: float, n_time_quad: int = 4) -> np.ndarray:
    """Load vector ``(f^m, phi_i)`` with ``f^m`` the average of ``f(t, x, y)``
    over ``[m dt, (m+1) dt]``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if f is None:
        return np.zeros(2 * space.n_dofs)
    return load_vector(space, time_average(f, m * dt, dt, n_time_quad), ncomp=2)


@dataclass(eq=False)
class OperatorSet:
    """Assembled operators for a velocity/pressure pair.

    Velocity operators have the zero-trace constraint applied by symmetric
    elimination; ``B`` has the boundary velocity columns zeroed and ``G``
    the boundary velocity rows.
    """

    velocity: FESpace
    pressure: FESpace
    M_u: sp.csr_matrix
    A_u: sp.csr_matrix
    B: sp.csr_matrix
    G: sp.csr_matrix
    A_p: sp.csr_matrix
    M_p: sp.csr_matrix
    M_scalar: sp.csr_matrix  # unconstrained scalar velocity mass, reused for N(w) patterns
    bdofs: np.ndarray  # constrained vector velocity DOFs

    @property
    def n_u(self) -> int:
        return 2 * self.velocity.n_dofs

    @property
    def n_p(self) -> int:
        return self.pressure.n_dofs

    def convection(self, w: FEFunction) -> sp.csr_matrix:
        return assemble_convection(w, self.velocity)

    def zero_boundary(self, v: np.ndarray) -> np.ndarray:
        v = np.array(v, dtype=float)
        v[self.bdofs] = 0.0
        return v


def build_operators(velocity: FESpace, pressure: FESpace) -> OperatorSet:
    _check_pair(velocity, pressure)
    if velocity.constraint is not Constraint.ZERO_TRACE:
        raise ValueError("velocity space must carry the zero_trace constraint")
    bd = vector_boundary_dofs(velocity)
    Ms = assemble_mass(velocity)
    M_u = apply_dirichlet(_vector(Ms), bd)
    A_u = apply_dirichlet(_vector(assemble_stiffness(velocity)), bd)
    keep = np.ones(2 * velocity.n_dofs)
    keep[bd] = 0.0
    B = (assemble_divergence(velocity, pressure) @ sp.diags(keep)).tocsr()
    G = (sp.diags(keep) @ assemble_pressure_gradient(velocity, pressure)).tocsr()
    B.eliminate_zeros()
    G.eliminate_zeros()
    return OperatorSet(
        velocity=velocity,
        pressure=pressure,
        M_u=M_u,
        A_u=A_u,
        B=B,
        G=G,
        A_p=assemble_stiffness(pressure),
        M_p=assemble_mass(pressure),
        M_scalar=Ms,
        bdofs=bd,
    )


def symmetry_residual(S: sp.spmatrix) -> float:
    """``max|S - S^T| / max|S|``."""
    S = sp.csr_matrix(S)
    top = abs(S).max()
    if top == 0:
        return 0.0
    return float(abs(S - S.T).max() / top)


def dump_coo(S: sp.spmatrix, path) -> None:
    """Write ``i j value`` lines, one per stored nonzero."""
    C = sp.coo_matrix(S)
    order = np.lexsort((C.col, C.row))
    with open(path, "w") as fh:
        fh.write(f"# {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for k in order:
            fh.write(f"{C.row[k]} {C.col[k]} {format(float(C.data[k]), '.17g')}\n")
