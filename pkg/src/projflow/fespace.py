"""Lagrange P1/P2 spaces on triangle meshes, quadrature and L2 projection.

Vector fields are stored component-blocked: ``[x-components, y-components]``.
P2 local DOFs are the three vertices followed by the midpoints of the local
edges (edge ``i`` opposite vertex ``i``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_EDGES, TriMesh


class Constraint(str, enum.Enum):
    NONE = "none"
    ZERO_MEAN = "zero_mean"
    ZERO_TRACE = "zero_trace"


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,) sum to 1/2, the reference area
    exactness_degree: int

    def reference_xy(self) -> np.ndarray:
        return self.points[:, 1:]


def _dunavant6() -> QuadratureRule:
    a = 0.06308901449150222834033
    b = 0.2492867451709104212916
    c1, c2 = 0.05314504984481694735325, 0.3103524510337844054166
    c3 = 1.0 - c1 - c2
    wa, wb, wc = 0.05084490637020681692094, 0.1167862757263793660253, 0.08285107561837357519355
    pts = [
        (1 - 2 * a, a, a), (a, 1 - 2 * a, a), (a, a, 1 - 2 * a),
        (1 - 2 * b, b, b), (b, 1 - 2 * b, b), (b, b, 1 - 2 * b),
        (c1, c2, c3), (c1, c3, c2), (c2, c1, c3), (c2, c3, c1), (c3, c1, c2), (c3, c2, c1),
    ]
    w = [wa] * 3 + [wb] * 3 + [wc] * 6
    return QuadratureRule(np.array(pts), 0.5 * np.array(w), 6)


QUAD6 = _dunavant6()


def basis_values(degree: int, bary: np.ndarray) -> np.ndarray:
    """Shape functions at barycentric points ``(n, 3)`` -> ``(n, nloc)``."""
    l0, l1, l2 = np.asarray(bary, dtype=float).T
    if degree == 1:
        return np.column_stack([l0, l1, l2])
    if degree == 2:
        return np.column_stack(
            [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1]
        )
    raise ValueError(f"unsupported degree {degree}")


def basis_bary_derivatives(degree: int, bary: np.ndarray) -> np.ndarray:
    """Derivatives with respect to each barycentric coordinate -> ``(n, nloc, 3)``."""
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    n = len(bary)
    if degree == 1:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if degree == 2:
        l0, l1, l2 = bary.T
        d = np.zeros((n, 6, 3))
        d[:, 0, 0] = 4 * l0 - 1
        d[:, 1, 1] = 4 * l1 - 1
        d[:, 2, 2] = 4 * l2 - 1
        d[:, 3, 1], d[:, 3, 2] = 4 * l2, 4 * l1
        d[:, 4, 2], d[:, 4, 0] = 4 * l0, 4 * l2
        d[:, 5, 0], d[:, 5, 1] = 4 * l1, 4 * l0
        return d
    raise ValueError(f"unsupported degree {degree}")


@dataclass(frozen=True, eq=False)
class FESpace:
    mesh: TriMesh
    degree: int
    constraint: Constraint
    n_dofs: int
    dof_coords: np.ndarray
    cell_dofs: np.ndarray
    boundary_dofs: np.ndarray
    quadrature: QuadratureRule = QUAD6

    @property
    def nloc(self) -> int:
        return self.cell_dofs.shape[1]

    @cached_property
    def bary_gradients(self) -> np.ndarray:
        """``(nt, 3, 2)`` gradients of the barycentric coordinates."""
        p = self.mesh.vertices[self.mesh.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
        Jinv = np.linalg.inv(J)  # rows are grad(l1), grad(l2)
        g = np.empty((self.mesh.nt, 3, 2))
        g[:, 1:] = Jinv
        g[:, 0] = -Jinv.sum(axis=1)
        return g

    @cached_property
    def quad_points(self) -> np.ndarray:
        """Physical quadrature points ``(nt, nq, 2)``."""
        p = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("qk,tkd->tqd", self.quadrature.points, p)

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Physical weights ``(nt, nq)``, i.e. reference weights times ``2 |K|``."""
        return 2.0 * self.mesh.areas[:, None] * self.quadrature.weights[None, :]

    @cached_property
    def phi(self) -> np.ndarray:
        """Basis values at quadrature points ``(nq, nloc)``."""
        return basis_values(self.degree, self.quadrature.points)

    @cached_property
    def dphi(self) -> np.ndarray:
        """Physical basis gradients at quadrature points ``(nt, nq, nloc, 2)``."""
        db = basis_bary_derivatives(self.degree, self.quadrature.points)
        return np.einsum("qik,tkd->tqid", db, self.bary_gradients)

    @cached_property
    def interior_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, bool)
        mask[self.boundary_dofs] = False
        return np.flatnonzero(mask)

    def same_mesh(self, other: "FESpace") -> bool:
        return self.mesh is other.mesh


def build_space(mesh: TriMesh, degree: int, constraint="none") -> FESpace:
    constraint = Constraint(constraint)
    if degree == 1:
        coords = mesh.vertices
        cell_dofs = mesh.triangles
        bdofs = mesh.boundary_vertices
    elif degree == 2:
        mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        coords = np.vstack([mesh.vertices, mids])
        cell_dofs = np.hstack([mesh.triangles, mesh.nv + mesh.tri_edges])
        bdofs = np.union1d(mesh.boundary_vertices, mesh.nv + mesh.boundary_edge_ids)
    else:
        raise ValueError(f"unsupported degree {degree}; only 1 and 2 are implemented")
    coords = np.array(coords)
    cell_dofs = np.array(cell_dofs)
    bdofs = np.array(bdofs, dtype=np.int64)
    for a in (coords, cell_dofs, bdofs):
        a.setflags(write=False)
    return FESpace(mesh, degree, constraint, len(coords), coords, cell_dofs, bdofs)


@dataclass(eq=False)
class FEFunction:
    space: FESpace
    coeffs: np.ndarray
    ncomp: int = 1

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.ncomp * self.space.n_dofs,):
            raise ValueError(
                f"coefficient vector has shape {self.coeffs.shape}, expected ({self.ncomp * self.space.n_dofs},)"
            )

    def component(self, c: int) -> np.ndarray:
        n = self.space.n_dofs
        return self.coeffs[c * n : (c + 1) * n]

    def at_quad(self) -> np.ndarray:
        """Values at all quadrature points ``(ncomp, nt, nq)``."""
        sp_ = self.space
        return np.stack([np.einsum("qi,ti->tq", sp_.phi, self.component(c)[sp_.cell_dofs]) for c in range(self.ncomp)])

    def grad_at_quad(self) -> np.ndarray:
        """Gradients at quadrature points ``(ncomp, nt, nq, 2)``."""
        sp_ = self.space
        return np.stack(
            [np.einsum("tqid,ti->tqd", sp_.dphi, self.component(c)[sp_.cell_dofs]) for c in range(self.ncomp)]
        )


Field = Union[Callable, FEFunction]


def _call_field(f: Callable, x: np.ndarray, y: np.ndarray, ncomp: int) -> np.ndarray:
    v = f(x, y)
    if ncomp == 1:
        return np.broadcast_to(np.asarray(v, dtype=float), x.shape)[None]
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), x.shape) for c in v])


def interpolate(space: FESpace, f: Callable, ncomp: int = 1) -> FEFunction:
    """Nodal interpolant.  ``f(x, y)`` returns an array (scalar) or a pair of arrays."""
    vals = _call_field(f, space.dof_coords[:, 0], space.dof_coords[:, 1], ncomp)
    return FEFunction(space, vals.reshape(-1), ncomp)


def evaluate(f: FEFunction, tri_index: int, bary) -> Union[float, np.ndarray]:
    """Value of ``f`` at a barycentric point of triangle ``tri_index``."""
    nt = f.space.mesh.nt
    if not 0 <= tri_index < nt:
        raise IndexError(f"triangle index {tri_index} out of range [0, {nt})")
    bary = np.asarray(bary, dtype=float)
    if bary.shape != (3,) or np.any(bary < -1e-14) or abs(bary.sum() - 1.0) > 1e-12:
        raise ValueError("barycentric coordinates must be three nonnegative numbers summing to 1")
    phi = basis_values(f.space.degree, bary[None])[0]
    dofs = f.space.cell_dofs[tri_index]
    vals = np.array([phi @ f.component(c)[dofs] for c in range(f.ncomp)])
    return float(vals[0]) if f.ncomp == 1 else vals


def _source_at_quad(target: Field, space: FESpace, ncomp: int):
    """Evaluate the projection source on ``space``'s mesh, returning values
    ``(ncomp, nt, nq)`` at points whose weights are also returned."""
    if callable(target) and not isinstance(target, FEFunction):
        qp = space.quad_points
        return _call_field(target, qp[..., 0], qp[..., 1], ncomp), space.quad_points, space.quad_weights, None
    src = target
    if src.ncomp != ncomp:
        raise ValueError("component count of source and target differ")
    if src.space.mesh is space.mesh:
        return src.at_quad(), space.quad_points, space.quad_weights, None
    # source lives on a refinement of this mesh: integrate over the fine triangles
    parents = src.space.mesh.ancestor_triangles(space.mesh)
    return src.at_quad(), src.space.quad_points, src.space.quad_weights, parents


def load_vector(space: FESpace, target: Field, ncomp: int = 1) -> np.ndarray:
    """Vector of ``(target, phi_i)`` over all DOFs (component-blocked)."""
    vals, qp, qw, parents = _source_at_quad(target, space, ncomp)
    n = space.n_dofs
    out = np.zeros(ncomp * n)
    if parents is None:
        phi = np.broadcast_to(space.phi, (space.mesh.nt,) + space.phi.shape)
        cells = space.cell_dofs
    else:
        # barycentric coordinates of fine quadrature points inside coarse parents
        p = space.mesh.vertices[space.mesh.triangles[parents]]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        rel = qp - p[:, None, 0, :]
        l12 = np.einsum("tij,tqj->tqi", np.linalg.inv(J), rel)
        bary = np.concatenate([1.0 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)
        phi = basis_values(space.degree, bary.reshape(-1, 3)).reshape(bary.shape[0], bary.shape[1], -1)
        cells = space.cell_dofs[parents]
    for c in range(ncomp):
        local = np.einsum("tq,tqi->ti", vals[c] * qw, phi)
        out[c * n : (c + 1) * n] = np.bincount(cells.ravel(), local.ravel(), minlength=n)
    return out


def l2_project(target: Field, space: FESpace, mass: sp.spmatrix, ncomp: int = 1, solver=None) -> FEFunction:
    """L2-orthogonal projection onto ``space`` honouring its constraint.

    ``mass`` is the (vector, if ``ncomp == 2``) mass matrix with the space's
    constraint already applied, as produced by :mod:`projflow.assembly`.
    """
    from .linsolve import solve_direct

    rhs = load_vector(space, target, ncomp)
    if space.constraint is Constraint.ZERO_TRACE:
        n = space.n_dofs
        for c in range(ncomp):
            rhs[c * n + space.boundary_dofs] = 0.0
    x = solver(rhs) if solver is not None else solve_direct(mass, rhs)
    g = FEFunction(space, x, ncomp)
    if space.constraint is Constraint.ZERO_MEAN:
        g = remove_mean(g)
    return g


def integrate(f: FEFunction) -> np.ndarray:
    return np.einsum("ctq,tq->c", f.at_quad(), f.space.quad_weights)


def remove_mean(f: FEFunction) -> FEFunction:
    area = f.space.mesh.areas.sum()
    n = f.space.n_dofs
    coeffs = f.coeffs.copy()
    # partition of unity: subtracting a constant shifts every nodal coefficient
    for c, m in enumerate(integrate(f) / area):
        coeffs[c * n : (c + 1) * n] -= m
    return FEFunction(f.space, coeffs, f.ncomp)


def _check_same_mesh(f: FEFunction, g: FEFunction):
    if f.space.mesh is not g.space.mesh:
        raise ValueError("functions live on different meshes")


def l2_inner(f: FEFunction, g: FEFunction) -> float:
    _check_same_mesh(f, g)
    if f.ncomp != g.ncomp:
        raise ValueError("component counts differ")
    return float(np.einsum("ctq,ctq,tq->", f.at_quad(), g.at_quad(), f.space.quad_weights))


def l2_norm(f: FEFunction) -> float:
    return float(np.sqrt(l2_inner(f, f)))


def h1_seminorm(f: FEFunction) -> float:
    g = f.grad_at_quad()
    return float(np.sqrt(np.einsum("ctqd,ctqd,tq->", g, g, f.space.quad_weights)))


def l2_error(f: FEFunction, exact: Callable) -> float:
    """``||f - exact||_{L2}`` by quadrature."""
    qp = f.space.quad_points
    ex = _call_field(exact, qp[..., 0], qp[..., 1], f.ncomp)
    d = f.at_quad() - ex
    return float(np.sqrt(np.einsum("ctq,ctq,tq->", d, d, f.space.quad_weights)))
