"""Conforming triangulations of polygonal domains.

Meshes are immutable.  Vertex arrays are ``(nv, 2)`` floats, triangles are
``(nt, 3)`` counter-clockwise vertex triples, boundary edges ``(nb, 2)``.
Local edge ``i`` of a triangle is the edge opposite local vertex ``i``.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

QUASI_UNIFORMITY_BOUND = 10.0

# local edge i joins these two local vertices
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class MeshError(ValueError):
    """Invalid mesh input or mesh file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    refinement_level: int = 0
    # triangle index in the parent mesh, for meshes made by refine_uniform
    parent: Optional[np.ndarray] = field(default=None, repr=False)
    parent_mesh: Optional["TriMesh"] = field(default=None, repr=False)
    quasi_uniformity_bound: float = QUASI_UNIFORMITY_BOUND

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        if self.parent is not None:
            object.__setattr__(self, "parent", _frozen(self.parent, np.int64))
        if self.refinement_level < 0:
            raise MeshError("refinement_level must be nonnegative")
        self.validate()

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """``(nt, 3)`` lengths of local edges."""
        p = self.vertices[self.triangles]
        d = p[:, LOCAL_EDGES[:, 1]] - p[:, LOCAL_EDGES[:, 0]]
        return np.sqrt((d**2).sum(axis=-1))

    @cached_property
    def diameters(self) -> np.ndarray:
        return self.edge_lengths.max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def inscribed_diameters(self) -> np.ndarray:
        return 4.0 * self.areas / self.edge_lengths.sum(axis=1)

    @property
    def quasi_uniformity(self) -> float:
        """Max triangle diameter over min inscribed-circle diameter."""
        return float(self.diameters.max() / self.inscribed_diameters.min())

    @cached_property
    def _edge_data(self):
        local = self.triangles[:, LOCAL_EDGES]  # (nt, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """``(nt, 3)`` global edge index of each local edge."""
        return self._edge_data[1]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_triangles(self) -> list:
        """For each edge, the list of incident triangle indices."""
        out = [[] for _ in range(self.n_edges)]
        for t, row in enumerate(self.tri_edges):
            for e in row:
                out[e].append(t)
        return out

    def derive_boundary_edges(self) -> np.ndarray:
        """Boundary edges re-derived from edge incidence, oriented as in their triangle."""
        edges, tri_edges, counts = self._edge_data
        on_bnd = counts[tri_edges] == 1  # (nt, 3)
        t, le = np.nonzero(on_bnd)
        return self.triangles[t[:, None], LOCAL_EDGES[le]]

    @cached_property
    def boundary_edge_ids(self) -> np.ndarray:
        edges, _, counts = self._edge_data
        return np.flatnonzero(counts == 1)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def validate(self) -> None:
        if self.nt == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= self.nv:
            raise MeshError("triangle vertex index out of range")
        if np.any(self.signed_areas <= 0):
            bad = int(np.flatnonzero(self.signed_areas <= 0)[0])
            raise MeshError(f"triangle {bad} has nonpositive signed area")
        srt = np.sort(self.triangles, axis=1)
        uniq, idx, counts = np.unique(srt, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 1):
            dup = uniq[counts > 1][0]
            raise MeshError(f"duplicate triangle {tuple(int(v) for v in dup)}")
        _, _, ecounts = self._edge_data
        if np.any(ecounts > 2):
            raise MeshError("nonconforming mesh: an edge is shared by more than two triangles")
        derived = {tuple(e) for e in np.sort(self.derive_boundary_edges(), axis=1).tolist()}
        stored = {tuple(e) for e in np.sort(self.boundary_edges, axis=1).tolist()}
        if len(stored) != len(self.boundary_edges):
            raise MeshError("duplicate boundary edge")
        if derived != stored:
            raise MeshError(
                "boundary edges inconsistent with triangle incidence "
                f"({len(derived - stored)} missing, {len(stored - derived)} spurious)"
            )
        # hanging vertices make an interior edge look like a boundary edge; a
        # closed polygonal boundary has every boundary vertex of even degree
        deg = np.bincount(self.boundary_edges.ravel(), minlength=self.nv)
        if np.any(deg % 2):
            raise MeshError("nonconforming mesh: boundary is not a closed curve (hanging vertex?)")
        self._check_hanging()
        q = self.quasi_uniformity
        if q > self.quasi_uniformity_bound:
            logger.warning("quasi-uniformity ratio %.3g exceeds bound %.3g", q, self.quasi_uniformity_bound)

    def _check_hanging(self) -> None:
        """A vertex strictly inside a boundary edge is a hanging vertex."""
        bv = np.unique(self.boundary_edges)
        a = self.vertices[self.boundary_edges[:, 0]]
        d = self.vertices[self.boundary_edges[:, 1]] - a
        r = self.vertices[bv][None, :, :] - a[:, None, :]
        len2 = np.einsum("ed,ed->e", d, d)[:, None]
        s = np.einsum("ed,evd->ev", d, r) / len2
        cross = d[:, None, 0] * r[..., 1] - d[:, None, 1] * r[..., 0]
        hit = (np.abs(cross) <= 1e-12 * len2) & (s > 1e-12) & (s < 1 - 1e-12)
        if hit.any():
            e, v = np.argwhere(hit)[0]
            raise MeshError(f"nonconforming mesh: hanging vertex {int(bv[v])} on edge {tuple(self.boundary_edges[e])}")

    def ancestor_triangles(self, ancestor: "TriMesh") -> np.ndarray:
        """Index of the triangle of ``ancestor`` containing each triangle of this mesh."""
        idx = np.arange(self.nt)
        m = self
        while m is not ancestor:
            if m.parent_mesh is None:
                raise MeshError("mesh is not a refinement of the given mesh")
            idx = m.parent[idx]
            m = m.parent_mesh
        return idx

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()[:16]


def generate_structured(nx: int, ny: int, domain: Sequence[float] = (0.0, 1.0, 0.0, 1.0)) -> TriMesh:
    """Rectangle ``(x0, x1, y0, y1)`` split into ``nx * ny`` cells, each cut
    along its lower-left to upper-right diagonal."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"subdivision counts must be positive integers, got nx={nx}, ny={ny}")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {tuple(domain)}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10, v01 = v00 + 1, v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    k = np.arange(nx)
    bottom = np.column_stack([k, k + 1])
    top = np.column_stack([ny * (nx + 1) + k + 1, ny * (nx + 1) + k])
    k = np.arange(ny)
    right = np.column_stack([k * (nx + 1) + nx, (k + 1) * (nx + 1) + nx])
    left = np.column_stack([(k + 1) * (nx + 1), k * (nx + 1)])
    boundary = np.vstack([bottom, right, top, left])
    return TriMesh(vertices, triangles, boundary)


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Split every triangle into four congruent children through edge midpoints."""
    nv = mesh.nv
    e = mesh.edges
    mid = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])
    t = mesh.triangles
    m = nv + mesh.tri_edges  # m[:, i] is the midpoint opposite vertex i
    children = np.stack(
        [
            np.column_stack([t[:, 0], m[:, 2], m[:, 1]]),
            np.column_stack([m[:, 2], t[:, 1], m[:, 0]]),
            np.column_stack([m[:, 1], m[:, 0], t[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.nt), 4)

    edge_index = {tuple(p): k for k, p in enumerate(e.tolist())}
    bnd = []
    for a, b in mesh.boundary_edges.tolist():
        c = nv + edge_index[(min(a, b), max(a, b))]
        bnd.append((a, c))
        bnd.append((c, b))
    return TriMesh(
        vertices,
        children,
        np.array(bnd),
        refinement_level=mesh.refinement_level + 1,
        parent=parent,
        parent_mesh=mesh,
        quasi_uniformity_bound=mesh.quasi_uniformity_bound,
    )


def write_mesh(mesh: TriMesh, path) -> None:
    lines = ["trimesh v1", f"{mesh.nv} {mesh.nt} {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines += [f"{i} {j}" for i, j in mesh.boundary_edges.tolist()]
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    """Read the ``trimesh v1`` plain-text format.

    Clockwise triangles are reoriented with a warning.  Any other defect
    raises :class:`MeshError` carrying the offending line number.
    """
    records = []
    with open(os.fspath(path)) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                records.append((lineno, text.split()))
    if not records:
        raise MeshError("empty mesh file")
    lineno, tok = records[0]
    if tok != ["trimesh", "v1"]:
        raise MeshError("expected header 'trimesh v1'", lineno)
    if len(records) < 2:
        raise MeshError("missing count line")
    lineno, tok = records[1]
    try:
        nv, nt, nb = (int(s) for s in tok)
    except ValueError:
        raise MeshError("count line must be three integers 'nv nt nb'", lineno) from None
    body = records[2:]
    if len(body) != nv + nt + nb:
        raise MeshError(f"expected {nv + nt + nb} data lines after counts, found {len(body)}")

    def parse(chunk, n, conv, what):
        out = []
        for ln, tk in chunk:
            if len(tk) != n:
                raise MeshError(f"{what} line needs {n} values", ln)
            try:
                out.append([conv(s) for s in tk])
            except ValueError:
                raise MeshError(f"malformed {what} line", ln) from None
        return out

    vchunk, tchunk, bchunk = body[:nv], body[nv : nv + nt], body[nv + nt :]
    vertices = np.array(parse(vchunk, 2, float, "vertex"), dtype=float).reshape(-1, 2)
    triangles = np.array(parse(tchunk, 3, int, "triangle"), dtype=np.int64).reshape(-1, 3)
    boundary = np.array(parse(bchunk, 2, int, "boundary edge"), dtype=np.int64).reshape(-1, 2)

    for k, (ln, _) in enumerate(tchunk):
        if triangles[k].min() < 0 or triangles[k].max() >= nv:
            raise MeshError("triangle vertex index out of range", ln)
    for k, (ln, _) in enumerate(bchunk):
        if boundary[k].min() < 0 or boundary[k].max() >= nv:
            raise MeshError("boundary vertex index out of range", ln)

    seen = {}
    for k, (ln, _) in enumerate(tchunk):
        key = tuple(sorted(triangles[k].tolist()))
        if key in seen:
            raise MeshError(f"duplicate triangle {key} (first on line {seen[key]})", ln)
        seen[key] = ln

    p = vertices[triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    for k in np.flatnonzero(area == 0):
        raise MeshError(f"degenerate triangle {k}", tchunk[k][0])
    flipped = np.flatnonzero(area < 0)
    if len(flipped):
        logger.warning("reoriented %d clockwise triangle(s), first on line %d", len(flipped), tchunk[flipped[0]][0])
        triangles[flipped] = triangles[flipped][:, [0, 2, 1]]
    return TriMesh(vertices, triangles, boundary)
