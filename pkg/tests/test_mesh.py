import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from projflow.mesh import MeshError, TriMesh, generate_structured, read_mesh, refine_uniform, write_mesh


@given(st.integers(1, 12), st.integers(1, 12))
def test_structured_counts_and_euler(nx, ny):
    m = generate_structured(nx, ny)
    assert m.nv == (nx + 1) * (ny + 1)
    assert m.nt == 2 * nx * ny
    assert len(m.boundary_edges) == 2 * (nx + ny)
    # Euler characteristic of a disc
    assert m.nv - m.n_edges + m.nt == 1
    assert np.isclose(m.areas.sum(), 1.0, rtol=0, atol=1e-13)


@given(
    st.floats(-5, 5), st.floats(0.1, 4), st.floats(-5, 5), st.floats(0.1, 4), st.integers(1, 6), st.integers(1, 6)
)
def test_structured_rectangle_area(x0, w, y0, hgt, nx, ny):
    m = generate_structured(nx, ny, (x0, x0 + w, y0, y0 + hgt))
    assert np.isclose(m.areas.sum(), w * hgt, rtol=1e-12)
    assert np.all(m.signed_areas > 0)


def test_diagonal_runs_lower_left_to_upper_right():
    m = generate_structured(1, 1)
    diag = {tuple(sorted(e)) for e in m.edges.tolist()} - {tuple(sorted(e)) for e in m.boundary_edges.tolist()}
    assert diag == {(0, 3)}


def test_h_of_unit_square():
    m = generate_structured(4, 4)
    assert m.h == pytest.approx(np.sqrt(2) / 4, rel=1e-14)
    # right isosceles triangle: ratio diameter / inscribed diameter = 1 + sqrt(2)
    assert m.quasi_uniformity == pytest.approx(1 + np.sqrt(2), rel=1e-12)


@given(st.integers(1, 5))
def test_refinement_preserves_area_and_halves_h(n):
    coarse = generate_structured(n, n + 1)
    fine = refine_uniform(coarse)
    assert fine.nt == 4 * coarse.nt
    assert fine.refinement_level == 1
    assert np.isclose(fine.h, coarse.h / 2, rtol=1e-13)
    per_parent = np.bincount(fine.parent, weights=fine.areas, minlength=coarse.nt)
    assert np.allclose(per_parent, coarse.areas, rtol=1e-13)
    assert fine.quasi_uniformity == pytest.approx(coarse.quasi_uniformity, rel=1e-12)


def test_ancestor_lineage_through_two_levels():
    m0 = generate_structured(2, 2)
    m2 = refine_uniform(refine_uniform(m0))
    anc = m2.ancestor_triangles(m0)
    assert np.array_equal(np.bincount(anc), np.full(m0.nt, 16))
    # every grandchild centroid lies in its ancestor
    c = m2.vertices[m2.triangles].mean(axis=1)
    p = m0.vertices[m0.triangles[anc]]
    for k in range(len(c)):
        J = np.column_stack([p[k, 1] - p[k, 0], p[k, 2] - p[k, 0]])
        lam = np.linalg.solve(J, c[k] - p[k, 0])
        assert lam.min() > 0 and lam.sum() < 1
    with pytest.raises(MeshError):
        m0.ancestor_triangles(m2)


def test_roundtrip(tmp_path):
    m = refine_uniform(generate_structured(3, 2, (0, 2, -1, 1)))
    path = tmp_path / "m.txt"
    write_mesh(m, path)
    r = read_mesh(path)
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.triangles, m.triangles)
    assert r.content_hash == m.content_hash


UNIT = """trimesh v1
# two triangles
4 2 4
0 0
1 0
1 1
0 1
0 1 2
0 2 3
0 1
1 2
2 3
3 0
"""


def test_read_comments_and_clockwise_reorientation(tmp_path, caplog):
    path = tmp_path / "cw.txt"
    path.write_text(UNIT.replace("0 2 3\n", "0 3 2  # clockwise\n"))
    with caplog.at_level(logging.WARNING):
        m = read_mesh(path)
    assert np.all(m.signed_areas > 0)
    assert "clockwise" in caplog.text.lower() or "reorient" in caplog.text.lower()


@pytest.mark.parametrize(
    "text, line",
    [
        (UNIT.replace("trimesh v1", "trimesh v2"), 1),
        (UNIT.replace("1 1\n", "1 one\n"), 6),
        (UNIT.replace("0 1 2\n", "0 1 9\n"), 8),
        (UNIT.replace("0 2 3\n", "0 2\n"), 9),
    ],
)
def test_read_errors_carry_line_numbers(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(MeshError) as info:
        read_mesh(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_validate_rejects_bad_meshes():
    v = [[0, 0], [1, 0], [1, 1], [0, 1]]
    good = [[0, 1, 2], [0, 2, 3]]
    bnd = [[0, 1], [1, 2], [2, 3], [3, 0]]
    TriMesh(v, good, bnd)
    with pytest.raises(MeshError, match="duplicate"):
        TriMesh(v, good + [[1, 2, 0]], bnd)
    with pytest.raises(MeshError, match="boundary"):
        TriMesh(v, good, bnd[:3])
    with pytest.raises(MeshError, match="area"):
        TriMesh(v, [[0, 2, 1], [0, 2, 3]], bnd)
    # hanging vertex at (0.5, 0.5) on the diagonal
    v5 = v + [[0.5, 0.5]]
    with pytest.raises(MeshError):
        TriMesh(v5, [[0, 1, 4], [1, 2, 4], [0, 2, 3]], bnd + [[0, 4], [4, 2], [2, 0]])


def test_structured_rejects_bad_input():
    with pytest.raises(ValueError):
        generate_structured(0, 3)
    with pytest.raises(ValueError):
        generate_structured(2, 2, (1, 0, 0, 1))
