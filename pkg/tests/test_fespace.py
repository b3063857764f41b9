from math import factorial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from projflow.assembly import assemble_mass
from projflow.fespace import (
    QUAD6,
    FEFunction,
    basis_values,
    build_space,
    evaluate,
    h1_seminorm,
    integrate,
    interpolate,
    l2_error,
    l2_norm,
    l2_project,
    load_vector,
    remove_mean,
)
from projflow.mesh import generate_structured, refine_uniform


@pytest.mark.parametrize("a, b", [(a, b) for a in range(7) for b in range(7) if a + b <= 6])
def test_quadrature_exact_on_reference_monomials(a, b):
    x, y = QUAD6.reference_xy().T
    exact = factorial(a) * factorial(b) / factorial(a + b + 2)
    assert QUAD6.weights @ (x**a * y**b) == pytest.approx(exact, rel=1e-14, abs=1e-16)


def test_quadrature_not_exact_beyond_degree_6():
    x, y = QUAD6.reference_xy().T
    exact = factorial(7) / factorial(9)
    assert abs(QUAD6.weights @ x**7 - exact) > 1e-8


@pytest.mark.parametrize("degree", [1, 2])
def test_basis_is_nodal_and_partition_of_unity(degree):
    nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    n = 3 if degree == 1 else 6
    assert np.allclose(basis_values(degree, nodes[:n]), np.eye(n), atol=1e-15)
    pts = np.random.default_rng(0).dirichlet(np.ones(3), size=50)
    assert np.allclose(basis_values(degree, pts).sum(axis=1), 1.0, atol=1e-14)


def test_dof_counts_and_boundary():
    m = generate_structured(3, 4)
    V = build_space(m, 2, "zero_trace")
    assert V.n_dofs == m.nv + m.n_edges == (2 * 3 + 1) * (2 * 4 + 1)
    assert len(V.boundary_dofs) == 2 * (2 * 3 + 2 * 4)
    bx, by = V.dof_coords[V.boundary_dofs].T
    assert np.all((np.abs(bx) < 1e-15) | (np.abs(bx - 1) < 1e-15) | (np.abs(by) < 1e-15) | (np.abs(by - 1) < 1e-15))
    assert np.array_equal(np.sort(np.concatenate([V.interior_dofs, V.boundary_dofs])), np.arange(V.n_dofs))


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_p2_reproduces_quadratics(c):
    m = generate_structured(3, 2)
    V = build_space(m, 2)
    q = lambda x, y: c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
    f = interpolate(V, q)
    assert l2_error(f, q) < 1e-12 * (1 + max(map(abs, c)))
    t = 3
    bary = np.array([0.2, 0.3, 0.5])
    xy = bary @ m.vertices[m.triangles[t]]
    assert evaluate(f, t, bary) == pytest.approx(q(*xy), abs=1e-12)


def test_interpolation_error_rates():
    f = lambda x, y: np.sin(np.pi * x) * np.exp(y)
    rates = {}
    for deg in (1, 2):
        errs = [l2_error(interpolate(build_space(generate_structured(n, n), deg), f), f) for n in (8, 16, 32)]
        rates[deg] = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates[1] - 2) < 0.1)
    assert np.all(np.abs(rates[2] - 3) < 0.1)


def test_norms_of_known_functions():
    V = build_space(generate_structured(4, 4), 2)
    f = interpolate(V, lambda x, y: x * y)
    assert l2_norm(f) ** 2 == pytest.approx(1 / 9, rel=1e-13)
    assert h1_seminorm(f) ** 2 == pytest.approx(2 / 3, rel=1e-13)
    assert integrate(f)[0] == pytest.approx(0.25, rel=1e-13)
    g = remove_mean(f)
    assert abs(integrate(g)[0]) < 1e-15


def test_l2_projection_is_exact_on_the_space_and_orthogonal():
    m = generate_structured(4, 4)
    V = build_space(m, 2)
    M = assemble_mass(V)
    q = lambda x, y: 1 + x * y - y * y
    assert l2_error(l2_project(q, V, M), q) < 1e-12
    f = lambda x, y: np.exp(x - y)
    P = l2_project(f, V, M)
    # residual is orthogonal to every basis function
    res = load_vector(V, f) - M @ P.coeffs
    assert np.abs(res).max() < 1e-13


def test_load_vector_from_refined_mesh_function():
    coarse = generate_structured(3, 3)
    fine = refine_uniform(coarse)
    Vc, Vf = build_space(coarse, 2), build_space(fine, 2)
    # a piecewise quadratic on the fine mesh integrated against coarse basis functions
    g = lambda x, y: np.cos(3 * x) * y
    gf = interpolate(Vf, g)
    direct = load_vector(Vc, gf)
    # oracle: integrate the fine P2 function exactly with coarse quadrature on every fine cell
    ref = np.zeros(Vc.n_dofs)
    anc = fine.ancestor_triangles(coarse)
    from projflow.fespace import basis_values as bv

    for t in range(fine.nt):
        P = coarse.vertices[coarse.triangles[anc[t]]]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        for xq, wq, vq in zip(Vf.quad_points[t], Vf.quad_weights[t], gf.at_quad()[0, t]):
            l12 = np.linalg.solve(J, xq - P[0])
            phi = bv(2, np.array([[1 - l12.sum(), *l12]]))[0]
            ref[Vc.cell_dofs[anc[t]]] += wq * vq * phi
    assert np.allclose(direct, ref, atol=1e-15)


def test_zero_trace_projection_vanishes_on_boundary():
    from projflow.assembly import build_operators

    m = generate_structured(4, 4)
    V = build_space(m, 2, "zero_trace")
    ops = build_operators(V, build_space(m, 1, "zero_mean"))
    u = l2_project(lambda x, y: (np.ones_like(x), x), V, ops.M_u, ncomp=2)
    assert np.all(u.coeffs[ops.bdofs] == 0)


def test_zero_mean_projection():
    m = generate_structured(4, 4)
    P = build_space(m, 1, "zero_mean")
    p = l2_project(lambda x, y: x**2 + 3, P, assemble_mass(P))
    assert abs(integrate(p)[0]) < 1e-14


def test_bad_inputs():
    V = build_space(generate_structured(2, 2), 2)
    with pytest.raises(ValueError):
        FEFunction(V, np.zeros(3))
    with pytest.raises(ValueError):
        build_space(V.mesh, 3)
    f = interpolate(V, lambda x, y: x)
    with pytest.raises(IndexError):
        evaluate(f, 99, [1, 0, 0])
    with pytest.raises(ValueError):
        evaluate(f, 0, [0.5, 0.6, 0.1])
