import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from projflow import linsolve
from projflow.assembly import assemble_stiffness, build_operators
from projflow.fespace import build_space
from projflow.linsolve import ConvergenceError, SingularMatrixError, SolverConfig
from projflow.mesh import generate_structured


def spd(n, seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(n, n))
    return Q @ Q.T + n * np.eye(n)


@given(st.integers(2, 40), st.integers(0, 10**6))
def test_cg_matches_dense_solve(n, seed):
    S = sp.csr_matrix(spd(n, seed))
    b = np.random.default_rng(seed + 1).normal(size=n)
    x = linsolve.solve_cg(S, b, SolverConfig(rel_tol=1e-12, method="cg"))
    ref = np.linalg.solve(S.toarray(), b)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


def test_cg_with_constant_deflation_on_neumann_laplacian():
    V = build_space(generate_structured(5, 4), 1)
    A = assemble_stiffness(V)
    b = np.random.default_rng(0).normal(size=V.n_dofs)
    b -= b.mean()
    x = linsolve.solve_cg(A, b, SolverConfig(rel_tol=1e-12, method="cg"), deflate_constants=True)
    ref = np.linalg.pinv(A.toarray()) @ b
    assert abs(x.sum()) < 1e-10
    assert np.allclose(x - x.mean(), ref - ref.mean(), atol=1e-9)


def test_cg_reports_nonconvergence():
    S = sp.csr_matrix(spd(30, 3))
    with pytest.raises(ConvergenceError) as info:
        linsolve.solve_cg(S, np.ones(30), SolverConfig(rel_tol=1e-14, max_iter=2, method="cg"))
    assert info.value.iterations == 2 and info.value.residual > 1e-14


def test_cg_detects_indefinite():
    S = sp.diags([1.0, -1.0, 2.0]).tocsr()
    with pytest.raises(ConvergenceError):
        linsolve.solve_cg(S, np.array([1.0, 1.0, 1.0]), diag=np.ones(3))


@given(st.integers(2, 30), st.integers(0, 10**6))
def test_bicgstab_nonsymmetric(n, seed):
    rng = np.random.default_rng(seed)
    S = sp.csr_matrix(rng.normal(size=(n, n)) + 3 * n * np.eye(n))
    b = rng.normal(size=n)
    x = linsolve.bicgstab(S, b, SolverConfig(rel_tol=1e-12, method="nonsym_krylov"))
    assert np.linalg.norm(S @ x - b) <= 1e-11 * np.linalg.norm(b)
    assert np.allclose(linsolve.solve_prediction(S, b, SolverConfig(method="direct")), x, atol=1e-9)


def test_direct_detects_singular():
    S = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError):
        linsolve.solve_direct(S, np.array([1.0, 0.0]))
    with pytest.raises(SingularMatrixError):
        linsolve.solve_direct(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 0.0]))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)
    with pytest.raises(ValueError):
        SolverConfig(method="gmres")


@pytest.mark.parametrize("dt", [1e-3, 0.1, 10.0])
def test_darcy_saddle_solvers_agree_with_dense_kkt(disc4, dt):
    ops = disc4.ops
    rng = np.random.default_rng(7)
    ut = ops.zero_boundary(rng.normal(size=ops.n_u))
    rhs = ops.M_u @ ut
    u1, p1 = linsolve.solve_darcy_saddle(ops.M_u, ops.B, rhs, dt, SolverConfig(rel_tol=1e-12, method="schur_cg"), M_p=ops.M_p)
    u2, p2 = linsolve.solve_darcy_saddle(ops.M_u, ops.B, rhs, dt, SolverConfig(method="direct"), M_p=ops.M_p)
    # dense oracle on free DOFs with a Lagrange multiplier for the pressure mean
    f = disc4.free
    M, B = ops.M_u.toarray()[np.ix_(f, f)], ops.B.toarray()[:, f]
    w = ops.M_p @ np.ones(ops.n_p)
    n, m = len(f), ops.n_p
    K = np.zeros((n + m + 1, n + m + 1))
    K[:n, :n], K[:n, n : n + m], K[n : n + m, :n] = M, dt * B.T, B
    K[n : n + m, -1] = K[-1, n : n + m] = w
    sol = np.linalg.solve(K, np.concatenate([M @ ut[f], np.zeros(m + 1)]))
    for u, p in [(u1, p1), (u2, p2)]:
        assert np.allclose(u[f], sol[:n], atol=1e-10 * np.abs(sol[:n]).max())
        assert np.allclose(p, sol[n : n + m], atol=1e-9 * np.abs(sol[n : n + m]).max())
        assert np.abs(ops.B @ u).max() < 1e-10 * np.abs(ut).max()


def test_lbb_iterative_matches_dense(disc4):
    ops = disc4.ops
    it = linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method="iterative")
    dense = linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method="dense")
    assert it == pytest.approx(dense, rel=1e-8)
    # beta_h <= 1: |div v| <= |grad v| for zero-trace v
    assert 0 < it <= 1


def test_lbb_of_unstable_pair_skips_spurious_modes():
    m = generate_structured(4, 4)
    ops = build_operators(build_space(m, 1, "zero_trace"), build_space(m, 1, "zero_mean"))
    S = ops.B.toarray()[:, :]
    # spurious pressure modes: nonconstant kernel of B^T
    sv = np.linalg.svd(S, compute_uv=False)
    assert np.sum(sv < 1e-10 * sv.max()) > 1
    beta = linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method="dense")
    assert 0 < beta < 0.2
    with pytest.raises(ValueError):
        linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method="power")


def test_poincare_constant_below_continuous_value(disc8, disc2):
    cont = 1 / (np.pi * np.sqrt(2))
    for d in (disc8, disc2):
        cp = linsolve.poincare_constant(d.ops.M_u, d.ops.A_u, d.free)
        assert cp <= cont * (1 + 1e-12)
    cp8 = linsolve.poincare_constant(disc8.ops.M_u, disc8.ops.A_u, disc8.free)
    assert cp8 == pytest.approx(cont, rel=1e-3)


def test_zero_mean(disc2):
    p = np.random.default_rng(0).normal(size=disc2.ops.n_p)
    q = linsolve.zero_mean(p, disc2.ops.M_p)
    assert abs((disc2.ops.M_p @ np.ones(len(q))) @ q) < 1e-15
    assert np.allclose(np.diff(p - q), 0)
