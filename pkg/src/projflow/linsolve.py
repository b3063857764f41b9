"""Linear solvers for the prediction and projection steps, and the discrete
inf-sup (LBB) constant estimator."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

METHODS = ("direct", "cg", "nonsym_krylov", "schur_cg")


class SolverError(RuntimeError):
    pass


class SingularMatrixError(SolverError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_iter: int = 2000
    method: str = "direct"

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")


Operator = Union[sp.spmatrix, np.ndarray, spla.LinearOperator]


def _norm1(S) -> float:
    if sp.issparse(S):
        return float(abs(S).sum(axis=1).max())
    return float(np.abs(S).sum(axis=1).max())


def factorize(S: sp.spmatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Sparse LU factorization, returned as a solve callable."""
    try:
        lu = spla.splu(sp.csc_matrix(S))
    except RuntimeError as exc:
        raise SingularMatrixError(f"matrix is singular to working precision: {exc}") from None
    return lu.solve


def solve_direct(S: Operator, rhs: np.ndarray, solve: Optional[Callable] = None) -> np.ndarray:
    """Direct solve with a posteriori backward-error check."""
    rhs = np.asarray(rhs, dtype=float)
    if S.shape[0] != S.shape[1]:
        raise ValueError("matrix must be square")
    if solve is not None:
        x = solve(rhs)
    elif sp.issparse(S):
        x = factorize(S)(rhs)
    else:
        try:
            x = sla.solve(S, rhs)
        except sla.LinAlgError as exc:
            raise SingularMatrixError(str(exc)) from None
    r = S @ x - rhs
    scale = _norm1(S) * np.abs(x).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    if not np.all(np.isfinite(x)) or np.abs(r).max(initial=0.0) > 1e-12 * scale:
        raise SingularMatrixError("direct solve failed the residual check; matrix is numerically singular")
    return x


def _deflate(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def solve_cg(
    S: Operator,
    rhs: np.ndarray,
    config: SolverConfig = SolverConfig(method="cg"),
    deflate_constants: bool = False,
    x0: Optional[np.ndarray] = None,
    diag: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    With ``deflate_constants`` the constant vector is projected out of the
    right side and of every search direction, so ``S`` need only be SPD on the
    complement of the constants; the returned vector then has zero sum.
    """
    b = np.asarray(rhs, dtype=float)
    if deflate_constants:
        b = _deflate(b)
    if diag is None and not isinstance(S, spla.LinearOperator):
        diag = S.diagonal()
    dinv = 1.0 / diag if diag is not None else np.ones_like(b)

    def prec(r):
        z = dinv * r
        return _deflate(z) if deflate_constants else z

    bnorm = np.linalg.norm(b)
    tol = max(config.rel_tol * bnorm, config.abs_tol)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if deflate_constants:
        x = _deflate(x)
    r = b - S @ x if x.any() else b.copy()
    if deflate_constants:
        r = _deflate(r)
    rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return x
    z = prec(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, config.max_iter + 1):
        Sp = S @ p
        if deflate_constants:
            Sp = _deflate(Sp)
        pSp = p @ Sp
        if pSp <= 0:
            raise ConvergenceError("CG breakdown: operator not positive definite", rnorm / max(bnorm, 1e-300), it)
        alpha = rz / pSp
        x += alpha * p
        r -= alpha * Sp
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            break
        z = prec(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise ConvergenceError("CG did not converge", rnorm / max(bnorm, 1e-300), config.max_iter)
    # re-verify with an explicit product rather than the recurrence
    res = S @ x - b
    if deflate_constants:
        res = _deflate(res)
    true = np.linalg.norm(res)
    if true > 10 * tol:
        raise ConvergenceError("CG recurrence residual drifted from true residual", true / max(bnorm, 1e-300), it)
    return x


def bicgstab(S: Operator, rhs: np.ndarray, config: SolverConfig, diag: Optional[np.ndarray] = None) -> np.ndarray:
    """Jacobi-preconditioned BiCGStab for the nonsymmetric prediction system."""
    b = np.asarray(rhs, dtype=float)
    if diag is None:
        diag = S.diagonal()
    dinv = 1.0 / diag
    bnorm = np.linalg.norm(b)
    tol = max(config.rel_tol * bnorm, config.abs_tol)
    x = np.zeros_like(b)
    r = b.copy()
    if np.linalg.norm(r) <= tol:
        return x
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for it in range(1, config.max_iter + 1):
        rho_new = r_hat @ r
        if rho_new == 0.0 or omega == 0.0:
            raise ConvergenceError("BiCGStab breakdown", np.linalg.norm(r) / bnorm, it)
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        phat = dinv * p
        v = S @ phat
        alpha = rho / (r_hat @ v)
        s = r - alpha * v
        if np.linalg.norm(s) <= tol:
            x += alpha * phat
            r = s
            break
        shat = dinv * s
        t = S @ shat
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x += alpha * phat + omega * shat
        r = s - omega * t
        if np.linalg.norm(r) <= tol:
            break
    else:
        raise ConvergenceError("BiCGStab did not converge", np.linalg.norm(r) / bnorm, config.max_iter)
    true = np.linalg.norm(S @ x - b)
    if true > 10 * tol:
        raise ConvergenceError("BiCGStab residual check failed", true / bnorm, it)
    return x


def solve_prediction(S: sp.spmatrix, rhs: np.ndarray, config: SolverConfig = SolverConfig()) -> np.ndarray:
    """Solve ``(M/dt + N(w) + mu A) x = rhs`` by LU (``direct``) or BiCGStab."""
    if config.method == "direct":
        return solve_direct(S, rhs)
    if config.method in ("nonsym_krylov", "cg"):
        return bicgstab(S, rhs, config)
    raise ValueError(f"method {config.method!r} not applicable to the prediction step")


class SchurOperator(spla.LinearOperator):
    """``dt * B M^{-1} B^T`` applied matrix-free with a cached mass factorization."""

    def __init__(self, B: sp.spmatrix, mass_solve: Callable, dt: float):
        super().__init__(dtype=float, shape=(B.shape[0], B.shape[0]))
        self.B = B
        self.BT = sp.csr_matrix(B.T)
        self.mass_solve = mass_solve
        self.dt = dt

    def _matvec(self, q):
        return self.dt * (self.B @ self.mass_solve(self.BT @ np.ravel(q)))

    def approx_diagonal(self, mass_diag: np.ndarray) -> np.ndarray:
        d = self.dt * np.asarray(self.B.multiply(self.B) @ (1.0 / mass_diag)).ravel()
        d[d <= 0] = 1.0
        return d


def zero_mean(p: np.ndarray, M_p: sp.spmatrix) -> np.ndarray:
    """Shift a nodal P1 vector so that its integral vanishes."""
    w = M_p @ np.ones(M_p.shape[0])
    return p - (w @ p) / w.sum()


def solve_darcy_saddle(
    M_u: sp.spmatrix,
    B: sp.spmatrix,
    rhs_u: np.ndarray,
    dt: float,
    config: SolverConfig = SolverConfig(method="schur_cg"),
    M_p: Optional[sp.spmatrix] = None,
    mass_solve: Optional[Callable] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Solve ``M u + dt B^T p = rhs_u``, ``B u = 0`` with ``p`` of zero mean.

    ``rhs_u`` is ``M_u @ u_tilde``.  With ``method='schur_cg'`` the pressure
    comes from CG on the Schur complement ``dt B M^{-1} B^T`` (singular on
    constants, which are deflated); ``'direct'`` factorizes the bordered
    saddle-point matrix instead.
    """
    n_u, n_p = M_u.shape[0], B.shape[0]
    if config.method == "direct":
        w = (M_p @ np.ones(n_p)) if M_p is not None else np.ones(n_p)
        K = sp.bmat(
            [
                [M_u, dt * B.T, None],
                [B, None, sp.csr_matrix(w[:, None])],
                [None, sp.csr_matrix(w[None, :]), None],
            ],
            format="csc",
        )
        sol = solve_direct(K, np.concatenate([rhs_u, np.zeros(n_p + 1)]))
        return sol[:n_u], sol[n_u : n_u + n_p]
    if config.method != "schur_cg":
        raise ValueError(f"method {config.method!r} not applicable to the Darcy projection")
    if mass_solve is None:
        mass_solve = factorize(M_u)
    u_tilde = mass_solve(rhs_u)
    S = SchurOperator(B, mass_solve, dt)
    g = B @ u_tilde
    p = solve_cg(S, g, config, deflate_constants=True, diag=S.approx_diagonal(M_u.diagonal()))
    if M_p is not None:
        p = zero_mean(p, M_p)
    u = u_tilde - dt * mass_solve(B.T @ p)
    return u, p


def _generalized_lowest(apply_inv: Callable, Mp: sp.spmatrix, S_apply: Callable, n: int, k: int, tol: float, max_iter: int, rng):
    """Subspace inverse iteration for the lowest ``k`` eigenpairs of
    ``S q = lam M q`` restricted to the M-orthogonal complement of constants."""
    one = np.ones(n)
    Mone = Mp @ one
    c = one / np.sqrt(one @ Mone)

    def proj(X):
        return X - np.outer(c, (Mp @ c) @ X)

    X = proj(rng.standard_normal((n, k)))
    lam_old = None
    for it in range(max_iter):
        Y = np.column_stack([apply_inv(Mp @ X[:, j]) for j in range(k)])
        Y = proj(Y)
        SY = np.column_stack([S_apply(Y[:, j]) for j in range(k)])
        MY = Mp @ Y
        Ks, Km = Y.T @ SY, Y.T @ MY
        lam, V = sla.eigh(0.5 * (Ks + Ks.T), 0.5 * (Km + Km.T))
        X = Y @ V
        if lam_old is not None and abs(lam[0] - lam_old) <= tol * abs(lam[0]):
            return lam, X, it
        lam_old = lam[0]
    raise ConvergenceError("LBB eigen-iteration did not converge", abs(lam[0] - lam_old) / abs(lam[0]), max_iter)


def estimate_lbb(
    M_u: sp.spmatrix,
    A_u: sp.spmatrix,
    B: sp.spmatrix,
    M_p: sp.spmatrix,
    method: str = "iterative",
    tol: float = 1e-13,
    max_iter: int = 500,
    seed: int = 0,
) -> float:
    """Discrete inf-sup constant ``beta_h = sqrt(lambda_min^+)`` of
    ``B A_u^{-1} B^T q = lambda M_p q`` over zero-mean pressures.

    ``A_u`` must have its Dirichlet DOFs eliminated (unit diagonal, zero
    coupling), so those DOFs drop out of ``B A_u^{-1} B^T`` once the
    corresponding columns of ``B`` are zero.  ``method='dense'`` solves the
    full generalized eigenproblem and skips numerically zero eigenvalues
    (spurious pressure modes of unstable pairs); ``'iterative'`` runs subspace
    inverse iteration with CG inner solves and assumes an inf-sup stable pair.
    """
    A_solve = factorize(A_u)
    BT = sp.csr_matrix(B.T)
    n = B.shape[0]

    def S_apply(q):
        return B @ A_solve(BT @ q)

    if method == "dense":
        AinvBT = np.column_stack([A_solve(BT[:, j].toarray().ravel()) for j in range(n)])
        S = np.asarray(B @ AinvBT)
        S = 0.5 * (S + S.T)
        ev = sla.eigh(S, M_p.toarray(), eigvals_only=True)
        positive = ev[ev > 1e-10 * ev.max()]
        return float(np.sqrt(positive[0]))
    if method != "iterative":
        raise ValueError(f"unknown LBB method {method!r}")

    op = spla.LinearOperator((n, n), matvec=S_apply, dtype=float)
    inner = SolverConfig(rel_tol=1e-13, abs_tol=1e-300, max_iter=5000, method="cg")

    def apply_inv(r):
        return solve_cg(op, r, inner, deflate_constants=True, diag=np.ones(n))

    rng = np.random.default_rng(seed)
    lam, _, _ = _generalized_lowest(apply_inv, M_p, S_apply, n, min(4, n - 1), tol, max_iter, rng)
    return float(np.sqrt(lam[0]))


def poincare_constant(M_u: sp.spmatrix, A_u: sp.spmatrix, free: np.ndarray) -> float:
    """Discrete Poincare constant ``max ||v|| / ||grad v||`` over the velocity space."""
    M = sp.csc_matrix(M_u[free][:, free])
    A = sp.csc_matrix(A_u[free][:, free])
    if A.shape[0] <= 50:
        lam = sla.eigh(A.toarray(), M.toarray(), eigvals_only=True)[0]
    else:
        lam = spla.eigsh(A, k=1, M=M, sigma=0.0, which="LM", tol=1e-14)[0][0]
    return float(1.0 / np.sqrt(lam))
