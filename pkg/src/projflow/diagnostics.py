"""Energy ledger, time interpolants, weak-divergence monitor and the discrete
Gronwall bound."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .assembly import OperatorSet

LEDGER_COLUMNS = ("m", "t", "E", "jump1", "jump2", "dissipation", "work", "residual")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def kinetic_energy(state, ops: OperatorSet, scheme: str, dt: float) -> float:
    """``1/2 ||u||^2``, plus ``dt^2/2 ||grad p||^2`` for the incremental scheme."""
    E = 0.5 * state.u.norm2(ops)
    if scheme == "incremental_poisson":
        E += 0.5 * dt**2 * float(state.p @ (ops.A_p @ state.p))
    return E


@dataclass
class LedgerRow:
    m: int
    t: float
    E: float
    jump1: float
    jump2: float
    dissipation: float
    work: float
    residual: float
    # not serialized: squared norm of the projected forcing, for the Gronwall-type bound
    f_norm2: float = 0.0

    def values(self):
        return [getattr(self, c) for c in LEDGER_COLUMNS]


@dataclass
class EnergyLedger:
    """Row ``m`` records ``E^m`` and the terms of the step ``m-1 -> m``:

    ``residual = E^m - E^{m-1} + jump1 + jump2 + dissipation - work``

    which vanishes up to solver error.  Row 0 holds ``E^0`` only.  For the
    incremental scheme the projection jump does not enter the identity and
    ``jump2`` is recorded as 0.
    """

    scheme: str
    dt: float
    mu: float
    rows: List[LedgerRow] = field(default_factory=list)

    def start(self, state, ops: OperatorSet) -> LedgerRow:
        E0 = kinetic_energy(state, ops, self.scheme, self.dt)
        row = LedgerRow(state.m, state.t, E0, 0.0, 0.0, 0.0, 0.0, 0.0)
        self.rows = [row]
        return row

    def append(self, s0, s1, ops: OperatorSet, forcing_vec: np.ndarray, f_norm2: float = 0.0) -> LedgerRow:
        row = ledger_row(s0, s1, ops, forcing_vec, self.scheme, self.dt, self.mu, self.rows[-1].E if self.rows else None)
        row.f_norm2 = f_norm2
        self.rows.append(row)
        return row

    def max_term(self, k: int) -> float:
        r = self.rows[k]
        prev = self.rows[k - 1].E if k > 0 else 0.0
        return max(abs(r.E), abs(prev), r.jump1, r.jump2, r.dissipation, abs(r.work))

    def relative_residuals(self) -> np.ndarray:
        out = []
        for k in range(1, len(self.rows)):
            top = self.max_term(k)
            out.append(abs(self.rows[k].residual) / top if top > 0 else abs(self.rows[k].residual))
        return np.array(out)

    def cumulative_residual(self, M: Optional[int] = None) -> float:
        """``E^M + sum(jumps + dissipation) - E^0 - sum(work)`` in compensated summation."""
        M = len(self.rows) - 1 if M is None else M
        terms = [self.rows[M].E, -self.rows[0].E]
        for r in self.rows[1 : M + 1]:
            terms += [r.jump1, r.jump2, r.dissipation, -r.work]
        return math.fsum(terms)

    def cumulative_scale(self, M: Optional[int] = None) -> float:
        M = len(self.rows) - 1 if M is None else M
        rows = self.rows[1 : M + 1]
        sums = [
            abs(self.rows[M].E),
            abs(self.rows[0].E),
            math.fsum(r.jump1 for r in rows),
            math.fsum(r.jump2 for r in rows),
            math.fsum(r.dissipation for r in rows),
            abs(math.fsum(r.work for r in rows)),
        ]
        return max(sums)

    def energies(self) -> np.ndarray:
        return np.array([r.E for r in self.rows])

    def gronwall_check(self) -> np.ndarray:
        """Slack ``bound - (E^M + sum_{m<=M} D^m)`` for ``M >= 1``, where ``D``
        collects the jumps and the dissipation of a step and
        ``bound = exp(2 M dt) (E^0 + dt/2 sum_{m<M} ||P f^m||^2)``.

        The constant in front of the exponential is 1: it follows from the
        step identity for ``dt <= 1/2`` and, when ``f = 0``, for every ``dt``.
        ``P`` is the L2 projection onto the velocity space, which is all the
        work term sees.
        """
        E0 = self.rows[0].E
        out = []
        f_acc, d_acc = [], []
        for M in range(1, len(self.rows)):
            r = self.rows[M]
            f_acc.append(r.f_norm2)
            d_acc += [r.jump1, r.jump2, r.dissipation]
            bound = math.exp(2 * M * self.dt) * (E0 + 0.5 * self.dt * math.fsum(f_acc))
            out.append(bound - math.fsum([r.E] + d_acc))
        return np.array(out)

    def gronwall_applicable(self) -> bool:
        return self.dt <= 0.5 or all(r.f_norm2 == 0.0 for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for r in self.rows:
                w.writerow([r.m] + [fmt(v) for v in r.values()[1:]])

    @staticmethod
    def read_csv(path) -> List[dict]:
        with open(path) as fh:
            return [{k: (int(v) if k == "m" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def ledger_row(s0, s1, ops: OperatorSet, forcing_vec, scheme: str, dt: float, mu: float, E_prev: Optional[float] = None) -> LedgerRow:
    """Terms of the energy identity for the step ``s0 -> s1``."""
    from .scheme import CompositeVelocity

    if E_prev is None:
        E_prev = kinetic_energy(s0, ops, scheme, dt)
    ut = s1.u_tilde
    M = ops.M_u
    E1 = kinetic_energy(s1, ops, scheme, dt)
    d1 = CompositeVelocity(ut, np.zeros(ops.n_p)) - s0.u
    jump1 = 0.5 * d1.norm2(ops)
    if scheme == "incremental_poisson":
        jump2 = 0.0
    else:
        d2 = s1.u.a - ut
        jump2 = 0.5 * float(d2 @ (M @ d2))
    diss = mu * dt * float(ut @ (ops.A_u @ ut))
    work = dt * float(np.asarray(forcing_vec) @ ut)
    residual = math.fsum([E1, -E_prev, jump1, jump2, diss, -work])
    return LedgerRow(s1.m, s1.t, E1, jump1, jump2, diss, work, residual)


def ledger_append(ledger: EnergyLedger, state_m, state_m1, ops: OperatorSet, forcing_vec, f_norm2: float = 0.0) -> LedgerRow:
    return ledger.append(state_m, state_m1, ops, forcing_vec, f_norm2)


def weak_div_residual(u, ops: OperatorSet) -> float:
    """``max_j |(u, grad psi_j)| / ||psi_j||_{H1}`` over the pressure basis.

    ``u`` is a :class:`~projflow.scheme.CompositeVelocity` or a plain velocity
    coefficient vector.
    """
    if isinstance(u, np.ndarray):
        tested = ops.G.T @ u
    else:
        tested = u.tested_on_gradients(ops)
    h1 = np.sqrt(ops.M_p.diagonal() + ops.A_p.diagonal())
    return float(np.max(np.abs(tested) / h1))


class Interpolants:
    """Time interpolants of a trajectory.

    * ``u_h``: piecewise linear in ``u^m`` on ``[t^m, t^{m+1})``
    * ``u_bar``: ``u_tilde^m`` on ``[t^m, t^{m+1})``
    * ``u_hat``: linear between ``u_tilde^{m+1}`` and ``u_tilde^{m+2}`` on ``[t^m, t^{m+1})``
    * ``u_tilde``: ``u_tilde^{m+1}`` on ``(t^m, t^{m+1}]``, equal to ``u^0`` at 0
    * ``p_h``: ``p^{m+1}`` on ``(t^m, t^{m+1}]``, equal to ``p^0`` at 0
    * ``f_h``: ``P f^m`` on ``(t^m, t^{m+1}]``

    Left-closed interpolants evaluated at ``t = T`` use the last interval
    (limit from the left).  ``u_hat`` is undefined on the final interval.
    Velocities are returned as composite values, intermediate velocities and
    pressures as coefficient vectors.
    """

    def __init__(self, states: Sequence, dt: float, ops: OperatorSet, forcing_vectors=None, mass_solve=None):
        self.states = list(states)
        self.dt = dt
        self.ops = ops
        self.N = len(self.states) - 1
        self.T = self.N * dt
        self.forcing_vectors = forcing_vectors
        self.mass_solve = mass_solve

    def _left(self, t: float):
        """Interval index ``m`` with ``t in [t^m, t^{m+1})`` and the local fraction."""
        if not 0.0 <= t <= self.T * (1 + 1e-14):
            raise ValueError(f"t = {t} outside [0, {self.T}]")
        m = min(int(math.floor(t / self.dt + 1e-12)), self.N - 1)
        # guard against t slightly below a node through rounding
        if m + 1 <= self.N - 1 and abs(t - (m + 1) * self.dt) <= 1e-12 * self.dt:
            m += 1
        return m, (t - m * self.dt) / self.dt

    def _right(self, t: float) -> int:
        """Index ``m`` with ``t in (t^m, t^{m+1}]``; ``-1`` for ``t = 0``."""
        if not 0.0 <= t <= self.T * (1 + 1e-14):
            raise ValueError(f"t = {t} outside [0, {self.T}]")
        if t <= 0.0:
            return -1
        m = int(math.ceil(t / self.dt - 1e-12)) - 1
        return min(max(m, 0), self.N - 1)

    def u_h(self, t: float):
        m, s = self._left(t)
        if t >= self.T:
            return self.states[self.N].u
        a, b = self.states[m].u, self.states[m + 1].u
        return a.scaled(1 - s) + b.scaled(s)

    def u_bar(self, t: float) -> np.ndarray:
        m, _ = self._left(t)
        return self.states[m].u_tilde

    def u_hat(self, t: float) -> np.ndarray:
        m, s = self._left(t)
        if m + 2 > self.N:
            raise ValueError("u_hat needs u_tilde^{m+2}; undefined on the final interval")
        a, b = self.states[m + 1].u_tilde, self.states[m + 2].u_tilde
        return a + s * (b - a)

    def u_tilde(self, t: float):
        m = self._right(t)
        if m < 0:
            return self.states[0].u
        return self.states[m + 1].u_tilde

    def p_h(self, t: float) -> np.ndarray:
        m = self._right(t)
        return self.states[0].p if m < 0 else self.states[m + 1].p

    def f_h(self, t: float) -> np.ndarray:
        if self.forcing_vectors is None or self.mass_solve is None:
            raise ValueError("forcing vectors and a mass solver are needed for f_h")
        m = max(self._right(t), 0)
        return self.mass_solve(self.ops.zero_boundary(self.forcing_vectors[m]))


def interpolant_difference_norms(states: Sequence, dt: float, ops: OperatorSet) -> dict:
    """Squared ``L2(0, T'; L2)`` norms of ``u_h - u_hat``, ``u_hat - u_tilde``
    and ``u_bar - u_tilde``, integrated exactly in time.

    ``u_hat`` needs ``u_tilde^{m+2}``, so all three use ``T' = (N-1) dt``,
    dropping the final interval.
    """
    from .scheme import CompositeVelocity

    N = len(states) - 1
    if N < 2:
        raise ValueError("trajectory needs at least three time levels")
    zero_c = np.zeros(ops.n_p)

    def cv(a):
        return CompositeVelocity(a, zero_c)

    uh_uhat, uhat_ut, ubar_ut = [], [], []
    for m in range(N - 1):
        # u_h - u_hat = (1-s) a + s b on [t^m, t^{m+1})
        a = states[m].u - cv(states[m + 1].u_tilde)
        b = states[m + 1].u - cv(states[m + 2].u_tilde)
        uh_uhat.append(dt * (a.norm2(ops) + a.inner(b, ops) + b.norm2(ops)) / 3.0)
        d = states[m + 2].u_tilde - states[m + 1].u_tilde
        uhat_ut.append(dt * float(d @ (ops.M_u @ d)) / 3.0)
        e = states[m].u_tilde - states[m + 1].u_tilde
        ubar_ut.append(dt * float(e @ (ops.M_u @ e)))
    return {
        "u_h-u_hat": math.fsum(uh_uhat),
        "u_hat-u_tilde": math.fsum(uhat_ut),
        "u_bar-u_tilde": math.fsum(ubar_ut),
    }


@dataclass
class GronwallInput:
    a: np.ndarray
    b: np.ndarray
    mu: float
    dt: float
    beta: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if np.any(self.a < 0) or np.any(self.b < 0) or min(self.mu, self.dt, self.beta) < 0:
            raise ValueError("Gronwall inputs must be nonnegative")


def satisfies_recursion(inp: GronwallInput, rtol: float = 1e-12) -> bool:
    """``a_n <= (1 + mu dt)(a_{n-1} + beta b_{n-1})`` for all ``n >= 1``."""
    g = 1.0 + inp.mu * inp.dt
    a, b = inp.a, inp.b
    rhs = g * (a[:-1] + inp.beta * b[: len(a) - 1])
    return bool(np.all(a[1:] <= rhs * (1 + rtol) + 1e-300))


def gronwall_bound(inp: GronwallInput) -> np.ndarray:
    """``exp(mu dt n) a_0 + beta sum_{m<n} exp(mu dt (n-m)) b_m`` for each ``n``.

    When ``a`` satisfies the recursion hypothesis the bound is checked and a
    violation raises ``AssertionError``.
    """
    n_levels = len(inp.a)
    if len(inp.b) < n_levels - 1:
        raise ValueError("b must have at least len(a) - 1 entries")
    lam = inp.mu * inp.dt
    out = np.empty(n_levels)
    for n in range(n_levels):
        # exp overflows to inf for huge mu*dt*n; the bound is then vacuous, not an error
        with np.errstate(over="ignore", invalid="ignore"):
            growth = np.exp(lam * (n - np.concatenate([[0], np.arange(n)])))
            terms = np.concatenate([[inp.a[0]], inp.beta * inp.b[:n]]) * growth
        out[n] = math.fsum(terms) if np.all(np.isfinite(terms)) else math.inf
    if satisfies_recursion(inp):
        bad = np.flatnonzero(inp.a > out * (1 + 1e-12) + 1e-300)
        if len(bad):
            raise AssertionError(f"Gronwall bound violated at n = {int(bad[0])}")
    return out
