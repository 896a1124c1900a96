"""Workload-splitting LP, minimum-norm selector QP and their verifiers.

Given dedicated backlogs ``q_k`` and shared workloads ``w_i`` the LP chooses
how many jobs of each type should sit in front of each shared server::

    min  sum_j h_j y_j
    s.t. y_j >= q_k            k in K_j
         y_j >= q_ij           i in I_j
         sum_j q_ij / mu_ij = w_i
         q_ij >= 0

Its value ``z(b)`` is the DCP lower-bound functional.  Because the LP can have
a whole face of optima, the policy uses the unique optimum of smallest
Euclidean norm, found by a small active-set QP.

Both problems are positively homogeneous in ``b``, so they are solved on
``b / max(b)`` and rescaled; tolerances below are therefore relative.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .topology import NetworkTopology

FEAS_TOL = 1e-9
ORACLE_MAX_DIM = 12


class OptimizerError(RuntimeError):
    def __init__(self, msg, status="numerical-failure"):
        super().__init__(msg)
        self.status = status


@dataclass(frozen=True)
class LpInstance:
    topology: NetworkTopology
    q_dedicated: tuple[float, ...]
    w: tuple[float, ...]

    def __post_init__(self):
        t = self.topology
        if len(self.q_dedicated) != t.n_dedicated or len(self.w) != t.n_shared:
            raise ValueError("b dimensions do not match the topology")
        if min(self.q_dedicated, default=0) < 0 or min(self.w, default=0) < 0:
            raise ValueError("b must be componentwise nonnegative")

    @property
    def b(self) -> np.ndarray:
        return np.array(self.q_dedicated + self.w, dtype=float)

    def lower(self) -> np.ndarray:
        """L_j = max(0, max_{k in K_j} q_k)."""
        t = self.topology
        return np.array([max([0.0] + [self.q_dedicated[k] for k in t.dedicated_of_type[j]])
                         for j in range(t.n_types)])

    def scaled(self, c: float) -> "LpInstance":
        return LpInstance(self.topology, tuple(c * x for x in self.q_dedicated), tuple(c * x for x in self.w))


@dataclass
class LpSolution:
    y: np.ndarray
    q: np.ndarray  # aligned with topology.pairs
    value: float
    status: str = "optimal"
    iterations: int = 0

    def q_of(self, topology: NetworkTopology, i: int, j: int) -> float:
        return float(self.q[topology.pair_index[(i, j)]])

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.y, self.q])


def check_solution(inst: LpInstance, sol: LpSolution, tol: float = 1e-8, z: float | None = None) -> list[str]:
    """Constraint violations of an LP/QP solution (empty when feasible)."""
    t = inst.topology
    out = []
    scale = max(1.0, float(np.max(inst.b, initial=0.0)))
    atol = tol * scale
    for k, j in enumerate(t.dedicated_type):
        if sol.y[j] < inst.q_dedicated[k] - atol:
            out.append(f"y[{j}] < q_k[{k}]")
    for p, (i, j) in enumerate(t.pairs):
        if sol.y[j] < sol.q[p] - atol:
            out.append(f"y[{j}] < q[{i},{j}]")
        if sol.q[p] < -atol:
            out.append(f"q[{i},{j}] < 0")
    for i in range(t.n_shared):
        work = sum(sol.q[t.pair_index[(i, j)]] / t.mu(i, j) for j in t.shared_types[i])
        if abs(work - inst.w[i]) > atol:
            out.append(f"workload row {i}: {work} != {inst.w[i]}")
    h = np.asarray(t.holding_cost)
    if abs(float(h @ sol.y) - sol.value) > atol:
        out.append("value differs from sum h_j y_j")
    if z is not None and float(h @ sol.y) > z + atol:
        out.append("objective exceeds z(b)")
    return out


# ---------------------------------------------------------------------------
# dense two-phase simplex (Bland's rule)

def simplex(c: np.ndarray, A: np.ndarray, b: np.ndarray, tol: float = FEAS_TOL,
            max_pivots: int | None = None) -> tuple[np.ndarray, float, int]:
    """Minimize c.x subject to A x = b, x >= 0, with b >= 0.

    Returns ``(x, value, pivots)``.  Raises :class:`OptimizerError` on
    infeasibility, unboundedness or when the pivot limit is hit.
    """
    m, n = A.shape
    if np.any(b < -tol):
        raise ValueError("simplex expects b >= 0")
    if max_pivots is None:
        max_pivots = 50 * (m + n)
    # tableau: rows 0..m-1 constraints, last column rhs; artificials n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = np.maximum(b, 0.0)
    basis = list(range(n, n + m))
    pivots = 0

    def run(obj_row, allowed):
        nonlocal pivots
        while True:
            red = T[-1, :allowed]
            cand = np.flatnonzero(red < -tol)
            if cand.size == 0:
                return
            e = int(cand[0])  # Bland: lowest-index improving column
            col = T[:m, e]
            pos = col > tol
            if not pos.any():
                raise OptimizerError("LP is unbounded", status="unbounded")
            ratios = np.full(m, np.inf)
            ratios[pos] = T[:m, -1][pos] / col[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
            r = int(min(ties, key=lambda row: basis[row]))  # Bland: lowest basic index leaves
            pivot(r, e)
            pivots += 1
            if pivots > max_pivots:
                raise OptimizerError(f"simplex exceeded {max_pivots} pivots")

    def pivot(r, e):
        T[r] /= T[r, e]
        colv = T[:, e].copy()
        colv[r] = 0.0
        T[:] -= np.outer(colv, T[r])
        basis[r] = e

    # phase I: minimize the sum of artificials
    T[-1, :] = 0.0
    T[-1, :n] = -T[:m, :n].sum(axis=0)
    T[-1, -1] = -T[:m, -1].sum()
    run(None, n + m)
    if -T[-1, -1] > tol * max(1.0, float(np.abs(b).max(initial=0.0))) * 10:
        raise OptimizerError("LP is infeasible", status="infeasible")
    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for r in range(m):
        if basis[r] >= n:
            nz = np.flatnonzero(np.abs(T[r, :n]) > tol)
            if nz.size:
                pivot(r, int(nz[0]))
                keep.append(r)
        else:
            keep.append(r)
    T = np.vstack([T[keep], T[-1:]])
    basis = [basis[r] for r in keep]
    m = len(keep)
    T = np.delete(T, np.s_[n:n + len(A)], axis=1)
    # phase II
    T[-1, :] = 0.0
    T[-1, :n] = c
    for r, bv in enumerate(basis):
        if T[-1, bv] != 0.0:
            T[-1] -= T[-1, bv] * T[r]
    run(None, n)
    x = np.zeros(n)
    for r, bv in enumerate(basis):
        x[bv] = T[r, -1]
    x[np.abs(x) < tol * 1e-3] = 0.0
    return x, float(c @ x), pivots


class _Structure:
    """Constant matrices of the LP/QP for one topology."""

    def __init__(self, t: NetworkTopology):
        self.t = t
        J, P, I = t.n_types, len(t.pairs), t.n_shared
        self.J, self.P, self.I = J, P, I
        self.h = np.asarray(t.holding_cost, dtype=float)
        # standard form over (s_j, q_p, e_p):  q_p - s_j + e_p = L_j ; sum q/mu = w_i
        A = np.zeros((P + I, J + 2 * P))
        for p, (i, j) in enumerate(t.pairs):
            A[p, J + p] = 1.0
            A[p, j] = -1.0
            A[p, J + P + p] = 1.0
            A[P + i, J + p] = 1.0 / t.mu(i, j)
        self.A_std = A
        self.c_std = np.concatenate([self.h, np.zeros(2 * P)])
        # QP constraints over x = (y, q):  G x >= g (rhs filled per instance), E x = w
        n = J + P
        self.n = n
        E = np.zeros((I, n))
        for p, (i, j) in enumerate(t.pairs):
            E[i, J + p] = 1.0 / t.mu(i, j)
        self.E = E
        rows = []
        for j in range(J):  # y_j >= L_j
            a = np.zeros(n)
            a[j] = 1.0
            rows.append(a)
        for p, (i, j) in enumerate(t.pairs):  # y_j - q_p >= 0
            a = np.zeros(n)
            a[j] = 1.0
            a[J + p] = -1.0
            rows.append(a)
        for p in range(P):  # q_p >= 0
            a = np.zeros(n)
            a[J + p] = 1.0
            rows.append(a)
        rows.append(np.concatenate([-self.h, np.zeros(P)]))  # -h.y >= -(z + slack)
        self.G = np.array(rows)


_STRUCTURES: dict[int, _Structure] = {}


def _structure(t: NetworkTopology) -> _Structure:
    s = _STRUCTURES.get(id(t))
    if s is None or s.t is not t:
        s = _STRUCTURES[id(t)] = _Structure(t)
    return s


def _normalize(inst: LpInstance) -> float:
    return float(np.max(inst.b, initial=0.0))


def solve_lp(inst: LpInstance) -> LpSolution:
    """An optimal basic solution of the workload-splitting LP."""
    s = _structure(inst.topology)
    scale = _normalize(inst)
    if scale <= 0:
        return LpSolution(np.zeros(s.J), np.zeros(s.P), 0.0)
    L = inst.lower() / scale
    w = np.asarray(inst.w, dtype=float) / scale
    rhs = np.concatenate([L[[j for _, j in inst.topology.pairs]], w])
    x, _, piv = simplex(s.c_std, s.A_std, rhs)
    y = (L + x[:s.J]) * scale
    q = x[s.J:s.J + s.P] * scale
    return LpSolution(y, q, float(s.h @ y), "optimal", piv)


def value_z(inst: LpInstance) -> float:
    return solve_lp(inst).value


def _independent(rows: list[np.ndarray], cand: np.ndarray, tol: float = 1e-10) -> bool:
    if not rows:
        return bool(np.linalg.norm(cand) > tol)
    M = np.vstack(rows + [cand])
    return np.linalg.matrix_rank(M, tol=tol) == len(rows) + 1


def _projection_qp(E: np.ndarray, e: np.ndarray, G: np.ndarray, g: np.ndarray, x0: np.ndarray,
                   tol: float = FEAS_TOL, max_iter: int | None = None) -> tuple[np.ndarray, int]:
    """Primal active-set method for  min 1/2 |x|^2  s.t.  E x = e,  G x >= g.

    ``x0`` must be feasible.  Working-set rows are kept linearly independent.
    """
    n = len(x0)
    m_in = len(G)
    if max_iter is None:
        max_iter = 10 * (n + m_in + len(E))
    x = x0.astype(float).copy()
    eq_rows = [E[r] for r in range(len(E)) if _independent([E[q] for q in range(r)], E[r])]
    # dependent equality rows are dropped (consistent by feasibility of x0)
    work: list[int] = []
    slack = G @ x - g
    for r in np.flatnonzero(np.abs(slack) <= tol):
        if _independent(eq_rows + [G[w] for w in work], G[r]):
            work.append(int(r))
    for it in range(max_iter):
        A = np.vstack(eq_rows + [G[w] for w in work]) if (eq_rows or work) else np.zeros((0, n))
        if len(A):
            lam, *_ = np.linalg.lstsq(A.T, x, rcond=None)
            p = A.T @ lam - x
        else:
            lam = np.zeros(0)
            p = -x
        if np.linalg.norm(p, np.inf) <= tol * max(1.0, np.linalg.norm(x, np.inf)):
            mult = lam[len(eq_rows):]
            if mult.size == 0 or mult.min() >= -tol:
                return x, it
            drop = int(np.argmin(mult))
            work.pop(drop)
            continue
        Gp = G @ p
        slack = G @ x - g
        alpha, block = 1.0, None
        for r in range(m_in):
            if r in work or Gp[r] >= -tol * 1e-3:
                continue
            a = max(slack[r], 0.0) / -Gp[r]
            if a < alpha:
                alpha, block = a, r
        x = x + alpha * p
        if block is not None:
            work.append(block)
    raise OptimizerError(f"active-set QP did not converge in {max_iter} iterations")


def select_solution(inst: LpInstance, z: float | None = None, start: LpSolution | None = None) -> LpSolution:
    """The LP optimum of minimum Euclidean norm (unique by strict convexity).

    ``start`` is any LP-optimal point; it defaults to the simplex vertex.
    """
    s = _structure(inst.topology)
    scale = _normalize(inst)
    if scale <= 0:
        return LpSolution(np.zeros(s.J), np.zeros(s.P), 0.0)
    if start is None:
        start = solve_lp(inst)
    if z is None:
        z = start.value
    L = inst.lower() / scale
    # the start point is LP-optimal, so its own cost keeps the face nonempty without slack
    cap = max(z, float(s.h @ start.y)) / scale
    g = np.concatenate([L, np.zeros(2 * s.P), [-cap]])
    w = np.asarray(inst.w, dtype=float) / scale
    x, it = _projection_qp(s.E, w, s.G, g, start.x / scale)
    x = x * scale
    y, q = x[:s.J], x[s.J:]
    q[(q < 0) & (q > -FEAS_TOL * scale)] = 0.0
    return LpSolution(y, q, float(s.h @ y), "optimal", it)


class SplitSolver:
    """Memoized LP-then-QP selection for one topology.

    Simulation states repeat often, so solutions are cached by the exact
    integer state that determines ``b``.
    """

    def __init__(self, topology: NetworkTopology, max_cache: int = 200_000):
        self.topology = topology
        self.max_cache = max_cache
        self._cache: dict[tuple, LpSolution] = {}
        self.solves = 0

    def solve(self, q_dedicated: tuple, w: tuple, key=None) -> LpSolution:
        if key is None:
            key = (tuple(q_dedicated), tuple(w))
        sol = self._cache.get(key)
        if sol is None:
            inst = LpInstance(self.topology, tuple(float(v) for v in q_dedicated), tuple(float(v) for v in w))
            sol = select_solution(inst)
            self.solves += 1
            if len(self._cache) >= self.max_cache:
                self._cache.clear()
            self._cache[key] = sol
        return sol


# ---------------------------------------------------------------------------
# independent verifier

def _lifted_constraints(inst: LpInstance):
    """(G, g, E, e) of the LP polyhedron in (y, q) space, one row per constraint."""
    t = inst.topology
    J, P = t.n_types, len(t.pairs)
    n = J + P
    G, g = [], []
    for k, j in enumerate(t.dedicated_type):
        a = np.zeros(n)
        a[j] = 1.0
        G.append(a)
        g.append(inst.q_dedicated[k])
    for j in range(J):
        if not t.dedicated_of_type[j] and not t.servers_of_type[j]:
            a = np.zeros(n)
            a[j] = 1.0
            G.append(a)
            g.append(0.0)
    for p, (i, j) in enumerate(t.pairs):
        a = np.zeros(n)
        a[j], a[J + p] = 1.0, -1.0
        G.append(a)
        g.append(0.0)
    for p in range(P):
        a = np.zeros(n)
        a[J + p] = 1.0
        G.append(a)
        g.append(0.0)
    E = np.zeros((t.n_shared, n))
    for p, (i, j) in enumerate(t.pairs):
        E[i, J + p] = 1.0 / t.mu(i, j)
    return np.array(G), np.array(g), E, np.asarray(inst.w, dtype=float)


def convex_objective(inst: LpInstance, q: np.ndarray) -> float:
    """sum_j h_j (max_k q_k  v  max_i q_ij) for a workload split ``q``."""
    t = inst.topology
    total = 0.0
    for j in range(t.n_types):
        vals = [inst.q_dedicated[k] for k in t.dedicated_of_type[j]]
        vals += [q[t.pair_index[(i, j)]] for i in t.servers_of_type[j]]
        total += t.holding_cost[j] * max(vals, default=0.0)
    return total


def oracle_lp(inst: LpInstance, return_vertices: bool = False, tol: float = 1e-9):
    """Optimal LP value by exhaustive vertex enumeration.

    Every vertex of the (pointed) polyhedron in (y, q) space is found by
    solving each square subsystem of active constraints; the convex objective
    is then evaluated at the q-part of every feasible vertex.
    """
    G, g, E, e = _lifted_constraints(inst)
    n = G.shape[1]
    if n > ORACLE_MAX_DIM:
        raise ValueError(f"oracle limited to {ORACLE_MAX_DIM} variables, instance has {n}")
    n_eq = np.linalg.matrix_rank(E) if len(E) else 0
    E = E[:n_eq] if n_eq == len(E) else E
    need = n - len(E)
    combos = np.array(list(itertools.combinations(range(len(G)), need)), dtype=int)
    if combos.size == 0:
        combos = np.zeros((1, 0), dtype=int)
    M = np.concatenate([np.broadcast_to(E, (len(combos),) + E.shape), G[combos]], axis=1)
    rhs = np.concatenate([np.broadcast_to(e, (len(combos), len(e))), g[combos]], axis=1)
    det = np.linalg.det(M)
    ok = np.abs(det) > 1e-12
    X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    scale = max(1.0, float(np.abs(np.concatenate([g, e])).max(initial=0.0)))
    feas = np.all(X @ G.T >= g - tol * scale, axis=1) & np.all(np.abs(X @ E.T - e) <= tol * scale, axis=1)
    V = X[feas]
    J = inst.topology.n_types
    vals = np.array([convex_objective(inst, v[J:]) for v in V])
    best = float(vals.min())
    if return_vertices:
        uniq = np.unique(np.round(V, 9), axis=0)
        return best, uniq
    return best


# ---------------------------------------------------------------------------

def lipschitz_probe(pairs) -> tuple[float, float]:
    """Largest |z1 - z2| / |b1 - b2|_inf and max |q1 - q2| / |b1 - b2|_inf over pairs.

    Pairs at zero distance are skipped.
    """
    zr = qr = 0.0
    for a, b in pairs:
        d = float(np.max(np.abs(a.b - b.b), initial=0.0))
        if d == 0.0:
            continue
        sa, sb = select_solution(a), select_solution(b)
        zr = max(zr, abs(sa.value - sb.value) / d)
        qr = max(qr, float(np.max(np.abs(sa.q - sb.q), initial=0.0)) / d)
    return zr, qr


def dump_solutions(path, rows) -> None:
    """Write ``(instance, solution)`` rows as CSV: b..., y..., q..., z."""
    rows = list(rows)
    if not rows:
        return
    t = rows[0][0].topology
    header = ([f"q_k{t.dedicated_label(k)}" for k in range(t.n_dedicated)]
              + [f"w_{t.shared_label(i)}" for i in range(t.n_shared)]
              + [f"y_{t.type_label(j)}" for j in range(t.n_types)]
              + [f"q_{t.shared_label(i)}_{t.type_label(j)}" for i, j in t.pairs] + ["z"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for inst, sol in rows:
            wr.writerow([repr(float(v)) for v in (*inst.b, *sol.y, *sol.q)] + [repr(float(sol.value))])
