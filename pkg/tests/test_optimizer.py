import csv

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from _gen import random_lp_instance
from fjlab.optimizer import (LpInstance, LpSolution, OptimizerError, SplitSolver, check_solution, convex_objective,
                             dump_solutions, lipschitz_probe, oracle_lp, select_solution, simplex, solve_lp,
                             value_z)
from fjlab.topology import NetworkTopology, figure2_network


def one_server(mu=(1.0, 2.0), h=(3.0, 1.0), dedicated=False):
    return NetworkTopology(arrival_rate=(0.5, 0.5), holding_cost=h, shared_types=((0, 1),),
                           shared_rate=(mu,), dedicated_type=(0,) if dedicated else (),
                           dedicated_rate=(1.0,) if dedicated else ())


def test_worked_instance_without_dedicated():
    sol = solve_lp(LpInstance(one_server(), (), (2.0,)))
    assert sol.value == pytest.approx(4.0, abs=1e-12)
    assert np.allclose(sol.q, [0, 4]) and np.allclose(sol.y, [0, 4])


def test_worked_instance_with_dedicated_backlog():
    sol = solve_lp(LpInstance(one_server(dedicated=True), (5.0,), (2.0,)))
    assert sol.value == pytest.approx(15.0, abs=1e-12)
    assert np.allclose(sol.q, [2, 0])


def test_zero_parameter():
    sol = solve_lp(LpInstance(one_server(dedicated=True), (0.0,), (0.0,)))
    assert sol.value == 0 and not sol.y.any() and not sol.q.any()
    qp = select_solution(LpInstance(one_server(), (), (0.0,)))
    assert not qp.x.any()


def test_value_z_homogeneity():
    inst = LpInstance(one_server(), (), (2.0,))
    assert value_z(inst) == pytest.approx(4.0)
    assert value_z(inst.scaled(2.0)) == pytest.approx(8.0)


def test_symmetric_tie_selects_midpoint():
    sol = select_solution(LpInstance(one_server(mu=(1.0, 1.0), h=(1.0, 1.0)), (), (2.0,)))
    assert np.allclose(sol.q, [1, 1], atol=1e-12) and np.allclose(sol.y, [1, 1], atol=1e-12)
    assert sol.value == pytest.approx(2.0)


def test_unique_optimum_is_returned_by_qp():
    sol = select_solution(LpInstance(one_server(), (), (2.0,)))
    assert np.allclose(sol.q, [0, 4], atol=1e-12)


def test_oracle_examples():
    assert oracle_lp(LpInstance(one_server(), (), (2.0,))) == pytest.approx(4.0)
    assert oracle_lp(LpInstance(one_server(dedicated=True), (5.0,), (2.0,))) == pytest.approx(15.0)
    assert oracle_lp(LpInstance(one_server(), (), (0.0,))) == 0.0
    _, verts = oracle_lp(LpInstance(one_server(), (), (2.0,)), return_vertices=True)
    assert len(verts) == 2


def test_interior_optimum_is_found_by_oracle():
    # one server, free workload up to the dedicated backlog: the optimum sits
    # strictly inside the q-simplex, which a q-only vertex search would miss
    t = NetworkTopology(arrival_rate=(0.5, 0.5), holding_cost=(1.0, 0.1), shared_types=((0, 1),),
                        shared_rate=((1.0, 1.0),), dedicated_type=(0,), dedicated_rate=(1.0,))
    inst = LpInstance(t, (5.0,), (10.0,))
    assert value_z(inst) == pytest.approx(5.5)
    assert oracle_lp(inst) == pytest.approx(5.5)


def test_simplex_matches_linprog():
    rng = np.random.default_rng(3)
    for _ in range(40):
        m, n = rng.integers(1, 5), rng.integers(4, 9)
        A = rng.uniform(-1, 2, (m, n))
        x0 = rng.uniform(0, 2, n)
        b = A @ x0
        sign = np.where(b < 0, -1.0, 1.0)
        A, b = A * sign[:, None], b * sign
        c = rng.uniform(0.1, 2, n)
        x, val, _ = simplex(c, A, b)
        ref = linprog(c, A_eq=A, b_eq=b, bounds=[(0, None)] * n, method="highs")
        assert val == pytest.approx(ref.fun, abs=1e-8)
        assert np.allclose(A @ x, b, atol=1e-8) and x.min() >= -1e-12


def test_simplex_reports_infeasible_and_unbounded():
    with pytest.raises(OptimizerError):
        simplex(np.ones(2), np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 2.0]))
    with pytest.raises(OptimizerError):
        simplex(np.array([-1.0, 0.0]), np.array([[1.0, -1.0]]), np.array([1.0]))


def test_zero_cost_types_are_allowed():
    t = one_server(mu=(1.0, 1.0), h=(0.0, 1.0))
    inst = LpInstance(t, (), (3.0,))
    assert value_z(inst) == 0.0
    sol = select_solution(inst)
    assert np.allclose(sol.q, [3, 0]) and check_solution(inst, sol) == []


def test_invalid_parameters():
    with pytest.raises(ValueError):
        LpInstance(one_server(), (), (-1.0,))
    with pytest.raises(ValueError):
        LpInstance(one_server(), (1.0,), (1.0,))


def cvxpy_min_norm(inst, z):
    """Independent solve of the minimum-norm optimal split."""
    t = inst.topology
    J, P = t.n_types, len(t.pairs)
    y, q = cp.Variable(J), cp.Variable(P)
    cons = [q >= 0, y >= 0, np.asarray(t.holding_cost) @ y <= z]
    for k, j in enumerate(t.dedicated_type):
        cons.append(y[j] >= inst.q_dedicated[k])
    for p, (i, j) in enumerate(t.pairs):
        cons.append(y[j] >= q[p])
    for i in range(t.n_shared):
        cons.append(sum(q[t.pair_index[(i, j)]] / t.mu(i, j) for j in t.shared_types[i]) == inst.w[i])
    cp.Problem(cp.Minimize(cp.sum_squares(y) + cp.sum_squares(q)), cons).solve(solver=cp.CLARABEL)
    return np.concatenate([y.value, q.value])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_qp_matches_convex_solver(seed):
    inst = random_lp_instance(np.random.default_rng(seed))
    z = value_z(inst)
    sol = select_solution(inst, z)
    ref = cvxpy_min_norm(inst, z + 1e-9 * max(1.0, z))
    assert check_solution(inst, sol, z=z) == []
    assert np.max(np.abs(sol.x - ref)) <= 1e-4 * max(1.0, float(np.max(inst.b)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_lp_matches_oracle_and_convex_form(seed):
    inst = random_lp_instance(np.random.default_rng(seed))
    sol = solve_lp(inst)
    assert check_solution(inst, sol) == []
    assert sol.value == pytest.approx(oracle_lp(inst), abs=1e-6)
    assert convex_objective(inst, sol.q) == pytest.approx(sol.value, abs=1e-8 * max(1.0, sol.value))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 5.0))
def test_value_monotone_in_workload(seed, bump):
    rng = np.random.default_rng(seed)
    inst = random_lp_instance(rng)
    i = int(rng.integers(inst.topology.n_shared))
    w = list(inst.w)
    w[i] += bump
    bigger = LpInstance(inst.topology, inst.q_dedicated, tuple(w))
    assert value_z(bigger) >= value_z(inst) - 1e-9


def test_qp_unique_from_other_optimal_starts():
    rng = np.random.default_rng(17)
    for _ in range(30):
        inst = random_lp_instance(rng)
        z, verts = oracle_lp(inst, return_vertices=True)
        J = inst.topology.n_types
        h = np.asarray(inst.topology.holding_cost)
        optimal = [v for v in verts if abs(h @ v[:J] - z) <= 1e-7 * max(1.0, z)]
        ref = select_solution(inst)
        for v in optimal:
            other = select_solution(inst, z, LpSolution(v[:J].copy(), v[J:].copy(), float(h @ v[:J])))
            assert np.max(np.abs(other.x - ref.x)) <= 1e-7 * max(1.0, float(np.max(inst.b)))


def test_split_solver_caches():
    s = SplitSolver(figure2_network())
    a = s.solve((2.0, 0.0), (3.0,))
    b = s.solve((2.0, 0.0), (3.0,))
    assert a is b and s.solves == 1


def test_lipschitz_probe_skips_identical_pairs_and_homogeneity():
    t = one_server()
    a = LpInstance(t, (), (2.0,))
    zr, qr = lipschitz_probe([(a, a), (a, a.scaled(2.0))])
    # colinear pair: |z(2b) - z(b)| / |b|_inf = z(b) / |b|_inf
    assert zr == pytest.approx(4.0 / 2.0)
    assert qr == pytest.approx(4.0 / 2.0)
    assert lipschitz_probe([(a, a)]) == (0.0, 0.0)


def test_dump_solutions(tmp_path):
    t = one_server(dedicated=True)
    inst = LpInstance(t, (5.0,), (2.0,))
    path = tmp_path / "sol.csv"
    dump_solutions(path, [(inst, solve_lp(inst))])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["q_k1", "w_1", "y_1", "y_2", "q_1_1", "q_1_2", "z"]
    assert float(rows[1][-1]) == pytest.approx(15.0)
