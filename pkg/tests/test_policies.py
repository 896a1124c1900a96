from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gen import random_strict_topology
from fjlab.optimizer import LpSolution
from fjlab.policies import (ContractError, ProposedPolicy, ReviewPlan, baseline, ceil_target, classify,
                            current_split, expected_review_length, make_policy, shared_solver, step2_decision,
                            step3_decision)
from fjlab.sim import InitialState, Simulation, SimulationState, workload
from fjlab.topology import HeavyTrafficSequence, NetworkTopology


def shared_only(n=2, mu=None, h=None, lam=None):
    lam = lam or (1.0 / n,) * n
    return NetworkTopology(arrival_rate=tuple(lam), holding_cost=tuple(h or (1.0,) * n),
                           shared_types=(tuple(range(n)),), shared_rate=(tuple(mu or (1.0,) * n),))


def sol_with(t, q):
    q = np.asarray(q, dtype=float)
    return LpSolution(np.zeros(t.n_types), q, 0.0)


def test_ceil_target_absorbs_rounding_dust():
    assert ceil_target(3.0 + 1e-12) == 3
    assert ceil_target(2.2) == 3
    assert ceil_target(-1e-13) == 0


def test_classify_examples():
    t = shared_only()
    st_ = SimulationState(t, InitialState(Qij=(5, 1)))
    assert classify(st_, 0, sol_with(t, (3, 3)), (1.0, 1.0)) == ((0,), (1,), (1,))
    st_ = SimulationState(t, InitialState(Qij=(3, 3)))
    over, under, _ = classify(st_, 0, sol_with(t, (3, 3)), (1.0, 1.0))
    assert over == () and under == (0, 1)


def test_classify_tie_keeps_all_and_lowest_is_excluded():
    t = shared_only(3, lam=(1.0, 1.0, 1.0), mu=(3.0, 3.0, 3.0))
    st_ = SimulationState(t, InitialState(Qij=(12, 0, 0)))
    over, under, argmax = classify(st_, 0, sol_with(t, (4, 4, 4)), (1.0, 1.0, 1.0))
    assert over == (0,) and argmax == (1, 2)


def test_begin_review_on_empty_system_is_step2():
    t = shared_only()
    sim = Simulation(HeavyTrafficSequence(t), 1, ProposedPolicy(), 1.0, 0)
    pol = sim.policy
    pol.reset(sim)
    plan = pol.plans[0]
    assert plan.kind == "step2" and plan.targets == {0: 0, 1: 0}


def test_begin_review_step3_excludes_under_type():
    t = shared_only()
    sim = Simulation(HeavyTrafficSequence(t), 1, ProposedPolicy(), 1.0, 0, initial=InitialState(Qij=(5, 1)))
    sim.policy.reset(sim)
    plan = sim.policy.plans[0]
    assert plan.kind == "step3" and plan.targets == {0: 3, 1: 3} and plan.excluded == 1
    assert plan.over_set == (0,)


def test_step2_decisions():
    t = shared_only()
    plan = ReviewPlan(0, "step2", {0: 5, 1: 5}, (), (0, 1))
    assert step2_decision(SimulationState(t, InitialState(Qij=(0, 3))), 0, plan) == 1
    assert step2_decision(SimulationState(t, InitialState(Qij=(2, 3))), 0, plan) == 0
    assert step2_decision(SimulationState(t), 0, plan) is None


def test_step2_serves_first_arrival():
    from fjlab.primitives import DistributionSpec as D
    # type 2 arrives first (at 0.3); type 1 only at 10
    t = NetworkTopology(arrival_rate=(1.0, 1.0), holding_cost=(1, 1), shared_types=((0, 1),),
                        shared_rate=((2.0, 2.0),), arrival_dist=(D("deterministic", 1.0), D("deterministic", 1.0)))
    seq = HeavyTrafficSequence(t)
    sim = Simulation(seq, 1, ProposedPolicy(log_reviews=True), 0.5, 0, arrival_rates=(0.1, 1 / 0.3))
    res = sim.run()
    assert res.state.A == [0, 1]
    assert sim.state.shr_pair[0] == t.pair_index[(0, 1)]
    assert sim.state.shr_start[0] == pytest.approx(0.3)


def test_step3_decisions():
    t = shared_only(3)
    plan = ReviewPlan(0, "step3", {0: 3, 1: 3, 2: 0}, (0, 1), (2,), (2,), 2)
    assert step3_decision(SimulationState(t, InitialState(Qij=(5, 4, 9))), 0, plan) == 0
    assert step3_decision(SimulationState(t, InitialState(Qij=(3, 2, 9))), 0, plan) is None


def test_step3_contract_guards():
    with pytest.raises(ContractError):
        ReviewPlan(0, "step3", {0: 3, 1: 3}, (1,), (0,), (0,), 1)  # excluded type is over target
    with pytest.raises(ContractError):
        ReviewPlan(0, "step2", {0: 3, 1: 3}, (1,), (0,))
    with pytest.raises(ContractError):
        ReviewPlan(0, "step3", {0: 3, 1: 3}, (0,), (0, 1), (1,), 1)
    plan = ReviewPlan(0, "step3", {0: 3, 1: 3}, (1,), (0,), (0,), 0)
    plan.excluded = 1
    with pytest.raises(ContractError):
        step3_decision(SimulationState(shared_only(), InitialState(Qij=(3, 4))), 0, plan)
    with pytest.raises(ContractError):
        step2_decision(SimulationState(shared_only()), 0, ReviewPlan(0, "step3", {0: 0, 1: 0}, (1,), (0,), (0,), 0))


def test_expected_review_length():
    t = shared_only()
    st_ = SimulationState(t, InitialState(Qij=(0, 2)))
    sol = sol_with(t, (4, 4))
    assert expected_review_length(st_, 0, sol, (1.0, 1.0)) == 4
    st_ = SimulationState(t, InitialState(Qij=(4, 4)))
    assert expected_review_length(st_, 0, sol, (1.0, 1.0)) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_review_length_balances_workload(seed):
    rng = np.random.default_rng(seed)
    t = random_strict_topology(rng, max_dedicated=0)
    Q = tuple(int(x) for x in rng.integers(0, 12, len(t.pairs)))
    # job-count identity needs equal counts on every leg of a type
    per_type = {j: int(rng.integers(0, 12)) for j in range(t.n_types)}
    Q = tuple(per_type[j] for _, j in t.pairs)
    st_ = SimulationState(t, InitialState(Qij=Q))
    sol = current_split(shared_solver(t), st_)
    lam = t.arrival_rate
    for i in range(t.n_shared):
        L = expected_review_length(st_, i, sol, lam)
        rhs = sum(max(lam[j] * L - sol.q_of(t, i, j) + st_.q(i, j), 0.0) / t.mu(i, j) for j in t.shared_types[i])
        assert rhs == pytest.approx(L, abs=1e-9 * max(1.0, L))
        targets = [ceil_target(sol.q_of(t, i, j)) for j in t.shared_types[i]]
        assert sum(c / t.mu(i, j) for c, j in zip(targets, t.shared_types[i])) >= \
            workload(st_, i) - sum(1 / t.mu(i, j) for j in t.shared_types[i]) - 1e-9


def test_baseline_examples(fig2):
    st_ = SimulationState(fig2, InitialState(Qk=(2, 3), Qij=(2, 3)))
    assert baseline("cmu_priority").choose(st_, 0) == 0
    st_.fifo[0], st_.fifo[1] = deque([3.0, 4.0]), deque([2.0, 5.0, 6.0])
    assert baseline("fifo_global").choose(st_, 0) == 1
    assert baseline("longest_queue").choose(st_, 0) == 1
    one = SimulationState(fig2, InitialState(Qk=(0, 2), Qij=(0, 2)))
    pol = baseline("random_wc")
    pol.rng = np.random.default_rng(0)
    assert {pol.choose(one, 0) for _ in range(20)} == {1}
    with pytest.raises(ValueError):
        baseline("edf")


def test_proposed_structure_on_a_run(fig2_seq, tmp_path):
    pol = make_policy("proposed", check=True, log_reviews=True)
    res = Simulation(fig2_seq, 10, pol, 100.0 * 10, 3, check=True).run()
    assert pol.violations == []
    assert pol.log[0].started_at == 0.0 and pol.log[-1].ended_at == res.state.clock
    for a, b in zip(pol.log, pol.log[1:]):
        if a.server == b.server:
            assert a.ended_at == b.started_at
    pol.write_log(tmp_path / "reviews.csv")
    head = (tmp_path / "reviews.csv").read_text().splitlines()[0]
    assert head == "server,start,end,kind,targets,m"


def test_rate_free_variant_runs(fig2_seq):
    pol = make_policy("proposed", rate_free=True, check=True)
    Simulation(fig2_seq, 5, pol, 200.0, 8, check=True).run()
    assert pol.violations == []
