"""Scheduling policies for the shared servers.

``ProposedPolicy`` tracks the minimum-norm LP split with per-server review
periods; the baselines are static work-conserving rules.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .optimizer import LpSolution, SplitSolver
from .sim import Policy, SimulationState, workload
from .topology import NetworkTopology

CEIL_TOL = 1e-9
TIE_TOL = 1e-12


class ContractError(ValueError):
    pass


def ceil_target(x: float) -> int:
    return max(0, math.ceil(x - CEIL_TOL))


@dataclass
class ReviewPlan:
    server: int
    kind: str  # "step2" or "step3"
    targets: dict[int, int]
    over_set: tuple[int, ...]
    under_set: tuple[int, ...]
    argmax_set: tuple[int, ...] = ()
    excluded: int | None = None
    started_at: float = 0.0
    ended_at: float | None = None
    q_star: dict[int, float] = field(default_factory=dict)
    excluded_count: int = 0  # S_im at review start
    served: int = 0

    def __post_init__(self):
        if set(self.over_set) & set(self.under_set):
            raise ContractError("over and under sets must be disjoint")
        if self.kind == "step2" and self.over_set:
            raise ContractError("a step2 review has no over-target buffers")
        if self.kind == "step3":
            if not self.over_set:
                raise ContractError("a step3 review needs an over-target buffer")
            if self.excluded not in self.under_set:
                raise ContractError(f"excluded type {self.excluded} is not in the under-target set")


def classify(state: SimulationState, i: int, sol: LpSolution, rates=None, rate_free: bool = False):
    """Split J_i into over/under-target types and find the argmax set J_i^<.

    ``rates`` are the limiting arrival rates used to rank the under-target
    buffers; ``rate_free`` ranks by q* - Q alone.
    """
    t = state.topology
    over, under = [], []
    for j in t.shared_types[i]:
        Q = state.q(i, j)
        (over if Q > ceil_target(sol.q_of(t, i, j)) else under).append(j)
    argmax = []
    if under:
        def score(j):
            gap = sol.q_of(t, i, j) - state.q(i, j)
            if rate_free:
                return gap
            if rates[j] > 0:
                return gap / rates[j]
            # a type that never arrives: only the sign of the gap matters
            return math.copysign(math.inf, gap) if gap else 0.0
        scores = {j: score(j) for j in under}
        best = max(scores.values())
        if math.isinf(best):
            argmax = [j for j in under if scores[j] == best]
        else:
            tol = TIE_TOL * max(1.0, abs(best))
            argmax = [j for j in under if scores[j] >= best - tol]
    return tuple(over), tuple(under), tuple(argmax)


def expected_review_length(state: SimulationState, i: int, sol: LpSolution, rates) -> float:
    """max over under-target types of (q*_ij - Q_ij) / lambda_j (diagnostic only)."""
    _, under, _ = classify(state, i, sol, rates)
    t = state.topology
    return max((sol.q_of(t, i, j) - state.q(i, j)) / rates[j] for j in under)


def step2_decision(state: SimulationState, i: int, plan: ReviewPlan) -> int | None:
    """Lowest-index nonempty buffer, or None to wait for the next arrival."""
    if plan.kind != "step2":
        raise ContractError("step2_decision needs a step2 plan")
    for j in state.topology.shared_types[i]:
        if state.q(i, j) > 0:
            return j
    return None


def step3_decision(state: SimulationState, i: int, plan: ReviewPlan) -> int | None:
    """Largest excess over target among j != m; None means the review is over."""
    if plan.kind != "step3":
        raise ContractError("step3_decision needs a step3 plan")
    if plan.excluded not in plan.under_set:
        raise ContractError(f"excluded type {plan.excluded} is not in the under-target set")
    best, pick = 0, None
    for j in state.topology.shared_types[i]:
        if j == plan.excluded:
            continue
        excess = state.q(i, j) - plan.targets[j]
        if excess > best:
            best, pick = excess, j
    return pick


def split_key(state: SimulationState) -> tuple:
    return tuple(state.Qk) + tuple(state.Qij)


def current_split(solver: SplitSolver, state: SimulationState) -> LpSolution:
    t = state.topology
    w = tuple(workload(state, i) for i in range(t.n_shared))
    return solver.solve(tuple(state.Qk), w)


_SOLVERS: dict[int, SplitSolver] = {}


def shared_solver(topology: NetworkTopology) -> SplitSolver:
    """One memoized solver per topology object, shared across replications."""
    s = _SOLVERS.get(id(topology))
    if s is None or s.topology is not topology:
        s = _SOLVERS[id(topology)] = SplitSolver(topology)
    return s


class ProposedPolicy(Policy):
    """Review-period tracking of the minimum-norm LP split at every shared server.

    Each shared server runs its own reviews.  A review starts by solving the
    LP and QP at the current state.  If no buffer is above its rounded-up
    target the server serves one job (lowest nonempty index, or the first
    arrival) and the review ends at that completion.  Otherwise it burns the
    excess above target on every type except one under-target type ``m`` and
    the review ends once no such excess is left.
    """

    name = "proposed"

    def __init__(self, rate_free: bool = False, log_reviews: bool = False, check: bool = False,
                 solver: SplitSolver | None = None):
        self.rate_free = rate_free
        self.log_reviews = log_reviews
        self.check = check
        self._solver = solver

    def reset(self, sim) -> None:
        super().reset(sim)
        t = sim.topology
        self.topology = t
        self.solver = self._solver or shared_solver(t)
        self.rates = t.arrival_rate
        self.plans: list[ReviewPlan | None] = [None] * t.n_shared
        self.log: list[ReviewPlan] = []
        self.violations: list[str] = []
        self.review_counts = [0] * t.n_shared
        self._last_end = [0.0] * t.n_shared
        for i in range(t.n_shared):
            self.begin_review(sim.state, i)

    def begin_review(self, state: SimulationState, i: int) -> ReviewPlan:
        t = self.topology
        now = state.clock
        sol = current_split(self.solver, state)
        over, under, argmax = classify(state, i, sol, self.rates, self.rate_free)
        targets = {j: ceil_target(sol.q_of(t, i, j)) for j in t.shared_types[i]}
        if over:
            m = argmax[0]
            plan = ReviewPlan(i, "step3", targets, over, under, argmax, m, now,
                              q_star={j: sol.q_of(t, i, j) for j in t.shared_types[i]},
                              excluded_count=state.Sij[t.pair_index[(i, m)]])
        else:
            plan = ReviewPlan(i, "step2", targets, over, under, argmax, None, now,
                              q_star={j: sol.q_of(t, i, j) for j in t.shared_types[i]})
        if self.check and abs(now - self._last_end[i]) > 0:
            self.violations.append(f"server {i}: review gap between {self._last_end[i]} and {now}")
        self.plans[i] = plan
        self.review_counts[i] += 1
        return plan

    def end_review(self, state: SimulationState, i: int) -> None:
        plan = self.plans[i]
        plan.ended_at = state.clock
        self._last_end[i] = state.clock
        if self.check and plan.kind == "step3":
            t = self.topology
            for j in plan.over_set:
                if state.q(i, j) != plan.targets[j]:
                    self.violations.append(f"server {i} t={state.clock}: type {j} ends at {state.q(i, j)} "
                                           f"!= target {plan.targets[j]}")
            for j in plan.under_set:
                if j != plan.excluded and state.q(i, j) > plan.targets[j]:
                    self.violations.append(f"server {i} t={state.clock}: type {j} above target at review end")
            if state.Sij[t.pair_index[(i, plan.excluded)]] != plan.excluded_count:
                self.violations.append(f"server {i} t={state.clock}: excluded type {plan.excluded} was served")
        if self.log_reviews:
            self.log.append(plan)
        self.plans[i] = None

    def choose(self, state: SimulationState, i: int) -> int:
        for _ in range(3):
            plan = self.plans[i] or self.begin_review(state, i)
            if plan.kind == "step2":
                j = step2_decision(state, i, plan)
            else:
                j = step3_decision(state, i, plan)
                if j is None:
                    self.end_review(state, i)
                    continue
            plan.served += 1
            return j
        raise ContractError(f"server {i}: no admissible decision at t={state.clock}")

    def on_completion(self, state: SimulationState, i: int, j: int) -> None:
        plan = self.plans[i]
        if plan.kind == "step2" or step3_decision(state, i, plan) is None:
            self.end_review(state, i)
            self.begin_review(state, i)

    def finish(self, state: SimulationState) -> None:
        # close the open reviews at the horizon so the log tiles [0, horizon]
        if self.log_reviews:
            for i, plan in enumerate(self.plans):
                if plan is not None:
                    plan.ended_at = state.clock
                    self.log.append(plan)

    def write_log(self, path) -> None:
        t = self.topology
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["server", "start", "end", "kind", "targets", "m"])
            for p in self.log:
                targets = ";".join(f"{t.type_label(j)}:{v}" for j, v in sorted(p.targets.items()))
                m = "" if p.excluded is None else t.type_label(p.excluded)
                wr.writerow([t.shared_label(p.server), repr(p.started_at), repr(p.ended_at), p.kind, targets, m])


class CmuPolicy(Policy):
    """Static priority to the largest h_j * mu_ij; ties go to the lower index."""

    name = "cmu_priority"

    def choose(self, state, i):
        t = state.topology
        best, pick = -math.inf, None
        for j, mu in zip(t.shared_types[i], t.shared_rate[i]):
            if state.q(i, j) > 0 and t.holding_cost[j] * mu > best:
                best, pick = t.holding_cost[j] * mu, j
        return pick


class FifoGlobalPolicy(Policy):
    """Serve the head-of-line job that arrived earliest across the server's buffers."""

    name = "fifo_global"

    def choose(self, state, i):
        t = state.topology
        best, pick = math.inf, None
        for j in t.shared_types[i]:
            p = t.pair_index[(i, j)]
            if state.Qij[p] > 0 and state.fifo[p][0] < best:
                best, pick = state.fifo[p][0], j
        return pick


class LongestQueuePolicy(Policy):
    name = "longest_queue"

    def choose(self, state, i):
        t = state.topology
        best, pick = 0, None
        for j in t.shared_types[i]:
            if state.q(i, j) > best:
                best, pick = state.q(i, j), j
        return pick


class RandomPolicy(Policy):
    """Uniform over nonempty buffers, drawn from the policy's own substream."""

    name = "random_wc"

    def reset(self, sim):
        super().reset(sim)
        self.rng = sim.stream("policy", "random_wc").rng

    def choose(self, state, i):
        t = state.topology
        nonempty = [j for j in t.shared_types[i] if state.q(i, j) > 0]
        return nonempty[int(self.rng.integers(len(nonempty)))] if nonempty else None


BASELINES = {
    "cmu_priority": CmuPolicy,
    "fifo_global": FifoGlobalPolicy,
    "longest_queue": LongestQueuePolicy,
    "random_wc": RandomPolicy,
}
ALIASES = {"cmu": "cmu_priority", "fifo": "fifo_global", "lq": "longest_queue", "random": "random_wc"}


def baseline(kind: str) -> Policy:
    kind = ALIASES.get(kind, kind)
    try:
        return BASELINES[kind]()
    except KeyError:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {sorted(BASELINES)}") from None


def make_policy(name: str, **kw) -> Policy:
    if name == "proposed":
        return ProposedPolicy(**kw)
    return baseline(name)


POLICY_NAMES = ("proposed",) + tuple(BASELINES)
