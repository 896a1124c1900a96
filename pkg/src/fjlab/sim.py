"""Event-driven simulation of a fork-join network under a pluggable policy.

Buffers hold integer job counts.  ``Q`` counts include the job in service,
``Q1`` are the post-service join buffers.  Joins are instantaneous: whenever
every leg of a type has a finished task waiting, one job departs.
"""
from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .primitives import RandomStream
from .topology import HeavyTrafficSequence, NetworkTopology

TIME_TOL = 1e-9

# event kinds; completions sort before arrivals at equal timestamps
_DED, _SHR, _ARR = 0, 1, 2
_RANK = (0, 0, 1)


class AdmissibilityError(RuntimeError):
    pass


class InvariantError(AssertionError):
    pass


@dataclass
class InitialState:
    """Initial buffer contents; all empty by default."""

    Qk: tuple[int, ...] | None = None
    Qk1: tuple[int, ...] | None = None
    Qij: tuple[int, ...] | None = None  # aligned with topology.pairs
    Qij1: tuple[int, ...] | None = None


class SimulationState:
    """Dynamic state of one replication."""

    def __init__(self, topology: NetworkTopology, init: InitialState | None = None):
        t = topology
        self.topology = t
        init = init or InitialState()
        K, P, J, I = t.n_dedicated, len(t.pairs), t.n_types, t.n_shared
        self.clock = 0.0
        self.Qk = list(init.Qk or [0] * K)
        self.Qk1 = list(init.Qk1 or [0] * K)
        self.Qij = list(init.Qij or [0] * P)
        self.Qij1 = list(init.Qij1 or [0] * P)
        if any(len(a) != n for a, n in ((self.Qk, K), (self.Qk1, K), (self.Qij, P), (self.Qij1, P))):
            raise ValueError("initial state dimensions do not match the topology")
        if min(self.Qk + self.Qk1 + self.Qij + self.Qij1, default=0) < 0:
            raise ValueError("initial buffer contents must be nonnegative")
        self.Qk0, self.Qij0 = tuple(self.Qk), tuple(self.Qij)
        self.Tk = [0.0] * K          # busy time of completed services
        self.Tij = [0.0] * P
        self.A = [0] * J
        self.Sk = [0] * K
        self.Sij = [0] * P
        self.departures = [0] * J
        # in-service bookkeeping
        self.ded_start = [math.nan] * K
        self.ded_busy = [False] * K
        self.shr_pair = [-1] * I      # pair index in service, -1 when idle
        self.shr_start = [math.nan] * I
        self.shr_dur = [0.0] * I
        # arrival epochs of jobs waiting (or in service) in each shared buffer
        self.fifo = [deque([0.0] * q) for q in self.Qij]
        self.pairs_of_server = [[t.pair_index[(i, j)] for j in t.shared_types[i]] for i in range(I)]
        self.pair_server = [i for i, _ in t.pairs]
        self.pair_type = [j for _, j in t.pairs]
        self.pair_mu = [t.mu(i, j) for i, j in t.pairs]
        self.N0 = [0] * J
        for j in range(J):
            legs = self.legs(j)
            if legs:
                self.N0[j] = legs[0]
            if len(set(legs)) > 1:
                raise ValueError(f"initial state violates the job-count identity for type {j}")
            post = [self.Qk1[k] for k in t.dedicated_of_type[j]] + \
                   [self.Qij1[t.pair_index[(i, j)]] for i in t.servers_of_type[j]]
            if post and min(post) != 0:
                raise ValueError(f"initial state has an unflushed join for type {j}")
        self.N = list(self.N0)

    def legs(self, j: int) -> list[int]:
        t = self.topology
        return ([self.Qk[k] + self.Qk1[k] for k in t.dedicated_of_type[j]]
                + [self.Qij[p] + self.Qij1[p] for p in (t.pair_index[(i, j)] for i in t.servers_of_type[j])])

    def busy_ded(self, k: int) -> float:
        """Cumulative busy time of dedicated server k at the current clock."""
        return self.Tk[k] + (self.clock - self.ded_start[k] if self.ded_busy[k] else 0.0)

    def busy_pair(self, p: int) -> float:
        i = self.pair_server[p]
        return self.Tij[p] + (self.clock - self.shr_start[i] if self.shr_pair[i] == p else 0.0)

    def idle_ded(self, k: int) -> float:
        return self.clock - self.busy_ded(k)

    def idle_shared(self, i: int) -> float:
        return self.clock - sum(self.busy_pair(p) for p in self.pairs_of_server[i])

    def q(self, i: int, j: int) -> int:
        return self.Qij[self.topology.pair_index[(i, j)]]


def workload(state: SimulationState, i: int) -> float:
    """sum_{j in J_i} Q_ij / mu_ij."""
    return sum(state.Qij[p] / state.pair_mu[p] for p in state.pairs_of_server[i])


def job_count(state: SimulationState, j: int) -> int:
    """Number of type-j jobs in the system, checked against every leg."""
    legs = state.legs(j)
    t = state.topology
    n = max([state.Qk[k] for k in t.dedicated_of_type[j]]
            + [state.Qij[t.pair_index[(i, j)]] for i in t.servers_of_type[j]], default=0)
    if legs and any(x != legs[0] for x in legs):
        raise InvariantError(f"type {j}: legs disagree {legs}")
    if legs and n != legs[0]:
        raise InvariantError(f"type {j}: max buffer {n} != leg count {legs[0]}")
    return n


def apply_completion(state: SimulationState, server: tuple[str, int], cls: int) -> int:
    """Move one finished task to its join buffer and flush joins.

    ``server`` is ``("dedicated", k)`` or ``("shared", i)``; ``cls`` is the job
    type.  Returns the number of departures (0 or 1).
    """
    t = state.topology
    kind, idx = server
    if kind == "dedicated":
        if t.dedicated_type[idx] != cls:
            raise ValueError("dedicated server does not serve this type")
        state.Qk[idx] -= 1
        state.Qk1[idx] += 1
        state.Sk[idx] += 1
    else:
        p = t.pair_index[(idx, cls)]
        state.Qij[p] -= 1
        state.Qij1[p] += 1
        state.Sij[p] += 1
    ks = t.dedicated_of_type[cls]
    ps = [t.pair_index[(i, cls)] for i in t.servers_of_type[cls]]
    m = min([state.Qk1[k] for k in ks] + [state.Qij1[p] for p in ps])
    if m > 1:
        raise InvariantError(f"join flush of {m} jobs for type {cls}")
    if m == 1:
        for k in ks:
            state.Qk1[k] -= 1
        for p in ps:
            state.Qij1[p] -= 1
        state.departures[cls] += 1
        state.N[cls] -= 1
    return m


class CostAccumulator:
    """Exact discounted holding-cost integral for piecewise-constant job counts."""

    def __init__(self, holding_cost, discount: float):
        self.h = list(holding_cost)
        self.delta = discount
        self.integral = [0.0] * len(self.h)  # int e^{-delta t} N_j(t) dt
        self.t = 0.0
        self._disc = 1.0
        self.truncation = None

    def advance(self, t1: float, N) -> None:
        if t1 <= self.t:
            return
        d1 = math.exp(-self.delta * t1)
        w = (self._disc - d1) / self.delta
        if w:
            for j, n in enumerate(N):
                if n:
                    self.integral[j] += n * w
        self.t, self._disc = t1, d1

    def total(self) -> float:
        return sum(h * v for h, v in zip(self.h, self.integral))

    def tail_bound(self, N) -> float:
        """e^{-delta T} sum h_j N_j(T) / delta: truncation diagnostic."""
        return self._disc * sum(h * n for h, n in zip(self.h, N)) / self.delta


def discounted_cost(acc: CostAccumulator) -> tuple[float, float | None]:
    """Discounted cost and its truncation bound (None before the run ends)."""
    return acc.total(), acc.truncation


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    columns: list[str]
    values: np.ndarray
    busy_columns: list[str] = field(default_factory=list)
    busy: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["time"] + self.columns)
            for tm, row in zip(self.times, self.values):
                wr.writerow([repr(float(tm))] + [_fmt(v) for v in row])


def _fmt(v) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def trajectory_columns(t: NetworkTopology) -> list[str]:
    return ([f"Q_k{t.dedicated_label(k)}" for k in range(t.n_dedicated)]
            + [f"Q_{t.shared_label(i)}{t.type_label(j)}" for i, j in t.pairs]
            + [f"Q1_k{t.dedicated_label(k)}" for k in range(t.n_dedicated)]
            + [f"Q1_{t.shared_label(i)}{t.type_label(j)}" for i, j in t.pairs]
            + [f"W_{t.shared_label(i)}" for i in range(t.n_shared)]
            + [f"N_{t.type_label(j)}" for j in range(t.n_types)])


@dataclass
class RunResult:
    trajectory: TrajectoryRecord
    cost: CostAccumulator
    state: SimulationState
    events: int
    max_queue: int
    seed: int
    r: int
    policy: str

    @property
    def discounted_cost(self) -> float:
        return self.cost.total()

    @property
    def truncation_bound(self) -> float:
        return self.cost.truncation


class Policy:
    """Base scheduling policy for the shared servers.

    ``choose`` is called only when shared server ``i`` is free and at least one
    of its buffers is nonempty; it must return a type ``j`` in ``J_i`` with a
    nonempty buffer.  Service is non-preemptive and FIFO within buffers.
    """

    name = "policy"

    def reset(self, sim: "Simulation") -> None:
        self.sim = sim

    def choose(self, state: SimulationState, i: int) -> int:
        raise NotImplementedError

    def on_completion(self, state: SimulationState, i: int, j: int) -> None:
        pass

    def finish(self, state: SimulationState) -> None:
        pass


class Simulation:
    """One replication of the r-th system of a heavy-traffic sequence."""

    def __init__(self, seq: HeavyTrafficSequence, r: int, policy: Policy, horizon: float, seed: int,
                 sample_grid=None, initial: InitialState | None = None, discount: float | None = None,
                 check: bool = False, arrival_rates=None, observer=None):
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        self.seq = seq
        self.topology = t = seq.base
        self.r = r
        self.rates = tuple(arrival_rates) if arrival_rates is not None else seq.rates_at(r)
        self.policy = policy
        self.horizon = float(horizon)
        self.seed = int(seed)
        self.grid = np.asarray(sample_grid if sample_grid is not None else [], dtype=float)
        if np.any(np.diff(self.grid) < 0):
            raise ValueError("sample grid must be nondecreasing")
        self.check = check
        self.observer = observer  # called with the state at t=0 and after each distinct event epoch
        self.state = SimulationState(t, initial)
        self.cost = CostAccumulator(t.holding_cost, t.discount if discount is None else discount)
        self.arr_stream = [RandomStream(self.seed, ("arrival", j)) for j in range(t.n_types)]
        self.ded_stream = [RandomStream(self.seed, ("dedicated", k)) for k in range(t.n_dedicated)]
        self.shr_stream = [RandomStream(self.seed, ("shared", i, j)) for i, j in t.pairs]
        self.ded_spec = list(t.dedicated_service)
        self.shr_spec = [t.shared_dist(i, j) for i, j in t.pairs]
        self._heap: list = []
        self._seq = 0
        self.events = 0
        self.max_queue = max(self.state.Qk + self.state.Qij, default=0)
        self._vsum = [0.0] * len(t.pairs)

    def stream(self, *label) -> RandomStream:
        return RandomStream(self.seed, label)

    # -- event plumbing ------------------------------------------------------
    def _push(self, time, kind, idx):
        self._seq += 1
        heapq.heappush(self._heap, (time, _RANK[kind], self._seq, kind, idx))

    def _schedule_arrival(self, j, now):
        lam = self.rates[j]
        if lam <= 0:
            return
        u = self.arr_stream[j].next(self.topology.arrival_dist[j]) / lam
        self._push(now + u, _ARR, j)

    def _start_dedicated(self, k, now):
        st = self.state
        st.ded_busy[k] = True
        st.ded_start[k] = now
        v = self.ded_stream[k].next(self.ded_spec[k])
        self._push(now + v, _DED, k)

    def _start_shared(self, i, p, now):
        st = self.state
        st.shr_pair[i] = p
        st.shr_start[i] = now
        v = self.shr_stream[p].next(self.shr_spec[p])
        st.shr_dur[i] = v
        self._push(now + v, _SHR, i)

    def _dispatch(self, i, now):
        st = self.state
        if st.shr_pair[i] >= 0:
            return
        pairs = st.pairs_of_server[i]
        Q = st.Qij
        if not any(Q[p] for p in pairs):
            return
        j = self.policy.choose(st, i)
        p = self.topology.pair_index.get((i, j)) if j is not None else None
        if p is None or Q[p] <= 0:
            raise AdmissibilityError(f"policy {self.policy.name!r} chose type {j} at shared server {i} "
                                     f"with an empty buffer at t={now:.6g}")
        self._start_shared(i, p, now)

    # -- main loop -----------------------------------------------------------
    def run(self) -> RunResult:
        t = self.topology
        st = self.state
        self.policy.reset(self)
        for j in range(t.n_types):
            self._schedule_arrival(j, 0.0)
        for k in range(t.n_dedicated):
            if st.Qk[k] > 0:
                self._start_dedicated(k, 0.0)
        for i in range(t.n_shared):
            self._dispatch(i, 0.0)
        if self.check:
            self.check_invariants()

        cols = trajectory_columns(t)
        grid = self.grid[self.grid <= self.horizon]
        rows = np.empty((len(grid), len(cols)))
        busy = np.empty((len(grid), t.n_dedicated + len(t.pairs)))
        g = 0
        heap = self._heap
        cost = self.cost
        ded_type = t.dedicated_type
        ded_of_type = t.dedicated_of_type
        pair_type = st.pair_type
        shared_pairs_of_type = [[t.pair_index[(i, j)] for i in t.servers_of_type[j]] for j in range(t.n_types)]
        Qk, Qk1, Qij, Qij1 = st.Qk, st.Qk1, st.Qij, st.Qij1
        max_q = self.max_queue
        observer = self.observer
        if observer is not None and (not heap or heap[0][0] > 0.0):
            observer(st)

        while heap and heap[0][0] <= self.horizon:
            now = heap[0][0]
            while g < len(grid) and grid[g] < now:
                st.clock = grid[g]
                self._sample(rows, busy, g)
                g += 1
            cost.advance(now, st.N)
            st.clock = now
            _, _, _, kind, idx = heapq.heappop(heap)
            self.events += 1
            if kind == _ARR:
                j = idx
                st.A[j] += 1
                st.N[j] += 1
                for k in ded_of_type[j]:
                    Qk[k] += 1
                    if Qk[k] > max_q:
                        max_q = Qk[k]
                    if not st.ded_busy[k]:
                        self._start_dedicated(k, now)
                for p in shared_pairs_of_type[j]:
                    Qij[p] += 1
                    st.fifo[p].append(now)
                    if Qij[p] > max_q:
                        max_q = Qij[p]
                self._schedule_arrival(j, now)
                for p in shared_pairs_of_type[j]:
                    i = st.pair_server[p]
                    if st.shr_pair[i] < 0:
                        self._dispatch(i, now)
            elif kind == _DED:
                k = idx
                st.Tk[k] += now - st.ded_start[k]
                st.ded_busy[k] = False
                apply_completion(st, ("dedicated", k), ded_type[k])
                if Qk[k] > 0:
                    self._start_dedicated(k, now)
            else:
                i = idx
                p = st.shr_pair[i]
                j = pair_type[p]
                st.Tij[p] += now - st.shr_start[i]
                self._vsum[p] += st.shr_dur[i]
                st.shr_pair[i] = -1
                st.fifo[p].popleft()
                apply_completion(st, ("shared", i), j)
                self.policy.on_completion(st, i, j)
                self._dispatch(i, now)
            if self.check:
                self.check_invariants()
            if observer is not None and (not heap or heap[0][0] > now):
                observer(st)

        while g < len(grid):
            st.clock = grid[g]
            self._sample(rows, busy, g)
            g += 1
        cost.advance(self.horizon, st.N)
        st.clock = self.horizon
        cost.truncation = cost.tail_bound(st.N)
        self.max_queue = max_q
        self.policy.finish(st)
        busy_cols = [f"T_k{t.dedicated_label(k)}" for k in range(t.n_dedicated)] + \
                    [f"T_{t.shared_label(i)}{t.type_label(j)}" for i, j in t.pairs]
        rec = TrajectoryRecord(grid.copy(), cols, rows, busy_cols, busy)
        return RunResult(rec, cost, st, self.events, max_q, self.seed, self.r, self.policy.name)

    def _sample(self, rows, busy, g):
        st = self.state
        t = self.topology
        I = t.n_shared
        w = [workload(st, i) for i in range(I)]
        rows[g] = st.Qk + st.Qij + st.Qk1 + st.Qij1 + w + st.N
        busy[g] = [st.busy_ded(k) for k in range(t.n_dedicated)] + [st.busy_pair(p) for p in range(len(t.pairs))]
        if self.check:
            self._check_hl()

    # -- invariants ----------------------------------------------------------
    def check_invariants(self) -> None:
        """Assert every dynamics identity at the current epoch (zero tolerance on counts)."""
        st = self.state
        t = self.topology
        now = st.clock
        for k, j in enumerate(t.dedicated_type):
            if st.Qk[k] != st.Qk0[k] + st.A[j] - st.Sk[k]:
                raise InvariantError(f"dedicated {k}: queue balance broken at t={now}")
            if st.idle_ded(k) < -TIME_TOL:
                raise InvariantError(f"dedicated {k}: negative idle time")
            if st.Qk[k] > 0 and not st.ded_busy[k]:
                raise InvariantError(f"dedicated {k}: idle with work waiting at t={now}")
        for p, (i, j) in enumerate(t.pairs):
            if st.Qij[p] != st.Qij0[p] + st.A[j] - st.Sij[p]:
                raise InvariantError(f"pair {(i, j)}: queue balance broken at t={now}")
            if len(st.fifo[p]) != st.Qij[p]:
                raise InvariantError(f"pair {(i, j)}: FIFO length mismatch")
        for i in range(t.n_shared):
            if st.idle_shared(i) < -TIME_TOL:
                raise InvariantError(f"shared {i}: negative idle time")
            if st.shr_pair[i] < 0 and any(st.Qij[p] > 0 for p in st.pairs_of_server[i]):
                raise InvariantError(f"shared {i}: idle with work waiting at t={now}")
        for j in range(t.n_types):
            legs = st.legs(j)
            if legs and any(x != st.N[j] for x in legs):
                raise InvariantError(f"type {j}: leg counts {legs} != N={st.N[j]} at t={now}")
            post = [st.Qk1[k] for k in t.dedicated_of_type[j]] + \
                   [st.Qij1[t.pair_index[(i, j)]] for i in t.servers_of_type[j]]
            if post and min(post) != 0:
                raise InvariantError(f"type {j}: unflushed join at t={now}")
            if st.A[j] - st.departures[j] != st.N[j] - st.N0[j]:
                raise InvariantError(f"type {j}: flow conservation broken at t={now}")
            if min(st.Qk + st.Qk1 + st.Qij + st.Qij1, default=0) < 0:
                raise InvariantError("negative buffer")

    def _check_hl(self) -> None:
        st = self.state
        for p in range(len(self.topology.pairs)):
            i = st.pair_server[p]
            T = st.busy_pair(p)
            done = self._vsum[p]
            cur = st.shr_dur[i] if st.shr_pair[i] == p else 0.0
            if T < done - TIME_TOL or (cur and T >= done + cur + TIME_TOL) or (not cur and abs(T - done) > TIME_TOL):
                raise InvariantError(f"pair {p}: busy time {T} inconsistent with completed services {done}")


def run(seq: HeavyTrafficSequence, r: int, policy: Policy, horizon: float, seed: int,
        sample_grid=None, **kw) -> RunResult:
    return Simulation(seq, r, policy, horizon, seed, sample_grid, **kw).run()
