"""Fluid/diffusion scaling, the limiting reflected Brownian motion and the
Monte Carlo lower bound, plus the paired-seed experiment runner.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .optimizer import LpInstance, OptimizerError, value_z
from .policies import make_policy, shared_solver
from .primitives import derive_seed
from .sim import Simulation, TrajectoryRecord, trajectory_columns, workload
from .topology import DiffusionData, HeavyTrafficSequence, NetworkTopology, diffusion_data

SCALE_TOL = 1e-9


# ---------------------------------------------------------------------------
# reflection map

def reflect_1d(x) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Skorokhod map on a grid: Psi = running max of (-x)^+, Phi = x + Psi."""
    x = np.asarray(x, dtype=float)
    psi = np.maximum.accumulate(np.maximum(-x, 0.0), axis=0)
    return x + psi, psi


@dataclass
class SrbmPath:
    times: np.ndarray
    W: np.ndarray          # (n_times, dim) reflected values
    pushing: np.ndarray    # (n_times, dim) cumulative pushing Psi in state units
    free: np.ndarray       # (n_times, dim) unreflected Brownian motion X
    reflection: np.ndarray
    seed: int

    @property
    def idle(self) -> np.ndarray:
        """Pushing divided by the reflection diagonal (idle-time coordinates)."""
        return self.pushing / np.diag(self.reflection)

    def complementarity(self) -> float:
        """sum_t W(t) * dPsi(t); zero when pushing only happens at the boundary."""
        return float(np.sum(self.W[1:] * np.diff(self.pushing, axis=0)))


def _chol(S: np.ndarray) -> np.ndarray:
    if not np.any(S):
        return np.zeros_like(S)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"covariance is not positive definite: {exc}") from None


def simulate_srbm(data: DiffusionData, horizon: float, dt: float, seed: int) -> SrbmPath:
    """One Euler path on the grid 0, dt, ..., horizon, started at the origin.

    Because the reflection matrix is diagonal each coordinate is the 1-D
    reflection of its own free Brownian coordinate.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(round(horizon / dt))
    L = _chol(data.covariance)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, data.dim))
    inc = data.drift * dt + (z @ L.T) * math.sqrt(dt)
    X = np.vstack([np.zeros(data.dim), np.cumsum(inc, axis=0)])
    W, psi = reflect_1d(X)
    return SrbmPath(np.linspace(0.0, n * dt, n + 1), W, psi, X, data.reflection, seed)


def srbm_sample(data: DiffusionData, times, dt: float, n_paths: int, seed: int,
                noise_dt: float | None = None, bridge: bool = True, chunk: int = 5000) -> np.ndarray:
    """Reflected values at ``times`` for ``n_paths`` independent paths.

    Returns an array of shape (len(times), n_paths, dim).  With ``bridge`` the
    running minimum inside each step is sampled from the Brownian-bridge law
    given the step's endpoints, which removes the grid-monitoring bias of the
    plain Euler reflection.  Gaussian noise is generated on the ``noise_dt``
    grid (``dt`` must be a multiple of it) so that two step sizes can share
    the same driving path.  Paths are drawn ``chunk`` at a time, so results
    are reproducible for a fixed ``(seed, chunk)`` pair.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    noise_dt = dt if noise_dt is None else noise_dt
    sub = int(round(dt / noise_dt))
    if sub < 1 or abs(sub * noise_dt - dt) > 1e-12 * max(1.0, dt):
        raise ValueError("dt must be an integer multiple of noise_dt")
    steps_at = np.rint(times / dt).astype(int)
    n_steps = int(steps_at.max(initial=0))
    L = _chol(data.covariance)
    var = np.diag(data.covariance) * dt
    d = data.dim
    out = np.empty((len(times), n_paths, d))
    noise_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1,))))
    bridge_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2,))))
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        X = np.zeros((m, d))
        low = np.zeros((m, d))  # running minimum of X (includes X(0) = 0)
        for idx in np.flatnonzero(steps_at == 0):
            out[idx, start:start + m] = 0.0
        for step in range(1, n_steps + 1):
            z = noise_rng.standard_normal((sub, m, d)).sum(axis=0)
            x1 = X + data.drift * dt + (z @ L.T) * math.sqrt(noise_dt)
            if bridge:
                u = bridge_rng.random((m, d))
                gap = x1 - X
                bmin = 0.5 * (X + x1 - np.sqrt(gap * gap - 2.0 * var * np.log1p(-u)))
                np.minimum(low, bmin, out=low)
            np.minimum(low, x1, out=low)
            X = x1
            for idx in np.flatnonzero(steps_at == step):
                out[idx, start:start + m] = X - np.minimum(low, 0.0)
    return out


def lp_parameters(data: DiffusionData, topology: NetworkTopology, values: np.ndarray) -> np.ndarray:
    """Map SRBM coordinates to LP parameters b = (q_k for every k, w_i); light q_k = 0."""
    values = np.atleast_2d(values)
    b = np.zeros((len(values), topology.n_dedicated + topology.n_shared))
    nd = len(data.dedicated)
    for c, k in enumerate(data.dedicated):
        b[:, k] = values[:, c]
    b[:, topology.n_dedicated:] = values[:, nd:]
    return b


@dataclass
class LowerBound:
    t: float
    mean: float
    se: float
    n: int
    exceedance: dict[float, float]
    failures: int = 0
    values: np.ndarray | None = field(default=None, repr=False)


def z_values(topology: NetworkTopology, b: np.ndarray) -> tuple[np.ndarray, int]:
    K = topology.n_dedicated
    out = np.full(len(b), np.nan)
    failures = 0
    for n, row in enumerate(b):
        try:
            out[n] = value_z(LpInstance(topology, tuple(np.maximum(row[:K], 0.0)),
                                        tuple(np.maximum(row[K:], 0.0))))
        except OptimizerError:
            failures += 1
    return out, failures


def estimate_lower_bound(data: DiffusionData, topology: NetworkTopology, t, n_paths: int = 10_000,
                         epsilons=(0.0,), dt: float = 1e-3, seed: int = 0, noise_dt: float | None = None,
                         bridge: bool = True) -> LowerBound | list[LowerBound]:
    """Monte Carlo estimate of E[z(SRBM(t))] and the exceedance curve P(z > eps)."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    W = srbm_sample(data, ts, dt, n_paths, seed, noise_dt=noise_dt, bridge=bridge)
    out = []
    for tt, vals in zip(ts, W):
        z, fails = z_values(topology, lp_parameters(data, topology, vals))
        good = z[~np.isnan(z)]
        n = len(good)
        se = float(good.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        exc = {float(e): float(np.mean(good > e)) for e in epsilons}
        out.append(LowerBound(float(tt), float(good.mean()), se, n, exc, fails, good))
    return out[0] if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# scaled paths

@dataclass
class ScaledPath:
    r: int
    scaling: str
    times: np.ndarray
    columns: list[str]
    values: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def scale_path(record: TrajectoryRecord, r: int, scaling: str, topology: NetworkTopology | None = None,
               times=None) -> ScaledPath:
    """Fluid (x / r^2) or diffusion (x / r) scaling with time compressed by r^2.

    ``record`` must be sampled at raw times r^2 * ``times`` (default: every
    raw grid point).  With ``topology`` the scaled workload columns are
    checked against sum_j Q_ij / mu_ij.
    """
    if scaling not in ("fluid", "diffusion"):
        raise ValueError("scaling must be 'fluid' or 'diffusion'")
    r2 = float(r * r)
    raw_t = record.times if times is None else r2 * np.asarray(times, dtype=float)
    if len(raw_t) and (len(record.times) == 0 or raw_t.max() > record.times.max() + SCALE_TOL * r2):
        raise ValueError("raw horizon is shorter than r^2 times the scaled grid")
    idx = np.searchsorted(record.times, raw_t - SCALE_TOL * max(1.0, r2))
    if np.any(np.abs(record.times[idx] - raw_t) > SCALE_TOL * max(1.0, r2)):
        raise ValueError("scaled grid does not coincide with the raw sampling grid")
    factor = r2 if scaling == "fluid" else float(r)
    vals = record.values[idx] / factor
    if topology is not None:
        for i in range(topology.n_shared):
            w = sum(vals[:, record.columns.index(f"Q_{topology.shared_label(i)}{topology.type_label(j)}")]
                    / topology.mu(i, j) for j in topology.shared_types[i])
            if np.any(np.abs(w - vals[:, record.columns.index(f"W_{topology.shared_label(i)}")]) > 1e-9):
                raise AssertionError("scaled workload disagrees with the scaled queues")
    return ScaledPath(r, scaling, raw_t / r2, list(record.columns), vals)


# ---------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentPlan:
    seq: HeavyTrafficSequence
    r_values: tuple[int, ...] = (5, 20)
    policies: tuple[str, ...] = ("proposed", "cmu_priority")
    replications: int = 100
    horizon: float = 1.0                       # scaled time
    checkpoints: tuple[float, ...] = (0.25, 0.5, 1.0)
    track_points: int = 41                     # scaled sampling grid points
    seed: int = 0
    srbm_paths: int = 10_000
    srbm_dt: float = 1e-3
    epsilons: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    jobs: int = 1
    lower_bound: bool = True
    policy_options: dict = field(default_factory=dict)

    def grid(self) -> np.ndarray:
        g = np.linspace(0.0, self.horizon, self.track_points)
        return np.unique(np.concatenate([g, [c for c in self.checkpoints if c <= self.horizon]]))


@dataclass
class Replication:
    seed: int
    cost: float                 # discounted diffusion-scaled holding cost over [0, horizon]
    truncation: float
    max_queue: int
    cost_at: np.ndarray         # sum_j h_j N_hat_j(t) at checkpoints
    W_at: np.ndarray            # (checkpoints, I) scaled workloads
    tracking: np.ndarray        # per pair: sup_t |Q_ij - q*_ij| / r over every event epoch
    busy_fraction: np.ndarray   # per pair: T_bar_ij(T) / T
    fluid_queue: np.ndarray     # per buffer column at T: fluid-scaled content
    events: int


def _replicate(args) -> Replication:
    plan, r, policy_name, rep = args
    seq = plan.seq
    t = seq.base
    seed = derive_seed(plan.seed, rep)
    grid = plan.grid()
    r2 = r * r
    opts = plan.policy_options.get(policy_name, {})
    policy = make_policy(policy_name, **opts)
    # tracking: the state is piecewise constant, so the sup over t is a max over event epochs
    solver = shared_solver(t)
    P = len(t.pairs)
    track = [0.0] * P

    def observe(st):
        w = tuple(workload(st, i) for i in range(t.n_shared))
        q = solver.solve(tuple(st.Qk), w).q
        Q = st.Qij
        for p in range(P):
            d = abs(Q[p] - q[p])
            if d > track[p]:
                track[p] = d

    sim = Simulation(seq, r, policy, r2 * plan.horizon, seed, r2 * grid, discount=t.discount / r2,
                     observer=observe)
    res = sim.run()
    rec = res.trajectory
    diff = scale_path(rec, r, "diffusion")
    ck = [int(np.argmin(np.abs(grid - c))) for c in plan.checkpoints if c <= plan.horizon]
    h = np.asarray(t.holding_cost)
    Ncols = [rec.columns.index(f"N_{t.type_label(j)}") for j in range(t.n_types)]
    Wcols = [rec.columns.index(f"W_{t.shared_label(i)}") for i in range(t.n_shared)]
    cost_at = diff.values[ck][:, Ncols] @ h
    W_at = diff.values[ck][:, Wcols]
    track = np.asarray(track) / r
    busy_cols = [rec.busy_columns.index(f"T_{t.shared_label(i)}{t.type_label(j)}") for i, j in t.pairs]
    busy_fraction = rec.busy[-1, busy_cols] / (r2 * plan.horizon)
    fluid_queue = rec.values[-1, :len(rec.columns) - t.n_shared - t.n_types] / r2
    return Replication(seed, res.discounted_cost / r**3, res.truncation_bound / r**3, res.max_queue,
                       cost_at, W_at, track, busy_fraction, fluid_queue, res.events)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    reps: dict[tuple[int, str], list[Replication]]
    lower_bounds: list[LowerBound] | None

    def array(self, r: int, policy: str, attr: str) -> np.ndarray:
        return np.array([getattr(x, attr) for x in self.reps[(r, policy)]])

    def lower_bound_at(self, t: float) -> LowerBound | None:
        if not self.lower_bounds:
            return None
        return min(self.lower_bounds, key=lambda lb: abs(lb.t - t))

    def _buffer_columns(self) -> list[str]:
        t = self.plan.seq.base
        return trajectory_columns(t)[:-(t.n_shared + t.n_types)]

    def summary_rows(self) -> list[dict]:
        p = self.plan
        t = p.seq.base
        cks = [c for c in p.checkpoints if c <= p.horizon]
        rows = []

        def row(r, pol, metric, tt, vals, lb=None, fluid=""):
            vals = np.asarray(vals, dtype=float)
            n = len(vals)
            se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            rows.append({"r": r, "policy": pol, "metric": metric, "t": tt, "mean": float(vals.mean()),
                         "se": se, "n": n,
                         "lower_bound": "" if lb is None else lb.mean,
                         "lower_bound_se": "" if lb is None else lb.se, "fluid_limit": fluid})

        for (r, pol), reps in self.reps.items():
            row(r, pol, "discounted_cost", p.horizon, [x.cost for x in reps])
            row(r, pol, "truncation_bound", p.horizon, [x.truncation for x in reps])
            row(r, pol, "max_queue", p.horizon, [x.max_queue for x in reps])
            for c, tt in enumerate(cks):
                row(r, pol, "holding_cost_hat", tt, [x.cost_at[c] for x in reps], self.lower_bound_at(tt))
                for i in range(t.n_shared):
                    row(r, pol, f"W_hat_{t.shared_label(i)}", tt, [x.W_at[c, i] for x in reps])
            for n, (i, j) in enumerate(t.pairs):
                lab = f"{t.shared_label(i)}{t.type_label(j)}"
                row(r, pol, f"tracking_{lab}", p.horizon, [x.tracking[n] for x in reps])
                row(r, pol, f"busy_fraction_{lab}", p.horizon, [x.busy_fraction[n] for x in reps],
                    fluid=t.arrival_rate[j] / t.mu(i, j))
            cols = self._buffer_columns()
            for n, name in enumerate(cols):
                row(r, pol, f"fluid_{name}", p.horizon, [x.fluid_queue[n] for x in reps], fluid=0.0)
        return rows

    def write_summary(self, path) -> None:
        rows = self.summary_rows()
        cols = ["r", "policy", "metric", "t", "mean", "se", "n", "lower_bound", "lower_bound_se", "fluid_limit"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            for rw in rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rw.items()})

    def write_replications(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["seed", "policy", "r", "discounted_cost", "truncation_bound", "max_queue"])
            for (r, pol), reps in self.reps.items():
                for x in reps:
                    wr.writerow([x.seed, pol, r, repr(float(x.cost)), repr(float(x.truncation)), x.max_queue])


def run_experiment(plan: ExperimentPlan, progress=None) -> ExperimentResult:
    """Paired-seed replications for every (r, policy), plus the SRBM lower bound."""
    tasks = [(plan, r, pol, rep) for r in plan.r_values for pol in plan.policies for rep in range(plan.replications)]
    if plan.jobs > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * plan.jobs))))
    else:
        results = []
        for n, task in enumerate(tasks):
            results.append(_replicate(task))
            if progress:
                progress(n + 1, len(tasks))
    reps: dict[tuple[int, str], list[Replication]] = {}
    for (_, r, pol, _), res in zip(tasks, results):
        reps.setdefault((r, pol), []).append(res)
    lbs = None
    if plan.lower_bound:
        data = diffusion_data(plan.seq)
        cks = [c for c in plan.checkpoints if c <= plan.horizon]
        lbs = estimate_lower_bound(data, plan.seq.base, cks, plan.srbm_paths, plan.epsilons,
                                   plan.srbm_dt, derive_seed(plan.seed, "srbm"))
    return ExperimentResult(plan, reps, lbs)
