"""Static fork-join network instances and their heavy-traffic sequences.

Indices are 0-based throughout the code: job types ``j``, shared servers ``i``
and dedicated servers ``k``.  Human labels (from scenario files) are kept only
for reporting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .primitives import DistributionSpec

LOAD_TOL = 1e-9
PD_TOL = 1e-10


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkTopology:
    """A fork-join network with shared and dedicated servers.

    ``shared_types[i]`` lists the job types served by shared server ``i``
    (ascending) and ``shared_rate[i]`` / ``shared_service[i]`` are aligned with
    it.  ``dedicated_type[k]`` is the single type served by dedicated server
    ``k``.  Arrival distributions are unit-mean shapes, rescaled by the arrival
    rate of whichever system in the sequence is being simulated.
    """

    arrival_rate: tuple[float, ...]
    holding_cost: tuple[float, ...]
    shared_types: tuple[tuple[int, ...], ...]
    shared_rate: tuple[tuple[float, ...], ...]
    dedicated_type: tuple[int, ...] = ()
    dedicated_rate: tuple[float, ...] = ()
    discount: float = 0.1
    arrival_dist: tuple[DistributionSpec, ...] | None = None
    shared_service: tuple[tuple[DistributionSpec, ...], ...] | None = None
    dedicated_service: tuple[DistributionSpec, ...] | None = None
    type_labels: tuple[str, ...] | None = None
    shared_labels: tuple[str, ...] | None = None
    dedicated_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        J = len(self.arrival_rate)
        if len(self.holding_cost) != J:
            raise TopologyError("holding_cost length must equal the number of job types")
        if len(self.shared_rate) != len(self.shared_types):
            raise TopologyError("shared_rate must align with shared_types")
        for i, (types, rates) in enumerate(zip(self.shared_types, self.shared_rate)):
            if len(types) != len(rates):
                raise TopologyError(f"shared server {i}: types and rates differ in length")
            if list(types) != sorted(set(types)):
                raise TopologyError(f"shared server {i}: types must be distinct and ascending")
            if any(not 0 <= j < J for j in types):
                raise TopologyError(f"shared server {i}: type index out of range")
        if len(self.dedicated_rate) != len(self.dedicated_type):
            raise TopologyError("dedicated_rate must align with dedicated_type")
        if any(not 0 <= j < J for j in self.dedicated_type):
            raise TopologyError("dedicated server type index out of range")
        # exponential defaults where no distribution was given
        if self.arrival_dist is None:
            object.__setattr__(self, "arrival_dist", tuple(DistributionSpec("exponential") for _ in range(J)))
        if self.shared_service is None:
            object.__setattr__(self, "shared_service", tuple(
                tuple(DistributionSpec("exponential", 1.0 / mu) for mu in rates) for rates in self.shared_rate))
        if self.dedicated_service is None:
            object.__setattr__(self, "dedicated_service", tuple(
                DistributionSpec("exponential", 1.0 / mu) for mu in self.dedicated_rate))
        if len(self.arrival_dist) != J:
            raise TopologyError("arrival_dist length must equal the number of job types")

    # -- sizes -------------------------------------------------------------
    @property
    def n_types(self) -> int:
        return len(self.arrival_rate)

    @property
    def n_shared(self) -> int:
        return len(self.shared_types)

    @property
    def n_dedicated(self) -> int:
        return len(self.dedicated_type)

    # -- derived index structures ------------------------------------------
    @cached_property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """All (i, j) with P_ij = 1, server-major."""
        return tuple((i, j) for i, types in enumerate(self.shared_types) for j in types)

    @cached_property
    def pair_index(self) -> dict[tuple[int, int], int]:
        return {p: n for n, p in enumerate(self.pairs)}

    @cached_property
    def servers_of_type(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(i for i, types in enumerate(self.shared_types) if j in types)
                     for j in range(self.n_types))

    @cached_property
    def dedicated_of_type(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(k for k, jj in enumerate(self.dedicated_type) if jj == j)
                     for j in range(self.n_types))

    @cached_property
    def pair_rate(self) -> np.ndarray:
        return np.array([self.mu(i, j) for i, j in self.pairs], dtype=float)

    @cached_property
    def incidence(self) -> np.ndarray:
        P = np.zeros((self.n_shared, self.n_types), dtype=int)
        for i, j in self.pairs:
            P[i, j] = 1
        return P

    def mu(self, i: int, j: int) -> float:
        return self.shared_rate[i][self.shared_types[i].index(j)]

    def shared_dist(self, i: int, j: int) -> DistributionSpec:
        return self.shared_service[i][self.shared_types[i].index(j)]

    @property
    def arrival_scv(self) -> tuple[float, ...]:
        return tuple(d.scv for d in self.arrival_dist)

    @property
    def dedicated_scv(self) -> tuple[float, ...]:
        return tuple(d.scv for d in self.dedicated_service)

    def shared_scv(self, i: int, j: int) -> float:
        return self.shared_dist(i, j).scv

    def loads(self) -> np.ndarray:
        """Traffic intensity sum_j lambda_j / mu_ij of every shared server."""
        return np.array([sum(self.arrival_rate[j] / mu for j, mu in zip(types, rates))
                         for types, rates in zip(self.shared_types, self.shared_rate)])

    # -- labels --------------------------------------------------------------
    def type_label(self, j: int) -> str:
        return self.type_labels[j] if self.type_labels else str(j + 1)

    def shared_label(self, i: int) -> str:
        return self.shared_labels[i] if self.shared_labels else str(i + 1)

    def dedicated_label(self, k: int) -> str:
        return self.dedicated_labels[k] if self.dedicated_labels else str(k + 1)


def validate(topology: NetworkTopology, mode: str = "strict") -> list[str]:
    """Return a list of human-readable violations; empty means valid.

    ``lenient`` checks positivity and shape only, so unit tests can use
    degenerate networks (single-type shared servers, zero arrival rates).
    """
    if mode not in ("strict", "lenient"):
        raise ValueError("mode must be 'strict' or 'lenient'")
    strict = mode == "strict"
    out = []
    t = topology
    for j, lam in enumerate(t.arrival_rate):
        if lam < 0 or (strict and lam <= 0):
            out.append(f"positivity: arrival rate of type {t.type_label(j)} is {lam:g}")
    for i, rates in enumerate(t.shared_rate):
        for j, mu in zip(t.shared_types[i], rates):
            if mu <= 0:
                out.append(f"positivity: shared rate mu[{t.shared_label(i)},{t.type_label(j)}] is {mu:g}")
    for k, mu in enumerate(t.dedicated_rate):
        if mu <= 0:
            out.append(f"positivity: dedicated rate of server {t.dedicated_label(k)} is {mu:g}")
    if any(h < 0 for h in t.holding_cost) or max(t.holding_cost, default=0) <= 0:
        out.append("holding cost: all h_j must be >= 0 with at least one > 0")
    if not t.discount > 0:
        out.append(f"discount: must be > 0, got {t.discount:g}")
    if not strict:
        return out

    for j in range(t.n_types):
        if not t.servers_of_type[j]:
            out.append(f"structure: type {t.type_label(j)} is not processed by any shared server")
    for i in range(t.n_shared):
        if len(t.shared_types[i]) < 2:
            out.append(f"structure: shared server {t.shared_label(i)} serves fewer than two job types")
    for i, load in enumerate(t.loads()):
        if abs(load - 1.0) > LOAD_TOL:
            out.append(f"heavy traffic: shared server {t.shared_label(i)} has limiting load {load:.12g} != 1")
    for i, j in t.pairs:
        if not t.mu(i, j) > t.arrival_rate[j]:
            out.append(f"heavy traffic: mu[{t.shared_label(i)},{t.type_label(j)}] must exceed lambda_j")
    for k, j in enumerate(t.dedicated_type):
        if t.arrival_rate[j] > t.dedicated_rate[k] + LOAD_TOL:
            out.append(f"overload: dedicated server {t.dedicated_label(k)} has lambda > mu")
    return out


@dataclass(frozen=True)
class HeavyTrafficSequence:
    """Systems indexed by r with arrival rates lambda_j + a_j / r."""

    base: NetworkTopology
    perturbation: tuple[float, ...] = ()
    r_values: tuple[int, ...] = (1,)

    def __post_init__(self):
        if not self.perturbation:
            object.__setattr__(self, "perturbation", (0.0,) * self.base.n_types)
        if len(self.perturbation) != self.base.n_types:
            raise TopologyError("perturbation length must equal the number of job types")
        for r in self.r_values:
            self.rates_at(r)

    def rates_at(self, r: int) -> tuple[float, ...]:
        if r <= 0:
            raise ValueError(f"system index r must be positive, got {r}")
        rates = tuple(lam + a / r for lam, a in zip(self.base.arrival_rate, self.perturbation))
        for j, (lam, rate) in enumerate(zip(self.base.arrival_rate, rates)):
            # zero-rate types are only legal when the limiting rate is zero too
            if rate < 0 or (rate == 0 and lam > 0):
                raise ValueError(f"r={r}: arrival rate of type {self.base.type_label(j)} would be {rate:g}")
        return rates

    def shared_drift(self) -> np.ndarray:
        """theta_i = sum_{j in J_i} a_j / mu_ij."""
        t = self.base
        return np.array([sum(self.perturbation[j] / mu for j, mu in zip(types, rates))
                         for types, rates in zip(t.shared_types, t.shared_rate)])

    def dedicated_traffic(self) -> tuple[str, ...]:
        """'heavy', 'light' or 'overloaded' for every dedicated server."""
        t = self.base
        out = []
        for k, j in enumerate(t.dedicated_type):
            lam, mu = t.arrival_rate[j], t.dedicated_rate[k]
            if abs(lam - mu) <= LOAD_TOL:
                out.append("heavy")
            elif lam < mu:
                out.append("light")
            else:
                out.append("overloaded")
        return tuple(out)

    def dedicated_drift(self) -> np.ndarray:
        """theta_k = a_j for heavy dedicated servers, -inf for light ones."""
        t = self.base
        return np.array([self.perturbation[j] if kind == "heavy" else (-np.inf if kind == "light" else np.inf)
                         for j, kind in zip(t.dedicated_type, self.dedicated_traffic())])

    @property
    def heavy_dedicated(self) -> tuple[int, ...]:
        """Heavy-traffic dedicated servers, grouped by type ascending."""
        kinds = self.dedicated_traffic()
        return tuple(k for j in range(self.base.n_types) for k in self.base.dedicated_of_type[j]
                     if kinds[k] == "heavy")


@dataclass(frozen=True)
class DiffusionData:
    """Drift, covariance and (diagonal) reflection matrix of the limiting SRBM.

    Coordinates are the heavy dedicated servers (by type, ascending) followed
    by the shared servers.  ``dedicated`` maps the leading coordinates back to
    dedicated-server indices.
    """

    drift: np.ndarray
    covariance: np.ndarray
    reflection: np.ndarray
    dedicated: tuple[int, ...] = ()
    n_dedicated_total: int = 0
    labels: tuple[str, ...] = field(default=())

    @property
    def dim(self) -> int:
        return len(self.drift)

    @property
    def n_shared(self) -> int:
        return self.dim - len(self.dedicated)

    def violations(self) -> list[str]:
        out = []
        S = self.covariance
        if not np.allclose(S, S.T, atol=0, rtol=0):
            out.append("covariance is not symmetric")
        eig = np.linalg.eigvalsh((S + S.T) / 2) if S.size else np.array([])
        if eig.size and eig.min() <= PD_TOL:
            out.append(f"covariance is not positive definite (min eigenvalue {eig.min():.3g})")
        R = self.reflection
        if np.count_nonzero(R - np.diag(np.diag(R))) or np.any(np.diag(R) <= 0):
            out.append("reflection matrix must be diagonal with positive entries")
        return out


def diffusion_data(seq: HeavyTrafficSequence) -> DiffusionData:
    t = seq.base
    kinds = seq.dedicated_traffic()
    if "overloaded" in kinds:
        k = kinds.index("overloaded")
        raise TopologyError(f"dedicated server {t.dedicated_label(k)} is overloaded (lambda > mu)")
    heavy = seq.heavy_dedicated
    nd, I = len(heavy), t.n_shared
    dim = nd + I
    lam = t.arrival_rate
    beta2 = t.arrival_scv
    sig_k = t.dedicated_scv
    S = np.zeros((dim, dim))
    for a, k in enumerate(heavy):
        j = t.dedicated_type[k]
        for b, l in enumerate(heavy):
            if t.dedicated_type[l] == j:
                S[a, b] = lam[j] * (beta2[j] + (sig_k[k] if k == l else 0.0))
        for i in t.servers_of_type[j]:
            S[a, nd + i] = S[nd + i, a] = lam[j] * beta2[j] / t.mu(i, j)
    for i in range(I):
        for n in range(I):
            common = set(t.shared_types[i]) & set(t.shared_types[n])
            S[nd + i, nd + n] = sum(
                lam[j] * (beta2[j] + (t.shared_scv(i, j) if i == n else 0.0)) / (t.mu(i, j) * t.mu(n, j))
                for j in sorted(common))
    theta = np.concatenate([[seq.perturbation[t.dedicated_type[k]] for k in heavy], seq.shared_drift()])
    R = np.diag(np.concatenate([[t.dedicated_rate[k] for k in heavy], np.ones(I)]))
    labels = tuple(f"Q_k{t.dedicated_label(k)}" for k in heavy) + tuple(f"W_{t.shared_label(i)}" for i in range(I))
    return DiffusionData(theta.astype(float), S, R, heavy, t.n_dedicated, labels)


def figure2_network(lam=(1.0, 1.0), mu_shared=(2.0, 2.0), dedicated_rate=(1.0, 2.0),
                    holding_cost=(2.0, 1.0), discount=0.1) -> NetworkTopology:
    """Two job types, one shared server, one dedicated server per type.

    The defaults put the shared server and type 1's dedicated server in heavy
    traffic and leave type 2's dedicated server in light traffic.
    """
    return NetworkTopology(
        arrival_rate=tuple(lam),
        holding_cost=tuple(holding_cost),
        shared_types=((0, 1),),
        shared_rate=(tuple(mu_shared),),
        dedicated_type=(0, 1),
        dedicated_rate=tuple(dedicated_rate),
        discount=discount,
    )
