"""Random instance generators shared by the test modules."""
import numpy as np

from fjlab.primitives import DistributionSpec
from fjlab.topology import NetworkTopology


def random_dist(rng, mean=1.0):
    fam = rng.choice(["exponential", "erlang", "uniform", "deterministic", "hyperexponential"])
    if fam == "erlang":
        return DistributionSpec("erlang", mean, k=int(rng.integers(1, 5)))
    if fam == "uniform":
        return DistributionSpec("uniform", mean, scv=float(rng.uniform(0.05, 1 / 3)))
    if fam == "hyperexponential":
        return DistributionSpec("hyperexponential", mean, scv=float(rng.uniform(1.2, 4.0)))
    return DistributionSpec(str(fam), mean)


def random_strict_topology(rng, max_types=4, max_shared=2, max_dedicated=3, general=False):
    """A topology that passes strict validation: every shared load is exactly 1."""
    J = int(rng.integers(2, max_types + 1))
    I = int(rng.integers(1, max_shared + 1))
    lam = rng.uniform(0.2, 1.0, J)
    shared = []
    for i in range(I):
        size = int(rng.integers(2, J + 1))
        shared.append(sorted(rng.choice(J, size, replace=False).tolist()))
    covered = set().union(*map(set, shared))
    for j in range(J):
        if j not in covered:
            shared[int(rng.integers(I))].append(j)
            shared = [sorted(s) for s in shared]
    rates = []
    for types in shared:
        s = rng.dirichlet(np.ones(len(types)) * 2.0)
        s = np.clip(s, 0.05, None)
        s = s / s.sum()
        mus = [float(lam[j] / sj) for j, sj in zip(types, s)]
        # exact unit load after floating point
        load = sum(lam[j] / mu for j, mu in zip(types, mus))
        mus = [mu * load for mu in mus]
        rates.append(tuple(mus))
    ded_type, ded_rate = [], []
    n_ded = int(rng.integers(0, max_dedicated + 1))
    for j in rng.choice(J, min(n_ded, J), replace=False):
        ded_type.append(int(j))
        ded_rate.append(float(lam[j]) if rng.random() < 0.5 else float(lam[j] * rng.uniform(1.2, 3.0)))
    order = np.argsort(ded_type, kind="stable")
    ded_type = [ded_type[n] for n in order]
    ded_rate = [ded_rate[n] for n in order]
    kw = {}
    if general:
        kw["arrival_dist"] = tuple(random_dist(rng) for _ in range(J))
        kw["shared_service"] = tuple(tuple(random_dist(rng, 1 / mu) for mu in r) for r in rates)
        kw["dedicated_service"] = tuple(random_dist(rng, 1 / mu) for mu in ded_rate)
    h = rng.uniform(0.0, 3.0, J)
    h[int(rng.integers(J))] += 0.5
    return NetworkTopology(arrival_rate=tuple(float(x) for x in lam), holding_cost=tuple(float(x) for x in h),
                           shared_types=tuple(tuple(s) for s in shared), shared_rate=tuple(rates),
                           dedicated_type=tuple(ded_type), dedicated_rate=tuple(ded_rate),
                           discount=0.1, **kw)


def random_lp_instance(rng, max_pairs=6):
    """A small LP instance: I <= 2, at most ``max_pairs`` shared classes, at most 3 dedicated servers."""
    from fjlab.optimizer import LpInstance
    while True:
        t = random_strict_topology(rng, max_types=4, max_shared=2, max_dedicated=3)
        if len(t.pairs) <= max_pairs:
            break
    def val():
        u = rng.random()
        if u < 0.15:
            return 0.0
        if u < 0.3:
            return float(rng.integers(0, 6))
        return float(rng.uniform(0, 10))
    return LpInstance(t, tuple(val() for _ in range(t.n_dedicated)), tuple(val() for _ in range(t.n_shared)))
