import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gen import random_strict_topology
from fjlab.primitives import DistributionSpec
from fjlab.topology import (HeavyTrafficSequence, NetworkTopology, TopologyError, diffusion_data,
                            figure2_network, validate)


# the Figure-2 structure in unit time: lambda = (0.5, 0.5), shared rates (1, 1)
UNIT = {"lam": (0.5, 0.5), "mu_shared": (1.0, 1.0)}


def test_figure2_is_strict_valid(fig2):
    assert validate(fig2, "strict") == []


def test_underloaded_server_reports_one_load_violation():
    t = figure2_network(lam=(0.4, 0.4), mu_shared=(1.0, 1.0), dedicated_rate=(0.5, 1.0))
    assert t.loads()[0] == pytest.approx(0.8)
    bad = validate(t, "strict")
    load_msgs = [m for m in bad if "load" in m]
    assert len(load_msgs) == 1 and "heavy traffic" in load_msgs[0]


def test_single_type_shared_server_lenient():
    t = NetworkTopology(arrival_rate=(0.5,), holding_cost=(1.0,), shared_types=((0,),), shared_rate=((1.0,),))
    assert validate(t, "lenient") == []
    assert any("fewer than two" in m for m in validate(t, "strict"))


def test_overloaded_dedicated_rejected_in_strict_mode():
    t = figure2_network(dedicated_rate=(0.4, 1.0), **UNIT)
    assert any("overload" in m for m in validate(t, "strict"))
    with pytest.raises(TopologyError):
        diffusion_data(HeavyTrafficSequence(t, (0.0, 0.0)))


def test_shape_errors():
    with pytest.raises(TopologyError):
        NetworkTopology(arrival_rate=(0.5, 0.5), holding_cost=(1.0,), shared_types=((0, 1),),
                        shared_rate=((1.0, 1.0),))
    with pytest.raises(TopologyError):
        NetworkTopology(arrival_rate=(0.5, 0.5), holding_cost=(1.0, 1.0), shared_types=((1, 0),),
                        shared_rate=((1.0, 1.0),))


def test_rates_at_examples(fig2):
    seq = HeavyTrafficSequence(fig2, (-0.2, -0.2))
    assert seq.rates_at(10) == pytest.approx((0.98, 0.98), abs=1e-15)
    assert HeavyTrafficSequence(fig2, (0.0, 0.0)).rates_at(7) == fig2.arrival_rate
    one = NetworkTopology(arrival_rate=(0.1,), holding_cost=(1.0,), shared_types=((0,),), shared_rate=((1.0,),))
    with pytest.raises(ValueError):
        HeavyTrafficSequence(one, (-2.0,)).rates_at(10)
    with pytest.raises(ValueError):
        HeavyTrafficSequence(one, (-2.0,), (10,))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 1000))
def test_sequence_identities(seed, r):
    rng = np.random.default_rng(seed)
    t = random_strict_topology(rng)
    a = tuple(float(x) for x in rng.uniform(-0.15, 0.5, t.n_types))
    seq = HeavyTrafficSequence(t, a)
    lam_r = seq.rates_at(r)
    for j in range(t.n_types):
        assert abs(abs(lam_r[j] - t.arrival_rate[j]) - abs(a[j]) / r) <= 1e-15
    for i, theta in enumerate(seq.shared_drift()):
        lhs = r * (sum(lam_r[j] / t.mu(i, j) for j in t.shared_types[i]) - 1.0)
        assert lhs == pytest.approx(theta, abs=1e-9 * r)


def test_figure2_diffusion_data_without_heavy_dedicated():
    t = figure2_network(dedicated_rate=(1.0, 1.0), **UNIT)
    seq = HeavyTrafficSequence(t, (-0.3, -0.1))
    d = diffusion_data(seq)
    assert d.dim == 1
    assert d.covariance[0, 0] == pytest.approx(sum(lam * 2 / mu ** 2 for lam, mu in zip(t.arrival_rate, (1.0, 1.0))))
    assert d.drift[0] == pytest.approx(-0.4)
    assert np.array_equal(d.reflection, np.eye(1))
    assert d.violations() == []


def test_heavy_dedicated_cross_covariance(fig2, fig2_seq):
    d = diffusion_data(fig2_seq)
    assert d.dedicated == (0,)
    # lambda = (1, 1), shared rates (2, 2), mu_k1 = 1, a = (-1, -1), exponential primitives
    # Sigma_ki = lambda_j beta_j^2 / mu_ij for the heavy dedicated server of type 1
    assert d.covariance[0, 1] == pytest.approx(1.0 * 1.0 / 2.0)
    assert d.covariance[0, 0] == pytest.approx(1.0 * (1.0 + 1.0))
    assert d.covariance[1, 1] == pytest.approx(2 * 1.0 * (1.0 + 1.0) / 4.0)
    assert np.allclose(np.diag(d.reflection), [1.0, 1.0])
    assert d.drift.tolist() == [-1.0, -1.0]


def test_deterministic_primitives_give_degenerate_covariance():
    det = DistributionSpec("deterministic")
    t = NetworkTopology(arrival_rate=(0.5, 0.5), holding_cost=(1, 1), shared_types=((0, 1),),
                        shared_rate=((1.0, 1.0),), arrival_dist=(det, det),
                        shared_service=((DistributionSpec("deterministic", 1.0),) * 2,))
    d = diffusion_data(HeavyTrafficSequence(t, (-0.1, -0.1)))
    assert not d.covariance.any()
    assert any("positive definite" in m for m in d.violations())


def brute_covariance(seq):
    """Entry-by-entry recomputation over all pairs of coordinates."""
    t = seq.base
    coords = [("k", k) for k in seq.heavy_dedicated] + [("i", i) for i in range(t.n_shared)]
    lam, b2 = t.arrival_rate, t.arrival_scv
    S = np.zeros((len(coords), len(coords)))
    for a, (ka, xa) in enumerate(coords):
        for c, (kc, xc) in enumerate(coords):
            if ka == "k" and kc == "k":
                j = t.dedicated_type[xa]
                v = lam[j] * (b2[j] + (t.dedicated_service[xa].scv if xa == xc else 0.0)) \
                    if t.dedicated_type[xc] == j else 0.0
            elif ka == "k" or kc == "k":
                k, i = (xa, xc) if ka == "k" else (xc, xa)
                j = t.dedicated_type[k]
                v = lam[j] * b2[j] / t.mu(i, j) if j in t.shared_types[i] else 0.0
            else:
                v = 0.0
                for j in range(t.n_types):
                    if j in t.shared_types[xa] and j in t.shared_types[xc]:
                        s = t.shared_dist(xa, j).scv if xa == xc else 0.0
                        v += lam[j] * (b2[j] + s) / (t.mu(xa, j) * t.mu(xc, j))
            S[a, c] = v
    return S


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000))
def test_covariance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = random_strict_topology(rng, general=True)
    assert validate(t) == []
    seq = HeavyTrafficSequence(t, tuple(float(-u * lam) for u, lam in zip(rng.uniform(0, 0.9, t.n_types), t.arrival_rate)))
    d = diffusion_data(seq)
    S = brute_covariance(seq)
    assert np.array_equal(d.covariance, d.covariance.T)
    assert np.max(np.abs(d.covariance - S)) <= 1e-12
    assert d.dim == t.n_shared + len(seq.heavy_dedicated)
