"""TOML scenario files.

Layout (labels N are free-form strings; types are referenced by label)::

    discount = 0.1                      # optional, default 0.1

    [types.1]
    arrival_rate = 0.5
    holding_cost = 2.0
    perturbation = -0.5                 # a_j in lambda_j + a_j / r
    arrival = { family = "exponential" }

    [shared.1]
    types = [1, 2]
    rates = [1.0, 1.0]
    service = { family = "exponential" }     # one table, or a list aligned with types

    [dedicated.1]
    type = 1
    rate = 0.5

    [sequence]
    r_values = [5, 20]

    [policy]
    name = "proposed"

    [experiment]
    replications = 200

Distribution tables take ``family`` plus optional ``mean`` or ``rate`` (which
must agree with the rate given for the server or type), ``scv`` and ``k``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .policies import POLICY_NAMES, ALIASES
from .primitives import DistributionSpec
from .topology import HeavyTrafficSequence, NetworkTopology, TopologyError

RATE_TOL = 1e-12

SIMULATE_DEFAULTS = {"r": None, "horizon": 1.0, "grid_points": 101}
POLICY_DEFAULTS = {"name": "proposed", "rate_free": False, "log_reviews": False}
EXPERIMENT_DEFAULTS = {
    "policies": ["proposed", "cmu_priority"],
    "replications": 100,
    "horizon": 1.0,
    "checkpoints": [0.25, 0.5, 1.0],
    "track_points": 41,
    "seed": 0,
    "srbm_paths": 10_000,
    "srbm_dt": 1e-3,
    "epsilons": [0.0, 0.5, 1.0, 2.0],
    "lower_bound": True,
}
LOWERBOUND_DEFAULTS = {"times": [0.25, 0.5, 1.0], "paths": 10_000, "dt": 1e-3,
                       "epsilons": [0.0, 0.5, 1.0, 2.0]}
SECTIONS = {"types", "shared", "dedicated", "sequence", "policy", "experiment", "simulate", "lowerbound"}
TOP_KEYS = {"discount", "name", "description"}


class ScenarioError(ValueError):
    pass


def _dist(table, where: str, rate: float | None) -> DistributionSpec:
    if table is None:
        table = {"family": "exponential"}
    if isinstance(table, str):
        table = {"family": table}
    if not isinstance(table, dict) or "family" not in table:
        raise ScenarioError(f"{where}: distribution needs a 'family' key")
    unknown = set(table) - {"family", "mean", "rate", "scv", "k", "params"}
    if unknown:
        raise ScenarioError(f"{where}: unknown distribution keys {sorted(unknown)}")
    params = dict(table.get("params", {}))
    mean = 1.0 if rate is None else 1.0 / rate
    given = table.get("mean")
    if "rate" in table:
        given = 1.0 / float(table["rate"])
    if given is not None and rate is not None and abs(float(given) - mean) > RATE_TOL * max(1.0, mean):
        raise ScenarioError(f"{where}: distribution mean {given} disagrees with rate {rate}")
    try:
        return DistributionSpec(str(table["family"]), mean, table.get("scv", params.get("scv")),
                                table.get("k", params.get("k")))
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _labelled(doc: dict, name: str) -> list[tuple[str, dict]]:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ScenarioError(f"[{name}] must be a table of tables like [{name}.1]")
    out = []
    for label, body in sec.items():
        if not isinstance(body, dict):
            raise ScenarioError(f"[{name}.{label}] must be a table")
        out.append((str(label), body))
    return out


def _require(body: dict, key: str, where: str):
    if key not in body:
        raise ScenarioError(f"{where}: missing required key '{key}'")
    return body[key]


def build_topology(doc: dict) -> tuple[NetworkTopology, tuple[float, ...]]:
    types = _labelled(doc, "types")
    if not types:
        raise ScenarioError("scenario defines no [types.N] sections")
    index = {lab: j for j, (lab, _) in enumerate(types)}

    def type_ref(v, where):
        key = str(v)
        if key not in index:
            raise ScenarioError(f"{where}: unknown job type {v!r}; known types are {list(index)}")
        return index[key]

    lam, h, a, arr = [], [], [], []
    for lab, body in types:
        where = f"[types.{lab}]"
        unknown = set(body) - {"arrival_rate", "holding_cost", "perturbation", "arrival"}
        if unknown:
            raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
        lam.append(float(_require(body, "arrival_rate", where)))
        h.append(float(_require(body, "holding_cost", where)))
        a.append(float(body.get("perturbation", 0.0)))
        arr.append(_dist(body.get("arrival"), where + " arrival", None))

    shared = []
    for lab, body in _labelled(doc, "shared"):
        where = f"[shared.{lab}]"
        unknown = set(body) - {"types", "rates", "service"}
        if unknown:
            raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
        tj = [type_ref(v, where) for v in _require(body, "types", where)]
        rates = [float(x) for x in _require(body, "rates", where)]
        if len(tj) != len(rates):
            raise ScenarioError(f"{where}: 'types' and 'rates' differ in length")
        svc = body.get("service")
        svc = svc if isinstance(svc, list) else [svc] * len(tj)
        if len(svc) != len(tj):
            raise ScenarioError(f"{where}: 'service' list must align with 'types'")
        rows = sorted(zip(tj, rates, svc), key=lambda x: x[0])
        shared.append((lab, tuple(j for j, _, _ in rows), tuple(mu for _, mu, _ in rows),
                       tuple(_dist(s, f"{where} service", mu) for _, mu, s in rows)))

    ded = []
    for lab, body in _labelled(doc, "dedicated"):
        where = f"[dedicated.{lab}]"
        unknown = set(body) - {"type", "rate", "service"}
        if unknown:
            raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
        mu = float(_require(body, "rate", where))
        ded.append((lab, type_ref(_require(body, "type", where), where), mu,
                    _dist(body.get("service"), f"{where} service", mu)))

    try:
        topo = NetworkTopology(
            arrival_rate=tuple(lam), holding_cost=tuple(h),
            shared_types=tuple(s[1] for s in shared), shared_rate=tuple(s[2] for s in shared),
            dedicated_type=tuple(d[1] for d in ded), dedicated_rate=tuple(d[2] for d in ded),
            discount=float(doc.get("discount", 0.1)),
            arrival_dist=tuple(arr), shared_service=tuple(s[3] for s in shared),
            dedicated_service=tuple(d[3] for d in ded),
            type_labels=tuple(lab for lab, _ in types), shared_labels=tuple(s[0] for s in shared),
            dedicated_labels=tuple(d[0] for d in ded))
    except TopologyError as exc:
        raise ScenarioError(str(exc)) from None
    return topo, tuple(a)


def _merged(doc: dict, name: str, defaults: dict) -> dict:
    sec = doc.get(name, {})
    unknown = set(sec) - set(defaults)
    if unknown:
        raise ScenarioError(f"[{name}]: unknown keys {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(sec)
    return out


@dataclass
class Scenario:
    path: str
    doc: dict
    topology: NetworkTopology
    perturbation: tuple[float, ...]
    r_values: tuple[int, ...]
    policy: dict
    experiment: dict
    simulate: dict
    lowerbound: dict
    overrides: list[str] = field(default_factory=list)

    def sequence(self, r_values=None) -> HeavyTrafficSequence:
        return HeavyTrafficSequence(self.topology, self.perturbation, tuple(r_values or self.r_values))

    def resolved(self) -> dict:
        """The full configuration with every default filled in."""
        t = self.topology
        return {
            "discount": t.discount,
            "types": {t.type_label(j): {"arrival_rate": t.arrival_rate[j], "holding_cost": t.holding_cost[j],
                                        "perturbation": self.perturbation[j],
                                        "arrival": _dist_dict(t.arrival_dist[j])}
                      for j in range(t.n_types)},
            "shared": {t.shared_label(i): {"types": [t.type_label(j) for j in t.shared_types[i]],
                                           "rates": list(t.shared_rate[i]),
                                           "service": [_dist_dict(d) for d in t.shared_service[i]]}
                       for i in range(t.n_shared)},
            "dedicated": {t.dedicated_label(k): {"type": t.type_label(t.dedicated_type[k]),
                                                 "rate": t.dedicated_rate[k],
                                                 "service": _dist_dict(t.dedicated_service[k])}
                          for k in range(t.n_dedicated)},
            "sequence": {"r_values": list(self.r_values)},
            "policy": dict(self.policy),
            "experiment": dict(self.experiment),
            "simulate": dict(self.simulate),
            "lowerbound": dict(self.lowerbound),
        }


def _dist_dict(d: DistributionSpec) -> dict:
    out = {"family": d.family, "mean": d.mean, "scv": d.scv}
    if d.k is not None:
        out["k"] = d.k
    return out


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as TOML literals."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ScenarioError(f"override {item!r} must look like section.key=value")
        key, text = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ScenarioError(f"override {item!r} has an empty key")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ScenarioError(f"override {item!r}: {p!r} is not a table")
            node = nxt
        node[parts[-1]] = _parse_value(text.strip())
    return doc


def parse_scenario(doc: dict, path: str = "<memory>", overrides=()) -> Scenario:
    doc = apply_overrides(doc, overrides)
    unknown = {k for k in doc if k not in SECTIONS | TOP_KEYS}
    if unknown:
        raise ScenarioError(f"unknown top-level keys or sections {sorted(unknown)}")
    topo, a = build_topology(doc)
    seq = doc.get("sequence", {})
    bad = set(seq) - {"r_values"}
    if bad:
        raise ScenarioError(f"[sequence]: unknown keys {sorted(bad)}")
    r_values = tuple(int(r) for r in seq.get("r_values", [1]))
    if not r_values or any(r < 1 for r in r_values):
        raise ScenarioError("[sequence]: r_values must be positive integers")
    policy = _merged(doc, "policy", POLICY_DEFAULTS)
    name = ALIASES.get(policy["name"], policy["name"])
    if name not in POLICY_NAMES:
        raise ScenarioError(f"[policy]: unknown policy {policy['name']!r}; expected one of {list(POLICY_NAMES)}")
    policy["name"] = name
    exp = _merged(doc, "experiment", EXPERIMENT_DEFAULTS)
    exp["policies"] = [ALIASES.get(p, p) for p in exp["policies"]]
    for p in exp["policies"]:
        if p not in POLICY_NAMES:
            raise ScenarioError(f"[experiment]: unknown policy {p!r}; expected one of {list(POLICY_NAMES)}")
    sim = _merged(doc, "simulate", SIMULATE_DEFAULTS)
    if sim["r"] is None:
        sim["r"] = r_values[0]
    lb = _merged(doc, "lowerbound", LOWERBOUND_DEFAULTS)
    return Scenario(str(path), doc, topo, a, r_values, policy, exp, sim, lb, list(overrides or ()))


def load_scenario(path, overrides=()) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        doc = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"malformed TOML in {path}: {exc}") from None
    return parse_scenario(doc, str(path), overrides)
