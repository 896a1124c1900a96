"""Command-line front end: ``fjlab {validate,simulate,experiment,lowerbound} scenario.toml``.

Exit codes: 0 success, 1 invalid input (flags, scenario, topology), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .policies import ProposedPolicy, make_policy, POLICY_NAMES, ALIASES
from .primitives import derive_seed
from .scaling import ExperimentPlan, estimate_lower_bound, run_experiment
from .scenario import ScenarioError, load_scenario
from .sim import Simulation
from .topology import TopologyError, diffusion_data, validate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fjlab", description="Fork-join network simulation lab.")
    p.add_argument("--version", action="version", version=f"fjlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in [("validate", "check a scenario in strict heavy-traffic mode"),
                           ("simulate", "run one replication and write its trajectory"),
                           ("experiment", "run the paired-seed scaling experiment"),
                           ("lowerbound", "estimate the SRBM lower bound")]:
        s = sub.add_parser(name, help=helptext)
        s.add_argument("scenario", help="path to a TOML scenario")
        s.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted scenario key, e.g. experiment.replications=20 (repeatable)")
        if name == "validate":
            continue
        s.add_argument("--seed", type=int, default=None, help="root seed (fallback: $FJLAB_SEED)")
        s.add_argument("--out", default=None, help="output directory (default: ./out/<command>)")
        if name in ("simulate", "experiment"):
            s.add_argument("--r", type=int, nargs="+", default=None, help="scaling index (experiment: one or more)")
            s.add_argument("--policy", nargs="+", default=None,
                           help=f"policy name(s): {', '.join(POLICY_NAMES)}")
            s.add_argument("--horizon", type=float, default=None, help="horizon in scaled time units")
        if name == "experiment":
            s.add_argument("--jobs", type=int, default=1, help="worker processes for replications")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_seed(flag, scenario_seed) -> tuple[int, str]:
    if flag is not None:
        return int(flag), "flag"
    env = os.environ.get("FJLAB_SEED")
    if env not in (None, ""):
        try:
            return int(env), "env"
        except ValueError:
            raise InputError(f"FJLAB_SEED must be an integer, got {env!r}") from None
    return int(scenario_seed), "scenario"


def _policy_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in POLICY_NAMES:
        raise InputError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
    return name


def _write_manifest(out: Path, args, sc, seeds: dict, artifacts: list[Path], extra: dict) -> Path:
    manifest = {
        "fjlab_version": __version__,
        "command": args.command,
        "scenario": str(args.scenario),
        "scenario_sha256": _sha256(Path(args.scenario)),
        "overrides": list(args.override),
        "seeds": seeds,
        "output_dir": str(out),
        "resolved": sc.resolved(),
        "run": extra,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(args) -> Path:
    out = Path(args.out) if args.out else Path("out") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args, sc) -> int:
    t = sc.topology
    problems = validate(t, "strict")
    try:
        problems += diffusion_data(sc.sequence()).violations()
    except (TopologyError, ValueError) as exc:
        problems.append(str(exc))
    if problems:
        print(json.dumps({"status": "invalid", "scenario": str(args.scenario), "violations": problems}))
        return EXIT_INVALID
    print("OK")
    return EXIT_OK


def _strict(sc):
    problems = validate(sc.topology, "strict")
    if problems:
        print(json.dumps({"status": "invalid", "scenario": sc.path, "violations": problems}))
        return False
    return True


def cmd_simulate(args, sc) -> int:
    if not _strict(sc):
        return EXIT_INVALID
    cfg = sc.simulate
    if args.r is not None:
        if len(args.r) != 1:
            raise InputError("simulate takes a single --r value")
        cfg["r"] = args.r[0]
    if args.horizon is not None:
        cfg["horizon"] = args.horizon
    pol_cfg = dict(sc.policy)
    if args.policy is not None:
        if len(args.policy) != 1:
            raise InputError("simulate takes a single --policy value")
        pol_cfg["name"] = _policy_name(args.policy[0])
    seed, source = _resolve_seed(args.seed, sc.experiment["seed"])
    r = int(cfg["r"])
    seq = sc.sequence(sorted(set(sc.r_values) | {r}))
    opts = {k: v for k, v in pol_cfg.items() if k != "name"} if pol_cfg["name"] == "proposed" else {}
    policy = make_policy(pol_cfg["name"], **opts)
    r2 = r * r
    grid = np.linspace(0.0, float(cfg["horizon"]), int(cfg["grid_points"])) * r2
    res = Simulation(seq, r, policy, r2 * float(cfg["horizon"]), seed, grid).run()
    out = _outdir(args)
    artifacts = [out / "trajectory.csv", out / "run.csv"]
    res.trajectory.to_csv(artifacts[0])
    with open(artifacts[1], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "r", "policy", "raw_horizon", "events", "discounted_cost", "truncation_bound",
                     "max_queue"])
        wr.writerow([seed, r, pol_cfg["name"], repr(r2 * float(cfg["horizon"])), res.events,
                     repr(float(res.discounted_cost)), repr(float(res.truncation_bound)), res.max_queue])
    if isinstance(policy, ProposedPolicy) and pol_cfg.get("log_reviews"):
        policy.write_log(out / "reviews.csv")
        artifacts.append(out / "reviews.csv")
    _write_manifest(out, args, sc, {"root": seed, "source": source, "replication": seed},
                    artifacts, {"simulate": cfg, "policy": pol_cfg})
    print(f"wrote {', '.join(str(p) for p in artifacts)}")
    return EXIT_OK


def cmd_experiment(args, sc) -> int:
    if not _strict(sc):
        return EXIT_INVALID
    cfg = sc.experiment
    if args.policy is not None:
        cfg["policies"] = [_policy_name(p) for p in args.policy]
    if args.horizon is not None:
        cfg["horizon"] = args.horizon
    r_values = tuple(args.r) if args.r is not None else sc.r_values
    seed, source = _resolve_seed(args.seed, cfg["seed"])
    cfg["seed"] = seed
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")
    popts = {"proposed": {k: v for k, v in sc.policy.items() if k in ("rate_free",)}}
    plan = ExperimentPlan(sc.sequence(r_values), r_values, tuple(cfg["policies"]), int(cfg["replications"]),
                          float(cfg["horizon"]), tuple(cfg["checkpoints"]), int(cfg["track_points"]), seed,
                          int(cfg["srbm_paths"]), float(cfg["srbm_dt"]), tuple(cfg["epsilons"]), args.jobs,
                          bool(cfg["lower_bound"]), popts)
    res = run_experiment(plan)
    out = _outdir(args)
    artifacts = [out / "summary.csv", out / "replications.csv"]
    res.write_summary(artifacts[0])
    res.write_replications(artifacts[1])
    seeds = {"root": seed, "source": source,
             "replications": [derive_seed(seed, n) for n in range(plan.replications)],
             "srbm": derive_seed(seed, "srbm")}
    _write_manifest(out, args, sc, seeds, artifacts,
                    {"experiment": cfg, "r_values": list(r_values), "jobs": args.jobs, "policy_options": popts})
    print(f"wrote {', '.join(str(p) for p in artifacts)}")
    return EXIT_OK


def cmd_lowerbound(args, sc) -> int:
    if not _strict(sc):
        return EXIT_INVALID
    cfg = sc.lowerbound
    seed, source = _resolve_seed(args.seed, sc.experiment["seed"])
    data = diffusion_data(sc.sequence())
    problems = data.violations()
    if problems:
        print(json.dumps({"status": "invalid", "scenario": sc.path, "violations": problems}))
        return EXIT_INVALID
    lb_seed = derive_seed(seed, "srbm")
    ests = estimate_lower_bound(data, sc.topology, list(cfg["times"]), int(cfg["paths"]),
                                tuple(cfg["epsilons"]), float(cfg["dt"]), lb_seed)
    out = _outdir(args)
    path = out / "lowerbound.csv"
    eps = [float(e) for e in cfg["epsilons"]]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "mean", "se", "n", "failures"] + [f"p_exceed_{e:g}" for e in eps])
        for est in ests:
            wr.writerow([repr(est.t), repr(est.mean), repr(est.se), est.n, est.failures]
                        + [repr(est.exceedance[e]) for e in eps])
    _write_manifest(out, args, sc, {"root": seed, "source": source, "srbm": lb_seed}, [path],
                    {"lowerbound": cfg})
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "experiment": cmd_experiment,
            "lowerbound": cmd_lowerbound}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        sc = load_scenario(args.scenario, args.override)
        return COMMANDS[args.command](args, sc)
    except (InputError, ScenarioError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
