"""Simulation lab for fork-join networks with shared servers in heavy traffic."""

__version__ = "0.1.0"

from .topology import (DiffusionData, HeavyTrafficSequence, NetworkTopology, TopologyError,
                       diffusion_data, figure2_network, validate)
from .primitives import DistributionSpec, RandomStream, derive_seed
from .optimizer import LpInstance, SplitSolver, select_solution, solve_lp, value_z
from .sim import Simulation, run
from .policies import ProposedPolicy, baseline, make_policy
from .scaling import (ExperimentPlan, estimate_lower_bound, reflect_1d, run_experiment, scale_path,
                      simulate_srbm)

__all__ = [
    "DiffusionData", "HeavyTrafficSequence", "NetworkTopology", "TopologyError", "diffusion_data",
    "figure2_network", "validate", "DistributionSpec", "RandomStream", "derive_seed", "LpInstance",
    "SplitSolver", "select_solution", "solve_lp", "value_z", "Simulation", "run", "ProposedPolicy",
    "baseline", "make_policy", "ExperimentPlan", "estimate_lower_bound", "reflect_1d", "run_experiment",
    "scale_path", "simulate_srbm",
]
