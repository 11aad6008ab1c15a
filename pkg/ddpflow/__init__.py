"""
ddpflow

Data-driven DistFlow for radial distribution feeders observed through a
sparse set of voltage/current sensors.

The package builds a non-parametric model of a feeder from recorded
trajectories (a Hankel matrix of injections and power-flow outputs),
solves the operating point for new injections as a second-order cone
program, reduces the network to the nodes actually measured and picks
where those sensors should go.

Key Features:
    - Radial feeder models from MATPOWER/JSON cases or synthetic feeders
    - Exact DistFlow and phasor power flow on radial networks
    - Synthetic load profiles and trajectory datasets with PE checks
    - Full and reduced data-driven DistFlow as conic programs
      (Clarabel or SCS backends)
    - Kron reduction, greedy sensor placement and radialization
    - Reproducible generate/place/run pipeline and acceptance suite

Quick Start:
    >>> from ddpflow import (
    ...     build_hankel, generate_dataset, solve_ddpf_full,
    ...     synth_profiles, synthetic_feeder,
    ... )
    >>>
    >>> net = synthetic_feeder(16, seed=0)
    >>> profiles = synth_profiles(net.n, seed=0)
    >>> hs = build_hankel(generate_dataset(net, profiles, diversity=0.1))
    >>> inj = profiles.injections(10, scale=0.6)
    >>> sol = solve_ddpf_full(hs, inj.p, inj.q)
    >>> print(sol.voltages[:3])

Command line:
    ddpf generate|place|run|verify --config config.yml
"""

__version__ = "0.3.0"
__author__ = "ddpflow developers"
__license__ = "MIT"

# Feeder models
from .network import (
    AdmittanceMatrix,
    Branch,
    RadialNetwork,
    build_admittance,
    build_network,
    load_case,
    parse_matpower_case,
    parse_native_network,
    serialize_native_network,
    synthetic_feeder,
)

# Model-based power flow
from .powerflow import (
    InjectionVector,
    PowerFlowState,
    recover_phasors,
    residuals,
    solve_distflow,
    solve_phasor,
)

# Trajectory data
from .data import (
    HankelSystem,
    LoadProfileSet,
    TrajectoryDataset,
    build_hankel,
    generate_dataset,
    load_dataset,
    save_dataset,
    synth_profiles,
)

# Conic programs
from .socp import (
    ConeKind,
    ConicProgram,
    ConicProgramBuilder,
    ConicSolution,
    SolverSettings,
    SolverStatus,
    solve,
    verify_solution,
)

# Data-driven DistFlow
from .ddpf import (
    DdpfSolution,
    MembershipVerdict,
    check_exactness,
    membership_test,
    model_based_reduced_voltages,
    reconstruct_full_voltages,
    solve_ddpf_full,
    solve_ddpf_reduced,
)

# Reduction and placement
from .reduction import (
    AssignmentMatrix,
    ReducedNetwork,
    build_scenarios,
    greedy_placement,
    kron_reduce,
    radialize,
)

# Configuration and pipeline
from .config import ConfigLoader, PipelineConfig, load_pipeline_config
from .pipeline import DdpfPipeline
from .acceptance import AcceptanceSuite, run_acceptance

# Exception classes - for proper error handling
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DdpfException,
    NoConvergenceError,
    SolverError,
    TopologyError,
    ValidationError,
)

__all__ = [
    # Feeder models
    "AdmittanceMatrix",
    "Branch",
    "RadialNetwork",
    "build_admittance",
    "build_network",
    "load_case",
    "parse_matpower_case",
    "parse_native_network",
    "serialize_native_network",
    "synthetic_feeder",
    # Power flow
    "InjectionVector",
    "PowerFlowState",
    "recover_phasors",
    "residuals",
    "solve_distflow",
    "solve_phasor",
    # Data
    "HankelSystem",
    "LoadProfileSet",
    "TrajectoryDataset",
    "build_hankel",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "synth_profiles",
    # Conic programs
    "ConeKind",
    "ConicProgram",
    "ConicProgramBuilder",
    "ConicSolution",
    "SolverSettings",
    "SolverStatus",
    "solve",
    "verify_solution",
    # DDPF
    "DdpfSolution",
    "MembershipVerdict",
    "check_exactness",
    "membership_test",
    "model_based_reduced_voltages",
    "reconstruct_full_voltages",
    "solve_ddpf_full",
    "solve_ddpf_reduced",
    # Reduction
    "AssignmentMatrix",
    "ReducedNetwork",
    "build_scenarios",
    "greedy_placement",
    "kron_reduce",
    "radialize",
    # Pipeline
    "ConfigLoader",
    "PipelineConfig",
    "load_pipeline_config",
    "DdpfPipeline",
    "AcceptanceSuite",
    "run_acceptance",
    # Exceptions
    "ConfigError",
    "ConvergenceError",
    "DdpfException",
    "NoConvergenceError",
    "SolverError",
    "TopologyError",
    "ValidationError",
]
