"""Mono-molecular reaction networks in a Markov-modulated environment."""

from .envpath import EnvPath, PathBatch, ReturnIndex, duplicate_singleton, simulate_env, simulate_env_until_return
from .finite_time import burst_intensities, g_config, pmf_Z, pmf_table, sample_Z, ssa_batch, ssa_joint
from .model import (
    EnvironmentSpec,
    ModelError,
    ModulatedNetwork,
    Violation,
    build_modulation,
    mean_production_check,
    network,
    stationary_env,
    validate_network,
)
from .modelfile import dumps, load, loads
from .oracle import TruncatedJointSpace, build_joint_generator, stationary_pmf, transient_pmf, tv_distance
from .propagator import Propagator, cycle_blocks, expm_subgen, propagate, segment_G
from .stationary import error_certificate, factorial_moments, sre_sample, stationary_sample_Z
from .structure import check_assumption2, classify, estimate_alpha, obtainable

__version__ = "0.1.0"

__all__ = [
    "EnvPath",
    "EnvironmentSpec",
    "ModelError",
    "ModulatedNetwork",
    "PathBatch",
    "Propagator",
    "ReturnIndex",
    "TruncatedJointSpace",
    "Violation",
    "build_joint_generator",
    "build_modulation",
    "burst_intensities",
    "check_assumption2",
    "classify",
    "cycle_blocks",
    "dumps",
    "duplicate_singleton",
    "error_certificate",
    "estimate_alpha",
    "expm_subgen",
    "factorial_moments",
    "g_config",
    "load",
    "loads",
    "mean_production_check",
    "network",
    "obtainable",
    "pmf_Z",
    "pmf_table",
    "propagate",
    "sample_Z",
    "segment_G",
    "simulate_env",
    "simulate_env_until_return",
    "sre_sample",
    "ssa_batch",
    "ssa_joint",
    "stationary_env",
    "stationary_pmf",
    "stationary_sample_Z",
    "transient_pmf",
    "tv_distance",
    "validate_network",
]
