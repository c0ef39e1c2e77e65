"""Closed-loop optimal identification of quantum Hamiltonians.

Simulates shaped-pulse population measurements of an N-level system, builds
first-order cut-HDMR surrogate maps from parameters to populations, extracts
families of data-consistent Hamiltonians with a genetic algorithm, and
optimizes the control field to make that family as narrow as possible.
"""

from .config import RunConfig, load_config, load_system
from .control import FieldNoiseModel, PulseShape, power_spectrum
from .data import DirectSolver, LabDataset, MeasurementPlan, simulate_lab_data
from .exceptions import ConfigurationError, DomainError, MapBuildError
from .ga import GAParams, GAResult, run_ga
from .hdmr import CutHdmrMap, MapDiagnostics, MapDomain, build_map, eval_map, validate_map
from .inversion import (
    FamilyInverter,
    InversionConfig,
    InversionFamily,
    extract_family,
    family_bounds,
    family_uncertainty,
    inversion_cost,
)
from .oi import OIConfig, OIResult, OptimalIdentification, control_cost, run_conventional, run_oi
from .quantum import (
    HamiltonianParams,
    LevelSystem,
    PropagationSettings,
    QuantumState,
    ladder_system,
    propagate,
    propagate_batch,
)

__all__ = [
    "ConfigurationError",
    "CutHdmrMap",
    "DirectSolver",
    "DomainError",
    "FamilyInverter",
    "FieldNoiseModel",
    "GAParams",
    "GAResult",
    "HamiltonianParams",
    "InversionConfig",
    "InversionFamily",
    "LabDataset",
    "LevelSystem",
    "MapBuildError",
    "MapDiagnostics",
    "MapDomain",
    "MeasurementPlan",
    "OIConfig",
    "OIResult",
    "OptimalIdentification",
    "PropagationSettings",
    "PulseShape",
    "QuantumState",
    "RunConfig",
    "build_map",
    "control_cost",
    "eval_map",
    "extract_family",
    "family_bounds",
    "family_uncertainty",
    "inversion_cost",
    "ladder_system",
    "load_config",
    "load_system",
    "power_spectrum",
    "propagate",
    "propagate_batch",
    "run_conventional",
    "run_ga",
    "run_oi",
    "simulate_lab_data",
    "validate_map",
]

__version__ = "0.1.0"
