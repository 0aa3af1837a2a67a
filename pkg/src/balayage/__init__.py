"""Monte Carlo balayage onto ball unions for classical and Riesz potentials."""

from .engine import McParams, PathPolicy, StopSet, balayage_measure, balayage_point, hit_probability, mass_vector
from .errors import BalayageError, NumericalError, ParameterError, SolverFailure, StructuralError
from .geometry import Ball, BallUnion, DomainSpec, GridSpec, OpenRegion, grid_balls, validate_delta_family
from .kernels import KernelSpec, harnack_bound, riesz_constant
from .measures import Dictionary, PotentialSpec, WeakDistance, WeightedMeasure, combine, integrate_all, weak_distance
from .pipeline import (
    ExperimentReport,
    PipelineParams,
    approximate_open_balayage,
    harnack_audit,
    inequality_audit,
    jensen_demo,
    run_corollary_1_4,
    run_theorem_pipeline,
    skorokhod_demo,
)
from .shrink import ShrinkOptions, ShrinkProblem, ShrinkSolution, fraction_shrink, joint_shrink, solve_max_shrink

__version__ = "0.1.0"
