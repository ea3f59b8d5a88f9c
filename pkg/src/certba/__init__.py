"""Certifiable scaled bundle adjustment.

Translations and landmarks are marginalized into a ``3N x 3N`` data matrix,
the remaining problem over scaled rotations is relaxed to a semidefinite
program and solved by a low-rank factorization on a rank staircase, and the
result comes with a dual optimality certificate.
"""

__version__ = "0.1.0"

from .certificate import Certificate, certify, min_eigenpair, rigorous_lower_bound, suboptimality
from .kernels import BACKEND
from .manifold import FactorPoint, Problem
from .metrics import Metrics, align_similarity, compute_metrics
from .pipeline import (
    PipelineConfig,
    run_pipeline,
    solve_graph,
    solve_regularized,
    two_frame_registration,
    two_view_filter,
    xm_squared,
)
from .recovery import Solution, edge_residuals
from .reduction import DataMatrix, build_data_matrix, marginal_objective_oracle, recover_translations_points
from .staircase import StaircaseOptions, StaircaseResult, TrustRegionOptions, rtr_minimize, staircase
from .viewgraph import (
    GroundTruth,
    ViewGraph,
    ViewGraph2D,
    check_connectivity,
    lift_to_3d,
    parse_bal,
    read_bal,
    synth_scene,
)

__all__ = [
    "BACKEND",
    "Certificate",
    "DataMatrix",
    "FactorPoint",
    "GroundTruth",
    "Metrics",
    "PipelineConfig",
    "Problem",
    "Solution",
    "StaircaseOptions",
    "StaircaseResult",
    "TrustRegionOptions",
    "ViewGraph",
    "ViewGraph2D",
    "align_similarity",
    "build_data_matrix",
    "certify",
    "check_connectivity",
    "compute_metrics",
    "edge_residuals",
    "lift_to_3d",
    "marginal_objective_oracle",
    "min_eigenpair",
    "parse_bal",
    "read_bal",
    "recover_translations_points",
    "rigorous_lower_bound",
    "rtr_minimize",
    "run_pipeline",
    "solve_graph",
    "solve_regularized",
    "staircase",
    "suboptimality",
    "synth_scene",
    "two_frame_registration",
    "two_view_filter",
    "xm_squared",
]
