"""Fuse heterogeneous urban data into an updated origin mode split."""
from .fusion import ModeSplitFusion, compare_configurations, global_error, pearson, select_best
from .mode_priors import MODES, OfficialStats, project_mode_split
from .relation_graph import RelationGraph, rank_heuristic, validate
from .trifactor import SolverConfig, TriFactorization, fit

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "ModeSplitFusion",
    "OfficialStats",
    "RelationGraph",
    "SolverConfig",
    "TriFactorization",
    "compare_configurations",
    "fit",
    "global_error",
    "pearson",
    "project_mode_split",
    "rank_heuristic",
    "select_best",
    "validate",
]
