"""Bayesian pathway-guided mediation analysis for high-dimensional metabolomics."""

__version__ = "0.1.0"

from .effects import PosteriorSummary, effect_draws, fdr_select, nde, nie, nie_pathway, summarize
from .estimator import PathwayMediation
from .exceptions import (
    DegenerateScoreError,
    InputError,
    InvariantError,
    NumericalError,
    PathmedError,
    SamplerError,
)
from .graph import PathwayGraph, ReactionRecord, build_pathway_graph, read_reactions, remove_cycles
from .model import Dataset, Hyperparameters, ModelState, compute_delta, compute_scores, standardize
from .sampler import ChainConfig, ChainOutput, run_chain
from .simulation import SCENARIOS, generate_replicate, misannotate, reference_graph, run_study, true_effects

__all__ = [
    "__version__",
    "ChainConfig",
    "ChainOutput",
    "Dataset",
    "DegenerateScoreError",
    "Hyperparameters",
    "InputError",
    "InvariantError",
    "ModelState",
    "NumericalError",
    "PathmedError",
    "PathwayGraph",
    "PathwayMediation",
    "PosteriorSummary",
    "ReactionRecord",
    "SCENARIOS",
    "SamplerError",
    "build_pathway_graph",
    "compute_delta",
    "compute_scores",
    "effect_draws",
    "fdr_select",
    "generate_replicate",
    "misannotate",
    "nde",
    "nie",
    "nie_pathway",
    "read_reactions",
    "reference_graph",
    "remove_cycles",
    "run_chain",
    "run_study",
    "standardize",
    "summarize",
    "true_effects",
]
