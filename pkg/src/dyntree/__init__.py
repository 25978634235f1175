"""Dynamic tree networks with structured variational, mean-field, loopy and exact inference."""

from ._numeric import InferenceError
from .harness import (
    ComparisonReport,
    FreeEnergyConfig,
    MarginalComparisonConfig,
    gen_markov_cases,
    marginal_kl_sum,
    run_free_energy_comparison,
    run_marginal_comparison,
)
from .loopy import LoopyOptions, LoopyResult, loopy_fit
from .mean_field import MeanFieldOptions, MeanFieldPosterior, embed_in_structured, mf_fit
from .model import (
    Assignment,
    DynamicTreeModel,
    Evidence,
    ModelError,
    NodeRef,
    ParentMenu,
    build_layered_model,
    log_joint,
    sample_prior,
    validate,
)
from .oracle import ExactPosterior, TreeCountExceeded, exact_posterior, tree_count
from .svi import EMOptions, FitOptions, StructuredPosterior, em_fit, svi_fit, svi_map_tree
from .tree_bp import TreeStructure, tree_posterior

__version__ = "0.1.0"
