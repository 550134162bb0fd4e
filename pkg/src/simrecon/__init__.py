"""Reconstruct images from a similarity-only black-box oracle.

The pipeline: fit an eigenface subspace to public images, then climb the
oracle's similarity score by two-point zero-order gradient ascent on the
subspace coordinates, using a multi-start schedule under an exact query
budget. Verification accuracy and ablation sweeps measure the result.
"""

from .eigenspace import (
    EigenBasis,
    ImageTensor,
    fit_pca,
    horizontal_flip,
    load_basis,
    project,
    read_png,
    save_basis,
    synthesize,
    write_png,
)
from .optimizer import (
    GradientEstimate,
    OptimizerConfig,
    RunTrace,
    ascend,
    darkerbb,
    estimate_gradient,
    write_trace_csv,
)
from .oracle import (
    BudgetExhausted,
    CosineOracle,
    OracleError,
    QueryLedger,
    SimilarityOracle,
    SyntheticEmbedder,
    UnknownTarget,
    cosine,
    make_cosine_oracle,
    wrap_noise,
    wrap_quantize,
)
from .verify import (
    FoldReport,
    VerificationPair,
    best_threshold,
    evaluate_replacement,
    kfold_accuracy,
)

__version__ = "0.1.0"

__all__ = [
    "EigenBasis",
    "ImageTensor",
    "fit_pca",
    "horizontal_flip",
    "load_basis",
    "project",
    "read_png",
    "save_basis",
    "synthesize",
    "write_png",
    "GradientEstimate",
    "OptimizerConfig",
    "RunTrace",
    "ascend",
    "darkerbb",
    "estimate_gradient",
    "write_trace_csv",
    "BudgetExhausted",
    "CosineOracle",
    "OracleError",
    "QueryLedger",
    "SimilarityOracle",
    "SyntheticEmbedder",
    "UnknownTarget",
    "cosine",
    "make_cosine_oracle",
    "wrap_noise",
    "wrap_quantize",
    "FoldReport",
    "VerificationPair",
    "best_threshold",
    "evaluate_replacement",
    "kfold_accuracy",
    "__version__",
]
