"""Post-hoc spectral editing and weight-space merging of model checkpoints.

The package reads standard tensor archives, edits a single fine-tuned
checkpoint by reweighting the high- and low-energy subspaces of each
layer's update, implements the common multi-checkpoint merging baselines
(uniform and greedy soups, alignment-weighted pairwise merging, uniform and
depth-linear interpolation, similarity-filtered selection), and emits the
diagnostics used to analyze them (spectra, effective ranks, pairwise
alignment, coefficient distributions, linear CKA).
"""

from .archive import (
    Checkpoint,
    LayerSchema,
    Tensor,
    read_archive,
    validate_compatibility,
    write_archive,
)
from .diagnostics import (
    LambdaTable,
    PairwiseAlignmentTable,
    SpectrumReport,
    emit_report,
    lambda_distribution,
    linear_cka,
    pairwise_alignment,
    spectrum_report,
    truncation_sweep,
)
from .editing import (
    EditReport,
    EffectiveRank,
    FixedEnergy,
    LayerEditReport,
    RankRule,
    edit_checkpoint,
    edit_layer,
    mixing_coefficients,
    parse_rule,
)
from .merges import (
    AlignmentProfile,
    CandidatePool,
    ExternalCommand,
    ScoresFile,
    TaskVector,
    greedy_soup,
    layer_cosine,
    lines,
    model_stock,
    sfgs,
    task_vector,
    uniform_soup,
    wise_ft,
)
from .spectral import (
    SpectralSplit,
    ThinSVD,
    effective_rank,
    energy_rank,
    flatten_to_matrix,
    spectral_decay,
    split_spectrum,
    thin_svd,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Tensor",
    "LayerSchema",
    "read_archive",
    "write_archive",
    "validate_compatibility",
    "ThinSVD",
    "SpectralSplit",
    "thin_svd",
    "energy_rank",
    "effective_rank",
    "spectral_decay",
    "split_spectrum",
    "flatten_to_matrix",
    "EffectiveRank",
    "FixedEnergy",
    "RankRule",
    "parse_rule",
    "mixing_coefficients",
    "edit_layer",
    "edit_checkpoint",
    "LayerEditReport",
    "EditReport",
    "TaskVector",
    "AlignmentProfile",
    "CandidatePool",
    "ScoresFile",
    "ExternalCommand",
    "task_vector",
    "layer_cosine",
    "uniform_soup",
    "model_stock",
    "wise_ft",
    "lines",
    "greedy_soup",
    "sfgs",
    "SpectrumReport",
    "PairwiseAlignmentTable",
    "LambdaTable",
    "spectrum_report",
    "pairwise_alignment",
    "truncation_sweep",
    "linear_cka",
    "lambda_distribution",
    "emit_report",
    "__version__",
]
