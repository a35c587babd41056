"""Out-of-vocabulary detection toolkit.

Library for open-set detection experiments: virtual OOV prompt synthesis
from class-conditional Gaussians, Dirichlet gradient-attribution
uncertainty for pseudo-OOV mining, a KDE low-density prior loss, the
open-set metric suite, and a synthetic-embedding training harness.
"""

from .types import (
    OOV_MARKER,
    DetectionRecord,
    GroundTruthRecord,
    LabeledEmbedding,
    RunConfig,
    box_iou,
    derived_rng,
    l2_normalize,
    seeded_rng,
)
from .prompts import (
    ClassGaussianModel,
    MaskedNoiseSpec,
    PromptQueue,
    estimate_class_means,
    estimate_tied_covariance,
    fit_class_gaussians,
    gaussian_log_density,
    joint_log_density,
    mahalanobis_sq,
    synthesize_oov_prompt,
)
from .attribution import (
    GradientAttribution,
    GradientMapSet,
    MinedProposal,
    PseudoOOVBatch,
    attribution_stats,
    dirichlet_log_density,
    mine_pseudo_oov,
    uncertainty,
)
from .density import (
    FeatureBank,
    LDPConfig,
    density_threshold,
    kde_density,
    kde_grad,
    ld_hinge,
    ld_prior_loss,
)
from .alignment import (
    PromptTable,
    alignment_loss,
    alignment_loss_grad,
    box_loss,
    similarity_logits,
    softmax,
)
from .metrics import (
    ClassSplit,
    EvalSet,
    MetricsReport,
    absolute_open_set_error,
    average_precision,
    full_report,
    match_detections,
    oov_recall,
    wilderness_impact,
)

__version__ = "0.1.0"
