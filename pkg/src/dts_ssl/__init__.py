"""dts-ssl: dual teacher-student training for safe semi-supervised learning.

Two teacher-student model pairs share one pre-trained ancestor: an inlier pair
classifies the K seen classes, an outlier pair detects unseen-class samples
hiding in the unlabeled set via an extra (K+1)-th class. An uncertainty score
computed from both teachers couples the pairs, softly weighting every
unlabeled sample into the unseen-class supervision while gating which samples
become pseudo-labeled seen-class training data.
"""

from .data import (
    AugmentConfig,
    AugmentedView,
    BatchPair,
    Dataset,
    MismatchSplit,
    PairSampler,
    augment,
    augment_batch,
    build_mismatch_split,
    feature_scale,
    generate_synthetic,
    load_dataset,
    load_split_manifest,
    materialize_split,
    save_dataset,
    save_split_manifest,
)
from .errors import (
    CapacityError,
    DtsError,
    GenerationError,
    ShapeError,
    StateError,
    UndefinedMetricError,
    ValidationError,
)
from .evaluation import (
    EvalResult,
    compute_accuracy,
    compute_auroc,
    predict_labels,
    run_inference,
)
from .losses import (
    LossReport,
    consistency_loss,
    cross_entropy,
    inlier_objective,
    kl_divergence,
    logit_match_loss,
    outlier_objective,
    pretrain_objective,
    seen_loss,
    unseen_loss,
)
from .models import (
    BackboneSpec,
    DualHeadModel,
    TeacherStudentPair,
    derive_pair,
    forward,
    init_teacher,
    load_model,
    param_hash,
    refresh_teacher,
    save_model,
)
from .soft_weighting import (
    GateDecision,
    SoftWeightedSet,
    UncertaintyScore,
    build_soft_weighted_set,
    reliability_gate,
    score_batch,
    uncertainty_score,
)
from .trainer import (
    ABLATION_MODES,
    PipelineDescription,
    TrainConfig,
    TrainResult,
    TrainState,
    apply_ablation,
    config_hash,
    evaluate_pipeline,
    pretrain_teacher,
    run_training,
    train_dts_iteration,
)

__version__ = "0.1.0"
