"""Replay-free class-incremental semantic segmentation.

A frozen multi-branch backbone keeps base classes intact forever; each new
class gets a small trainable sidecar branch and head; inference routes each
pixel by confidence between the new heads and the frozen base prediction.
"""

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .data import (
    BACKGROUND_ID,
    IGNORE_INDEX,
    SceneSpec,
    SegmentationDataset,
    TaskSchedule,
    build_schedule,
    evaluation_spec,
    filter_for_step,
    generate_dataset,
    load_labelmap_dataset,
    restrict_labels,
    save_labelmap_dataset,
)
from .determinism import enable_deterministic_mode
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    EmptyStepError,
    EmptySupervisionError,
    EvaluationError,
    FrozenViolationError,
    IngestionError,
    ScheduleError,
    SidecarSegError,
    TrainingDivergenceError,
    UndefinedROCError,
    VerificationError,
)
from .estimator import SidecarSegmenter
from .evaluation import (
    evaluate_argmax,
    evaluate_routed,
    novel_class_scores,
    predict_argmax,
    predict_routed,
    route_single,
)
from .freezing import (
    FrozenDigest,
    ParameterPartition,
    composite_named_parameters,
    freeze_base,
    max_frozen_gradient,
    snapshot_frozen,
    verify_frozen,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accumulate,
    build_report,
    iou_per_class,
    metrics_records,
    subset_miou,
    trajectory_report,
)
from .model import (
    BRANCH_NAMES,
    IncrementalUnit,
    ModelConfig,
    SegmentationModel,
    build_incremental_unit,
    build_model,
    forward_base,
    forward_incremental,
    parameter_shape_multiset,
)
from .routing import (
    HeadPrediction,
    RoutedPrediction,
    RoutingConfig,
    SweepPoint,
    roc_and_auc,
    route,
    save_label_image,
    sweep_threshold,
)
from .training import (
    StepRecord,
    TrainConfig,
    incremental_loss,
    train_base,
    train_finetune_baseline,
    train_incremental,
    train_joint_baseline,
    widen_head,
)

__version__ = "0.1.0"
