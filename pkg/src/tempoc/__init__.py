"""Blind temporal consistency correction for per-frame processed videos."""

from .errors import CheckpointIntegrityError, ConfigError, ContractViolation
from .video import Role, VideoSequence, resolve_device
from .ops import backward_warp, flow_noise, flow_spatial_gradient, occlusion_mask
from .flow import FlowEstimator, PyramidFlowNet, build_estimator, pretrain_flow, register_estimator
from .losses import (
    LossReport,
    LossWeights,
    build_feature_extractor,
    loss_constancy,
    loss_flow_gradient,
    loss_perceptual,
    loss_reconstruction,
    total_loss,
)
from .model import ConsistencyModel, ConvLSTMCell, RecurrentState
from .data import (
    ClipManifest,
    FlickerSpec,
    TrainingSample,
    load_manifest,
    make_synthetic_clip,
    make_synthetic_corpus,
    sample_window,
    synthesize_flicker,
    write_manifest,
)
from .evaluate import (
    IterationCurve,
    Report,
    WarpErrorResult,
    build_report,
    iterate_restore,
    temporal_warp_error,
)
from .train import (
    Checkpoint,
    GradCheckReport,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "backward_warp",
    "build_estimator",
    "build_feature_extractor",
    "build_report",
    "Checkpoint",
    "CheckpointIntegrityError",
    "ClipManifest",
    "ConfigError",
    "ConsistencyModel",
    "ContractViolation",
    "ConvLSTMCell",
    "FlickerSpec",
    "FlowEstimator",
    "flow_noise",
    "flow_spatial_gradient",
    "gradient_check",
    "GradCheckReport",
    "IterationCurve",
    "iterate_restore",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "loss_constancy",
    "loss_flow_gradient",
    "loss_perceptual",
    "loss_reconstruction",
    "LossReport",
    "LossWeights",
    "make_synthetic_clip",
    "make_synthetic_corpus",
    "occlusion_mask",
    "pretrain_flow",
    "PyramidFlowNet",
    "RecurrentState",
    "register_estimator",
    "Report",
    "resolve_device",
    "Role",
    "sample_window",
    "save_checkpoint",
    "synthesize_flicker",
    "temporal_warp_error",
    "total_loss",
    "train",
    "TrainConfig",
    "TrainingSample",
    "VideoSequence",
    "WarpErrorResult",
    "write_manifest",
]
