"""Discrete motion-primitive modeling for multi-channel inertial streams.

Windows of sensor data are cut into fixed-length segments, vector-quantized
against a learned codebook, embedded together with raw-segment statistics and
sensor metadata, and fed to a small transformer encoder trained with masked
token reconstruction and window classification. Everything runs in float64
numpy with hand-written backward passes so gradients can be verified against
finite differences.
"""

from .analysis import (
    FrequencyReport,
    SimilarityMatrix,
    TransitionMatrix,
    frequency,
    similarity,
    token_streams,
    transitions,
)
from .embedder import (
    EmbeddingTable,
    MaskPlan,
    PositionTable,
    SequenceLayout,
    StatProjector,
    TokenSequence,
    assemble,
    build_layout,
    plan_mask,
    tokenize_window,
)
from .encoder import EncoderConfig, GradCheckReport, encoder_backward, encoder_forward, grad_check
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MetadataProviderError,
    MotionPrimError,
    NumericError,
)
from .ingest import (
    ChannelMetadata,
    DatasetManifest,
    SensorWindow,
    SyntheticSpec,
    generate_synthetic,
    instance_normalize,
    load_dataset,
    load_manifest,
    resample,
    segment,
    window,
)
from .metadata import (
    CachingProvider,
    FileLookupProvider,
    HashProvider,
    MetadataVector,
    RemoteProvider,
    canonical_descriptor,
    make_provider,
)
from .model import (
    FINETUNE_WEIGHTS,
    PRETRAIN_WEIGHTS,
    LossWeights,
    Model,
    ModelConfig,
    PreparedBatch,
    forward,
    gradient_suite,
    init_model,
    prepare_windows,
)
from .quantizer import (
    Codebook,
    init_codebook,
    quantize,
    quantize_batch,
    straight_through,
    update_codebook,
    usage_report,
    vq_loss,
)
from .training import (
    ENCODER_FINETUNE,
    LINEAR_PROBE,
    PRETRAIN_POLICY,
    AdamW,
    EvalMetrics,
    FreezePolicy,
    OptimizerConfig,
    checkpoint_hash,
    evaluate,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    stratified_split,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CachingProvider",
    "ChannelMetadata",
    "CheckpointError",
    "Codebook",
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "ENCODER_FINETUNE",
    "EmbeddingTable",
    "EncoderConfig",
    "EvalMetrics",
    "FINETUNE_WEIGHTS",
    "FileLookupProvider",
    "FreezePolicy",
    "FrequencyReport",
    "GradCheckReport",
    "HashProvider",
    "LINEAR_PROBE",
    "LossWeights",
    "MaskPlan",
    "MetadataProviderError",
    "MetadataVector",
    "Model",
    "ModelConfig",
    "MotionPrimError",
    "NumericError",
    "OptimizerConfig",
    "PRETRAIN_POLICY",
    "PRETRAIN_WEIGHTS",
    "PositionTable",
    "PreparedBatch",
    "RemoteProvider",
    "SensorWindow",
    "SequenceLayout",
    "SimilarityMatrix",
    "StatProjector",
    "SyntheticSpec",
    "TokenSequence",
    "TransitionMatrix",
    "assemble",
    "build_layout",
    "canonical_descriptor",
    "checkpoint_hash",
    "encoder_backward",
    "encoder_forward",
    "evaluate",
    "finetune",
    "forward",
    "frequency",
    "generate_synthetic",
    "grad_check",
    "gradient_suite",
    "init_codebook",
    "init_model",
    "instance_normalize",
    "load_checkpoint",
    "load_dataset",
    "load_manifest",
    "make_provider",
    "plan_mask",
    "prepare_windows",
    "pretrain",
    "quantize",
    "quantize_batch",
    "resample",
    "save_checkpoint",
    "segment",
    "similarity",
    "straight_through",
    "stratified_split",
    "token_streams",
    "tokenize_window",
    "transitions",
    "update_codebook",
    "usage_report",
    "vq_loss",
    "window",
]
