"""Sequential top-down attention classifier and adversarial robustness toolkit."""

from .attacks import (
    AttackConfig,
    AttackResult,
    SpsaConfig,
    adam_pgd,
    draw_targets,
    multi_restart,
    pgd_attack,
    project_linf,
    run_attack,
    spsa_attack,
    spsa_gradient,
)
from .basis import build_spatial_basis
from .checkpoint import (
    CheckpointFormatError,
    UnsupportedVersionError,
    read_archive,
    write_archive,
)
from .data import (
    AugmentConfig,
    DataFormatError,
    DatasetSpec,
    ResultRow,
    iterate_batches,
    load_dataset,
    make_synthetic_batch,
    write_record_binary,
    write_results,
    write_synthetic_dataset,
)
from .evaluation import (
    EvalSummary,
    LandscapeGrid,
    NumericalFailure,
    evaluate,
    export_attention,
    landscape_to_csv,
    loss_landscape,
    render_landscape,
)
from .model import (
    AttentionRead,
    BackboneSpec,
    ControllerState,
    ImageBatch,
    ModelConfig,
    S3TA,
    attend,
    attend_heads,
    input_gradient,
    make_model,
    parameter_count,
    smoothed_cross_entropy,
)
from .training import (
    TrainConfig,
    TrainState,
    TrainingDivergence,
    adversarial_train_step,
    load_checkpoint,
    lr_at,
    nominal_variant,
    save_checkpoint,
    staged_readout_at,
    train,
)

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttentionRead",
    "AugmentConfig",
    "BackboneSpec",
    "CheckpointFormatError",
    "ControllerState",
    "DataFormatError",
    "DatasetSpec",
    "EvalSummary",
    "ImageBatch",
    "LandscapeGrid",
    "ModelConfig",
    "NumericalFailure",
    "ResultRow",
    "S3TA",
    "SpsaConfig",
    "TrainConfig",
    "TrainState",
    "TrainingDivergence",
    "UnsupportedVersionError",
    "adam_pgd",
    "adversarial_train_step",
    "attend",
    "attend_heads",
    "build_spatial_basis",
    "draw_targets",
    "evaluate",
    "export_attention",
    "input_gradient",
    "iterate_batches",
    "landscape_to_csv",
    "load_checkpoint",
    "load_dataset",
    "loss_landscape",
    "lr_at",
    "make_model",
    "make_synthetic_batch",
    "multi_restart",
    "nominal_variant",
    "parameter_count",
    "pgd_attack",
    "project_linf",
    "read_archive",
    "render_landscape",
    "run_attack",
    "save_checkpoint",
    "smoothed_cross_entropy",
    "spsa_attack",
    "spsa_gradient",
    "staged_readout_at",
    "train",
    "write_archive",
    "write_record_binary",
    "write_results",
    "write_synthetic_dataset",
]
