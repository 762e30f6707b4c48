"""Configuration, optimisation, checkpoints and the three training stages."""

from .checkpoint import file_hash, load_checkpoint, params_hash, save_checkpoint
from .config import (
    CodebookConfig,
    DataConfig,
    DiffusionConfig,
    OptimConfig,
    RoutingConfig,
    RunConfig,
    apply_env,
    load_config,
    full_scale_config,
)
from .optim import Adam, cosine_lr
from .stages import (
    Prediction,
    Stage1,
    Stage2,
    Stage3,
    evaluate_prediction,
    infer,
    load_data,
    load_stage1,
    load_stage2,
    load_stage3,
    make_references,
    references_for,
    retrieve_latent,
    routing_audit,
    routing_consistency,
    train_stage1,
    train_stage2,
    train_stage3,
)
