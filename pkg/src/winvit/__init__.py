"""Windowed-attention vision classifier with an analytical cost model.

The public surface: the tensor substrate (`tensor`), windowed and global
attention (`attention`), the spatial gate (`spatial`), classifier assembly
and checkpoints (`model`), params/FLOPs accounting (`costs`), the training
harness (`train`), dataset generation and PPM I/O (`data`), and the CLI
(`cli`, console script `winvit`).
"""

from .attention import (
    WindowAttentionParams,
    WindowGeometry,
    build_bias_index,
    global_mha_forward,
    window_merge,
    window_mha_forward,
    window_partition,
)
from .costs import CostReport, attention_cost, instrumented_forward, model_cost
from .data import Dataset, SyntheticSpec, generate_synthetic, load_manifest
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    GeometryError,
    NumericsError,
    ShapeError,
    WinvitError,
)
from .model import Block, Model, ModelConfig, classify, load_checkpoint, save_checkpoint
from .spatial import SamParams, sam_map, sam_residual
from .tensor import FlopCounter, Gradients, Tape, Tensor, backward
from .train import (
    TrainConfig,
    TrainState,
    adamw_step,
    cosine_lr,
    cross_entropy,
    evaluate,
    metrics,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "CostReport",
    "DataError",
    "Dataset",
    "DivergenceError",
    "FlopCounter",
    "GeometryError",
    "Gradients",
    "Model",
    "ModelConfig",
    "NumericsError",
    "SamParams",
    "ShapeError",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "WindowAttentionParams",
    "WindowGeometry",
    "WinvitError",
    "adamw_step",
    "attention_cost",
    "backward",
    "build_bias_index",
    "classify",
    "cosine_lr",
    "cross_entropy",
    "evaluate",
    "generate_synthetic",
    "global_mha_forward",
    "instrumented_forward",
    "load_checkpoint",
    "load_manifest",
    "metrics",
    "model_cost",
    "sam_map",
    "sam_residual",
    "save_checkpoint",
    "train_loop",
    "window_merge",
    "window_mha_forward",
    "window_partition",
]
