"""Differentiable substrate shared by every model in the package."""

from .autograd import TapeError, Tensor, as_tensor, concat, parameter, where
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .density import (
    DensityError,
    gaussian_log_density,
    gaussian_log_density_rows,
    gaussian_log_density_t,
    per_dim_nll,
    standard_normal_log_density_rows,
)
from .nn import Mlp, MlpSpec
from .optim import Adam, AdamState, adam_step
from .rng import Rng, per_item_normals, stream_id

__all__ = [
    "Adam", "AdamState", "Checkpoint", "CheckpointError", "DensityError", "Mlp", "MlpSpec", "Rng",
    "TapeError", "Tensor", "adam_step", "as_tensor", "concat", "gaussian_log_density",
    "gaussian_log_density_rows", "gaussian_log_density_t", "load_checkpoint", "parameter",
    "per_dim_nll", "per_item_normals", "save_checkpoint", "standard_normal_log_density_rows",
    "stream_id", "where",
]
