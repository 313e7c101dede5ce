"""SE-connection pyramid segmentation networks on a small numpy autodiff core."""

from .data import LABELS, Sample, generate_phantom, load_dataset, resize_to, save_dataset, split_folds
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    NumericalError,
    SECPError,
    TrainingDivergedError,
    UsageError,
)
from .metrics import aggregate_folds, dice, emit_table, jaccard
from .networks import NetworkConfig, VariantId, build_variant, predict_mask
from .tensor import Parameter, Tensor, grad_check, precision
from .training import StagePlan, TrainConfig, load_checkpoint, lr_at_epoch, save_checkpoint, staged_train, train_stage

__version__ = "0.1.0"
