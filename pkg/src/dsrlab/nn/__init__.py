"""A small numpy neural-network engine with exact analytic gradients."""

from dsrlab.nn.core import (
    Activation,
    BatchNorm,
    Dense,
    Dropout,
    Module,
    Sequential,
    activate,
    build,
    log_softmax,
    mlp,
    register,
    sigmoid,
    softmax,
)
from dsrlab.nn.gradcheck import GradCheckResult, check_arrays, grad_check, relative_error
from dsrlab.nn.init import glorot_uniform, orthogonal, relu_bias
from dsrlab.nn.losses import frame_accuracy, mse_loss, nll_loss
from dsrlab.nn.optim import SGD, Adam, LrSchedule, clip_gradients, make_optimizer
from dsrlab.nn.train import (
    Batch,
    FrameDataset,
    SequenceDataset,
    TrainLog,
    collate,
    evaluate,
    train,
    warm_start_finetune,
)

__all__ = [
    "Activation", "Adam", "Batch", "BatchNorm", "Dense", "Dropout", "FrameDataset",
    "GradCheckResult", "LrSchedule", "Module", "SGD", "Sequential", "SequenceDataset",
    "TrainLog", "activate", "build", "check_arrays", "clip_gradients", "collate", "evaluate",
    "frame_accuracy", "glorot_uniform", "grad_check", "log_softmax", "make_optimizer", "mlp",
    "mse_loss", "nll_loss", "orthogonal", "register", "relative_error", "relu_bias", "sigmoid",
    "softmax", "train", "warm_start_finetune",
]
