"""From-scratch neural network stack: layers, Adam, training loop, segment CNN."""

from .layers import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ReLU,
    prob_cross_entropy,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, EarlyStopping, TrainConfig, adam_step, lr_schedule
from .segment import (
    DEFAULT_BODY,
    EMBED_DIM,
    SegmentDataset,
    SegmentModel,
    backward,
    embed_segments,
    forward,
    train_segment_model,
)
from .training import TrainLog, fit, group_split

__all__ = [
    "Adam", "Conv2D", "DEFAULT_BODY", "Dense", "EMBED_DIM", "EarlyStopping", "Flatten", "MaxPool2D", "ReLU",
    "SegmentDataset", "SegmentModel", "TrainConfig", "TrainLog", "adam_step", "backward", "embed_segments",
    "fit", "forward", "group_split", "lr_schedule", "prob_cross_entropy", "sigmoid", "softmax",
    "softmax_cross_entropy", "train_segment_model",
]
