"""Small NumPy neural networks with hand-written backward passes."""

from .layers import Activation, BatchNorm, Conv2D, Dense, Flatten, Layer, MaxPool2D
from .network import ARCHITECTURES, GlobalAvgPool, Network, ResidualBlock, build_network, forward
from .train import (
    EpochMetrics,
    ExperimentReport,
    GradientCheckReport,
    RankSnapshot,
    TrainConfig,
    evaluate,
    gradient_check,
    learning_rate,
    objective,
    softmax_cross_entropy,
    switch_batch_run,
    train_run,
)

__all__ = [
    "Activation", "BatchNorm", "Conv2D", "Dense", "Flatten", "Layer", "MaxPool2D",
    "ARCHITECTURES", "GlobalAvgPool", "Network", "ResidualBlock", "build_network", "forward",
    "EpochMetrics", "ExperimentReport", "GradientCheckReport", "RankSnapshot", "TrainConfig",
    "evaluate", "gradient_check", "learning_rate", "objective", "softmax_cross_entropy",
    "switch_batch_run", "train_run",
]
