from .data import Dataset, load_mnist, make_blobs, mnist_subset
from .loop import EpochStats, ProjectionCadence, TrainConfig, evaluate, train
from .model import Model, backward, forward_loss, init_model, loss_per_depth
from .optim import sgd_momentum_step

__all__ = [
    "Dataset",
    "EpochStats",
    "Model",
    "ProjectionCadence",
    "TrainConfig",
    "backward",
    "evaluate",
    "forward_loss",
    "init_model",
    "load_mnist",
    "loss_per_depth",
    "make_blobs",
    "mnist_subset",
    "sgd_momentum_step",
    "train",
]
