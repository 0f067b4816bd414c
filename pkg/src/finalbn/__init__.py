"""Numpy CNN with an optional batch-norm layer on the logits, for imbalanced binary image classification."""

from .config import Hyper, TrainConfig
from .data import Dataset, SkewProtocol, generate_synthetic, make_splits, synthetic_splits
from .layers import Model, ModelSpec
from .report import RunReport
from .training import train_model, train_run

__version__ = "0.1.0"
