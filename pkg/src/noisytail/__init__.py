"""Noisy long-tailed classification with cross-augmentation matching.

A small numpy reverse-mode autodiff engine drives dual-branch networks
trained in two stages: a prior-penalized warm-up, then per-batch OTSU
selection of clean samples with a leave-noise-out penalty on confident
noisy ones.
"""

from .criteria import LossWeights
from .data import DatasetBundle, TrainView
from .model import Network
from .selection import select
from .trainer import TrainConfig, Trainer

__all__ = ["DatasetBundle", "LossWeights", "Network", "TrainConfig", "TrainView", "Trainer", "select"]
__version__ = "0.1.0"
