"""Child-network evaluation: micro-training on synthetic data and the surrogate reward."""

from .data import Dataset, SyntheticDataset, generate_dataset, load_cifar10
from .droppath import apply_scheduled_droppath, droppath_masks, droppath_prob, expected_keep
from .network import ChildNetwork
from .surrogate import clean_fitness, constant_eval, features, surrogate_eval, surrogate_reward
from .train import EvalResult, TrainConfig, cosine_lr, train_child

__all__ = [name for name in dir() if not name.startswith("_")]
