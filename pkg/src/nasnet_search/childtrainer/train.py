"""Momentum-SGD training of child networks with cosine decay and ScheduledDropPath."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .. import tensor as T
from ..cellgraph import MacroSpec, assemble_network
from ..genome import ArchitectureGenome
from .data import Dataset
from .droppath import droppath_prob
from .network import ChildNetwork


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_min: float = 0.0
    droppath: float = 0.3
    seed: int = 0
    # cosine/droppath horizon in epochs; None means ``epochs`` (set it larger to
    # stop part-way through a longer schedule)
    schedule_epochs: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0 or not 0 <= self.lr_min <= self.learning_rate:
            raise ValueError("need learning_rate > 0 and 0 <= lr_min <= learning_rate")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.droppath < 1:
            raise ValueError(f"droppath must be in [0, 1), got {self.droppath}")
        if self.schedule_epochs is not None and self.schedule_epochs < self.epochs:
            raise ValueError("schedule_epochs must be >= epochs")

    @property
    def horizon_epochs(self) -> int:
        return self.schedule_epochs if self.schedule_epochs is not None else self.epochs


@dataclass
class EvalResult:
    genome_id: str
    reward: float
    curve: list[dict[str, float]] = field(default_factory=list)
    wall_ms: float = 0.0
    params: int | None = None
    mult_adds: int | None = None
    seed: int = 0
    diverged: bool = False
    evaluator: str = "micro"

    def __post_init__(self) -> None:
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must be in [0, 1], got {self.reward}")

    def to_record(self) -> dict[str, Any]:
        rec = asdict(self)
        rec.pop("curve")
        return rec


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _finite(model: ChildNetwork) -> bool:
    return all(np.isfinite(p.data).all() for p in model.params.values())


def train_child(
    arch: ArchitectureGenome,
    macro: MacroSpec,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    log=None,
) -> EvalResult:
    """Train one child and return its validation accuracy as the reward.

    The init stream, data order and droppath masks come from three
    independent generators derived from ``config.seed``. A non-finite loss or
    weight stops training and yields reward 0 with ``diverged`` set.
    """
    start = time.perf_counter()
    n_classes = int(dataset.spec.num_classes)
    if macro.num_classes != n_classes:
        raise ValueError(f"macro has {macro.num_classes} classes, dataset has {n_classes}")
    net = assemble_network(arch, macro, dataset.image_shape)
    model = ChildNetwork(net, np.random.default_rng([config.seed, 0]))
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])

    n = len(dataset.train_y)
    bs = min(config.batch_size, n)
    steps_per_epoch = n // bs
    total = steps_per_epoch * config.horizon_epochs
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    decayed = set(model.decayed())
    curve: list[dict[str, float]] = []
    diverged = False
    step = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(config.epochs):
            perm = order_rng.permutation(n)
            losses, correct = [], 0
            for s in range(steps_per_epoch):
                idx = perm[s * bs : (s + 1) * bs]
                lr = cosine_lr(step, total, config.learning_rate, config.lr_min)
                p_drop = droppath_prob(step / total, config.droppath)
                with T.Tape() as tape:
                    logits = model.forward(dataset.train_x[idx], True, p_drop, drop_rng)
                    loss = T.cross_entropy_loss(logits, dataset.train_y[idx])
                value = loss.item()
                if not math.isfinite(value):
                    diverged = True
                    break
                grads = tape.backward(loss)
                for name, param in model.params.items():
                    g = grads.get(param)
                    if g is None:
                        continue
                    if name in decayed:
                        g = g + config.weight_decay * param.data
                    v = velocity[name]
                    v *= config.momentum
                    v += g
                    param.data -= (lr * v).astype(param.data.dtype)
                    param.grad = None
                losses.append(value)
                correct += int((logits.data.argmax(axis=1) == dataset.train_y[idx]).sum())
                step += 1
            if diverged or not _finite(model):
                diverged = True
                break
            curve.append(
                {
                    "epoch": epoch + 1,
                    "lr": cosine_lr(step, total, config.learning_rate, config.lr_min),
                    "droppath": droppath_prob(step / total, config.droppath),
                    "train_loss": float(np.mean(losses)),
                    "train_acc": correct / (steps_per_epoch * bs),
                }
            )
            if log is not None:
                log(curve[-1])

        if diverged:
            reward = 0.0
        else:
            final_drop = droppath_prob(step / total, config.droppath)
            preds = model.predict(dataset.val_x, final_drop)
            reward = float((preds == dataset.val_y).mean())
            if not math.isfinite(reward):
                reward, diverged = 0.0, True
    return EvalResult(
        genome_id=arch.genome_hash(),
        reward=reward,
        curve=curve,
        wall_ms=(time.perf_counter() - start) * 1000.0,
        params=net.total_params,
        mult_adds=net.total_mult_adds,
        seed=config.seed,
        diverged=diverged,
        evaluator="micro",
    )
