"""ScheduledDropPath: path dropout whose probability grows linearly over training."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import tensor as T

TRAIN = "train"
EVAL = "eval"


def droppath_prob(train_fraction: float, final_prob: float) -> float:
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in [0, 1], got {train_fraction}")
    if not 0.0 <= final_prob < 1.0:
        raise ValueError(f"final_prob must be in [0, 1), got {final_prob}")
    return train_fraction * final_prob


def expected_keep(drop_prob: float, n_paths: int) -> float:
    """Probability that one of ``n_paths`` joined paths survives under the survivor rule.

    Independent drops with probability p, plus: when all n would drop, one of
    them (uniformly) is kept. So keep = (1 - p) + p**n / n.
    """
    return (1.0 - drop_prob) + drop_prob**n_paths / n_paths


def droppath_masks(batch: int, n_paths: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 keep masks of shape ``(batch, n_paths)``; no row is all zeros."""
    keep = (rng.random((batch, n_paths)) >= drop_prob).astype(np.float64)
    dead = ~keep.any(axis=1)
    if dead.any():
        survivor = rng.integers(n_paths, size=int(dead.sum()))
        keep[np.flatnonzero(dead), survivor] = 1.0
    return keep


def apply_scheduled_droppath(
    joins: Sequence[Sequence[T.Tensor]],
    drop_prob: float,
    rng: np.random.Generator | None,
    mode: str = TRAIN,
) -> list[list[T.Tensor]]:
    """Drop or scale the paths feeding each join.

    ``joins`` holds, per combine node, the batch-first activations of its
    incoming paths. Training zeroes each path per example with probability
    ``drop_prob`` (never all paths of one join); evaluation multiplies every
    path by its expected keep probability.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if drop_prob == 0.0:
        return [list(paths) for paths in joins]
    out = []
    for paths in joins:
        n = len(paths)
        if mode == EVAL:
            scale = expected_keep(drop_prob, n)
            out.append([T.mul(p, scale) for p in paths])
            continue
        batch = paths[0].shape[0]
        masks = droppath_masks(batch, n, drop_prob, rng)
        bshape = (batch,) + (1,) * (paths[0].ndim - 1)
        out.append([T.mul(p, masks[:, j].reshape(bshape)) for j, p in enumerate(paths)])
    return out
