"""Deterministic stand-in reward computed from genome structure alone.

fitness = logistic(w0 + w . phi(genome)) + N(0, 0.01^2), clamped to [0, 1].

Features (each averaged over the Normal and Reduction cells, all in [0, 1]):
  sep_frac   fraction of the 2B operation choices that are separable convs
  consumed   distinct hidden states read by some block / (B + 2)
  depth      longest chain of blocks through block-to-block reads / B
  add_frac   fraction of blocks combining with ``add``
"""

from __future__ import annotations

import time

import numpy as np

from ..genome import NUM_OPERATIONS, OPERATIONS, ArchitectureGenome, encode
from .train import EvalResult

FEATURES = ("sep_frac", "consumed", "depth", "add_frac")
BIAS = -1.0
WEIGHTS = np.array([3.0, 1.0, 0.8, 0.4])
NOISE_STD = 0.01
_SEPARABLE = np.array([op.is_separable for op in OPERATIONS])


def features(decisions, num_blocks: int) -> np.ndarray:
    """Feature matrix ``(M, 4)`` for a batch of decision sequences ``(M, 10B)``."""
    d = np.atleast_2d(np.asarray(decisions, dtype=np.int64))
    b = num_blocks
    if d.shape[1] != 10 * b:
        raise ValueError(f"expected {10 * b} decisions per genome, got {d.shape[1]}")
    m = d.shape[0]
    out = np.zeros((m, len(FEATURES)))
    for half in (d[:, : 5 * b], d[:, 5 * b :]):
        blocks = half.reshape(m, b, 5)
        ops = blocks[:, :, 2:4]
        if ops.size and (ops.max() >= NUM_OPERATIONS):
            raise ValueError("operation index out of range")
        out[:, 0] += _SEPARABLE[ops].mean(axis=(1, 2))
        read = np.zeros((m, b + 2), dtype=bool)
        rows = np.arange(m)
        depth = np.zeros((m, b))
        for k in range(b):
            ia, ib = blocks[:, k, 0], blocks[:, k, 1]
            read[rows, ia] = True
            read[rows, ib] = True
            da = np.where(ia >= 2, depth[rows, np.maximum(ia - 2, 0)], 0.0)
            db = np.where(ib >= 2, depth[rows, np.maximum(ib - 2, 0)], 0.0)
            depth[:, k] = 1.0 + np.maximum(da, db)
        out[:, 1] += read.sum(axis=1) / (b + 2)
        out[:, 2] += depth.max(axis=1) / b
        out[:, 3] += (blocks[:, :, 4] == 0).mean(axis=1)
    return out / 2.0


def clean_fitness(decisions, num_blocks: int) -> np.ndarray:
    """Noise-free surrogate fitness for a batch of decision sequences."""
    z = BIAS + features(decisions, num_blocks) @ WEIGHTS
    return 1.0 / (1.0 + np.exp(-z))


def surrogate_reward(decisions, num_blocks: int, noise_seed: int) -> float:
    clean = float(clean_fitness(decisions, num_blocks)[0])
    noise = np.random.default_rng(noise_seed).normal(0.0, NOISE_STD)
    return float(np.clip(clean + noise, 0.0, 1.0))


def surrogate_eval(arch: ArchitectureGenome, noise_seed: int, costs: dict | None = None) -> EvalResult:
    """Score a genome with the surrogate; ``costs`` optionally carries params/mult_adds."""
    start = time.perf_counter()
    reward = surrogate_reward(encode(arch), arch.num_blocks, noise_seed)
    costs = costs or {}
    return EvalResult(
        genome_id=arch.genome_hash(),
        reward=reward,
        wall_ms=(time.perf_counter() - start) * 1000.0,
        params=costs.get("params"),
        mult_adds=costs.get("mult_adds"),
        seed=noise_seed,
        evaluator="surrogate",
    )


def constant_eval(arch: ArchitectureGenome, noise_seed: int, value: float = 0.5) -> EvalResult:
    """Signal-free evaluator: every genome scores ``value``."""
    return EvalResult(genome_id=arch.genome_hash(), reward=value, seed=noise_seed, evaluator="constant")
