"""Autoregressive LSTM policy over architecture decisions and its policy-gradient training.

Parameters and Adam moments are stored as float32 (the checkpoint format);
every forward/backward pass runs in float64 on promoted copies, so sampling,
teacher-forced scoring and gradient checks agree to double precision.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import genome as G
from . import tensor as T

ALGORITHMS = ("ppo", "reinforce", "random")
STEP_TYPE_CODES = {"input": 0, "op": 1, "combiner": 2}
CHECKPOINT_MAGIC = b"NASCTRL\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible controller checkpoint."""


@dataclass(frozen=True)
class RLConfig:
    algorithm: str = "ppo"
    learning_rate: float = 0.00035
    entropy_weight: float = 0.00001
    baseline_decay: float = 0.95
    minibatch_size: int = 20
    ppo_clip: float = 0.2
    ppo_epochs: int = 3
    hidden_size: int = 100
    embed_size: int = 32
    init_range: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.learning_rate <= 0 or self.ppo_clip <= 0 or self.init_range <= 0:
            raise ValueError("learning_rate, ppo_clip and init_range must be positive")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be non-negative")
        if not 0 <= self.baseline_decay < 1:
            raise ValueError(f"baseline_decay must be in [0, 1), got {self.baseline_decay}")
        if self.minibatch_size < 1 or self.ppo_epochs < 1 or self.hidden_size < 1 or self.embed_size < 1:
            raise ValueError("minibatch_size, ppo_epochs, hidden_size and embed_size must be >= 1")


@dataclass
class SampleRecord:
    decisions: list[int]
    log_probs: list[float]
    total_log_prob: float
    entropy: float


@dataclass
class ControllerState:
    domains: tuple[int, ...]
    step_types: tuple[str, ...]
    hidden_size: int
    embed_size: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int = 0
    baseline: float = 0.0  # EMA of minibatch mean rewards, started at 0
    updates: int = 0
    num_blocks: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.domains)


def _table_sizes(domains: Sequence[int], step_types: Sequence[str]) -> dict[str, int]:
    sizes: dict[str, int] = {}
    for d, kind in zip(domains, step_types):
        sizes[kind] = max(sizes.get(kind, 0), d)
    return sizes


def init_controller(
    domains: Sequence[int],
    step_types: Sequence[str],
    config: RLConfig = RLConfig(),
    seed: int | np.random.Generator = 0,
    num_blocks: int = 0,
) -> ControllerState:
    """Fresh controller with every weight uniform in ``[-init_range, init_range]``."""
    domains = tuple(int(d) for d in domains)
    step_types = tuple(step_types)
    if len(domains) != len(step_types) or not domains:
        raise ValueError("domains and step_types must be non-empty and of equal length")
    for kind in step_types:
        if kind not in STEP_TYPE_CODES:
            raise ValueError(f"unknown step type {kind!r}")
    if min(domains) < 1:
        raise ValueError("every domain must have at least one value")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, e, r = config.hidden_size, config.embed_size, config.init_range
    shapes: dict[str, tuple[int, ...]] = {"start": (1, e), "lstm/w": (e + h, 4 * h), "lstm/b": (4 * h,)}
    for kind, size in sorted(_table_sizes(domains, step_types).items()):
        shapes[f"embed/{kind}"] = (size, e)
    for t, d in enumerate(domains):
        shapes[f"head{t}/w"] = (h, d)
        shapes[f"head{t}/b"] = (d,)
    params = {k: rng.uniform(-r, r, size=s).astype(np.float32) for k, s in shapes.items()}
    return ControllerState(
        domains,
        step_types,
        h,
        e,
        params,
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
        num_blocks=num_blocks,
    )


def init_architecture_controller(num_blocks: int = 5, config: RLConfig = RLConfig(), seed=0) -> ControllerState:
    """Controller emitting the 2 x 5B decisions of one architecture."""
    return init_controller(
        G.architecture_domains(num_blocks), G.architecture_step_types(num_blocks), config, seed, num_blocks
    )


def promote(state: ControllerState) -> dict[str, T.Tensor]:
    """float64 trainable copies of the stored parameters."""
    return {k: T.Tensor(v.astype(np.float64), requires_grad=True, name=k, dtype=np.float64) for k, v in state.params.items()}


def _rollout(state: ControllerState, params: dict[str, T.Tensor], batch: int, decisions=None, rng=None):
    """Run the policy over all steps.

    Teacher-forced when ``decisions`` (shape ``(batch, steps)``) is given,
    otherwise samples with ``rng``. Returns (decisions, per-step log-prob
    tensors, per-step entropy tensors).
    """
    with T.precision("float64"):
        h = T.Tensor(np.zeros((batch, state.hidden_size)))
        c = T.Tensor(np.zeros((batch, state.hidden_size)))
        x = T.embedding_lookup(params["start"], np.zeros(batch, dtype=np.int64))
        chosen_all = np.zeros((batch, state.num_steps), dtype=np.int64)
        log_probs, entropies = [], []
        for t, kind in enumerate(state.step_types):
            h, c = T.lstm_step(x, h, c, params["lstm/w"], params["lstm/b"])
            logits = T.linear(h, params[f"head{t}/w"], params[f"head{t}/b"])
            logp = T.log_softmax(logits)
            if decisions is None:
                probs = np.exp(logp.data)
                cdf = np.cumsum(probs, axis=1)
                u = rng.random(batch) * cdf[:, -1]
                chosen = np.minimum((cdf <= u[:, None]).sum(axis=1), state.domains[t] - 1)
            else:
                chosen = decisions[:, t]
            chosen_all[:, t] = chosen
            log_probs.append(T.pick(logp, chosen))
            entropies.append(T.neg(T.sum(T.mul(T.exp(logp), logp), axis=1)))
            x = T.embedding_lookup(params[f"embed/{kind}"], chosen)
    return chosen_all, log_probs, entropies


def sample_batch(state: ControllerState, n: int, rng: np.random.Generator) -> list[SampleRecord]:
    """Draw ``n`` decision sequences in one batched rollout."""
    with T.no_record():
        chosen, lps, ents = _rollout(state, promote(state), n, rng=rng)
    per = np.stack([lp.data for lp in lps], axis=1)
    total, ent = _running_sum([lp.data for lp in lps]), _running_sum([e.data for e in ents])
    return [SampleRecord(chosen[i].tolist(), per[i].tolist(), float(total[i]), float(ent[i])) for i in range(n)]


def _running_sum(arrays):
    # left-to-right, the same order the objective accumulates its tensors in
    acc = arrays[0]
    for a in arrays[1:]:
        acc = acc + a
    return acc


def sample(state: ControllerState, rng: np.random.Generator) -> SampleRecord:
    return sample_batch(state, 1, rng)[0]


def sample_random(state: ControllerState, rng: np.random.Generator) -> SampleRecord:
    """Uniform decisions (the random-search arm); log-probs are those of the uniform policy."""
    decisions = [int(rng.integers(d)) for d in state.domains]
    lps = [-float(np.log(d)) for d in state.domains]
    return SampleRecord(decisions, lps, float(np.sum(lps)), -float(np.sum(lps)))


def sequence_log_probs(state: ControllerState, decisions, params=None) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced (per-step log-probs ``(M, steps)``, entropy sums ``(M,)``)."""
    d = np.atleast_2d(np.asarray(decisions, dtype=np.int64))
    with T.no_record():
        _, lps, ents = _rollout(state, params or promote(state), d.shape[0], decisions=d)
    return np.stack([lp.data for lp in lps], axis=1), np.stack([e.data for e in ents], axis=1).sum(axis=1)


def policy_objective(
    state: ControllerState,
    params: dict[str, T.Tensor],
    decisions,
    advantages,
    entropy_weight: float,
    old_log_probs=None,
    clip: float | None = None,
) -> tuple[T.Tensor, dict[str, np.ndarray]]:
    """Loss to minimize (negated objective), averaged over the batch.

    Without ``old_log_probs``: -(adv * log p + w * H). With them: the clipped
    surrogate -(min(r * adv, clip(r, 1 - eps, 1 + eps) * adv) + w * H),
    r = exp(log p - old log p).
    """
    d = np.atleast_2d(np.asarray(decisions, dtype=np.int64))
    adv = np.asarray(advantages, dtype=np.float64)
    m = d.shape[0]
    _, lps, ents = _rollout(state, params, m, decisions=d)
    with T.precision("float64"):
        logp = lps[0]
        for lp in lps[1:]:
            logp = T.add(logp, lp)
        ent = ents[0]
        for e in ents[1:]:
            ent = T.add(ent, e)
        info: dict[str, np.ndarray] = {"log_prob": logp.data.copy(), "entropy": ent.data.copy()}
        if old_log_probs is None:
            gain = T.mul(logp, adv)
        else:
            ratio = T.exp(T.sub(logp, T.Tensor(np.asarray(old_log_probs, dtype=np.float64))))
            info["ratio"] = ratio.data.copy()
            lo, hi = (1.0 - clip, 1.0 + clip) if clip is not None else (-np.inf, np.inf)
            gain = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, lo, hi), adv))
        total = T.add(gain, T.mul(ent, entropy_weight))
        loss = T.neg(T.mean(total))
    return loss, info


def _adam_step(state: ControllerState, grads: dict[str, np.ndarray], config: RLConfig) -> float:
    state.adam_t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    norm2 = 0.0
    for name, g in grads.items():
        norm2 += float((g * g).sum())
        m = b1 * state.adam_m[name].astype(np.float64) + (1 - b1) * g
        v = b2 * state.adam_v[name].astype(np.float64) + (1 - b2) * g * g
        m_hat = m / (1 - b1**state.adam_t)
        v_hat = v / (1 - b2**state.adam_t)
        p = state.params[name].astype(np.float64) - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        state.adam_m[name] = m.astype(np.float32)
        state.adam_v[name] = v.astype(np.float32)
        state.params[name] = p.astype(np.float32)
    return float(np.sqrt(norm2))


def _gradients(state, decisions, adv, config, old=None, clip=None):
    params = promote(state)
    with T.Tape() as tape:
        loss, info = policy_objective(state, params, decisions, adv, config.entropy_weight, old, clip)
    grads = tape.backward(loss)
    return {k: grads.get(p, np.zeros(p.shape)) for k, p in params.items()}, loss.item(), info


def _batch_arrays(batch):
    records = [rec for rec, _ in batch]
    if not records:
        raise ValueError("policy update needs a non-empty batch")
    decisions = np.array([r.decisions for r in records], dtype=np.int64)
    rewards = np.array([float(r) for _, r in batch], dtype=np.float64)
    return records, decisions, rewards


def advantage_baseline(state: ControllerState, rewards, decay: float) -> float:
    """Reward estimate subtracted for advantages.

    The stored EMA starts at 0, so after n updates it carries weight
    ``1 - decay**n`` on past rewards; dividing that out removes the pull
    toward 0. Before any update there are no past rewards and the current
    minibatch mean is used.
    """
    if state.updates == 0:
        return float(np.mean(rewards))
    return state.baseline / (1.0 - decay**state.updates)


def update_baseline(state: ControllerState, rewards, decay: float) -> float:
    state.baseline = decay * state.baseline + (1.0 - decay) * float(np.mean(rewards))
    return state.baseline


def reinforce_update(state: ControllerState, batch: Sequence[tuple[SampleRecord, float]], config: RLConfig) -> dict:
    """One Adam step on the baseline-subtracted policy gradient, then the EMA baseline update."""
    _, decisions, rewards = _batch_arrays(batch)
    baseline_before = advantage_baseline(state, rewards, config.baseline_decay)
    adv = rewards - baseline_before
    grads, loss, info = _gradients(state, decisions, adv, config)
    grad_norm = _adam_step(state, grads, config)
    update_baseline(state, rewards, config.baseline_decay)
    state.updates += 1
    return {
        "algorithm": "reinforce",
        "update": state.updates,
        "loss": loss,
        "mean_reward": float(rewards.mean()),
        "baseline_before": baseline_before,
        "baseline": state.baseline,
        "mean_advantage": float(adv.mean()),
        "entropy": float(info["entropy"].mean()),
        "grad_norm": grad_norm,
    }


def ppo_update(state: ControllerState, batch: Sequence[tuple[SampleRecord, float]], config: RLConfig) -> dict:
    """K epochs of clipped-surrogate Adam steps against the sampling-time log-probs."""
    records, decisions, rewards = _batch_arrays(batch)
    old = np.array([r.total_log_prob for r in records])
    baseline_before = advantage_baseline(state, rewards, config.baseline_decay)
    adv = rewards - baseline_before
    losses, ratios, grad_norms = [], [], []
    info = {}
    for _ in range(config.ppo_epochs):
        grads, loss, info = _gradients(state, decisions, adv, config, old, config.ppo_clip)
        losses.append(loss)
        ratios.append(info["ratio"])
        grad_norms.append(_adam_step(state, grads, config))
    update_baseline(state, rewards, config.baseline_decay)
    state.updates += 1
    return {
        "algorithm": "ppo",
        "update": state.updates,
        "loss": losses[-1],
        "losses": losses,
        "mean_reward": float(rewards.mean()),
        "baseline_before": baseline_before,
        "baseline": state.baseline,
        "mean_advantage": float(adv.mean()),
        "entropy": float(info["entropy"].mean()),
        "ratio_first_epoch": ratios[0].tolist(),
        "ratio_last_epoch_mean": float(ratios[-1].mean()),
        "grad_norm": grad_norms[-1],
    }


def policy_update(state: ControllerState, batch, config: RLConfig) -> dict | None:
    """Dispatch on ``config.algorithm``; random search never updates."""
    if config.algorithm == "ppo":
        return ppo_update(state, batch, config)
    if config.algorithm == "reinforce":
        return reinforce_update(state, batch, config)
    return None


def distributions(state: ControllerState, decisions) -> list[np.ndarray]:
    """Per-step probability tables ``(M, d_t)`` along teacher-forced sequences."""
    d = np.atleast_2d(np.asarray(decisions, dtype=np.int64))
    params = promote(state)
    out = []
    with T.no_record(), T.precision("float64"):
        h = T.Tensor(np.zeros((d.shape[0], state.hidden_size)))
        c = T.Tensor(np.zeros((d.shape[0], state.hidden_size)))
        x = T.embedding_lookup(params["start"], np.zeros(d.shape[0], dtype=np.int64))
        for t, kind in enumerate(state.step_types):
            h, c = T.lstm_step(x, h, c, params["lstm/w"], params["lstm/b"])
            out.append(T.softmax(T.linear(h, params[f"head{t}/w"], params[f"head{t}/b"])).data)
            x = T.embedding_lookup(params[f"embed/{kind}"], d[:, t])
    return out


# --- checkpoint ------------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIIIdQQ")


def checkpoint(state: ControllerState) -> bytes:
    """Versioned little-endian blob: header, domain/type tables, float32 params and Adam moments, CRC32."""
    names = sorted(state.params)
    parts = [
        _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            state.num_blocks,
            state.hidden_size,
            state.embed_size,
            state.num_steps,
            len(names),
            state.baseline,
            state.updates,
            state.adam_t,
        ),
        np.asarray(state.domains, dtype="<u4").tobytes(),
        bytes(STEP_TYPE_CODES[k] for k in state.step_types),
    ]
    for name in names:
        raw = name.encode()
        shape = state.params[name].shape
        parts.append(struct.pack("<HB", len(raw), len(shape)) + raw + np.asarray(shape, dtype="<u4").tobytes())
        for store in (state.params, state.adam_m, state.adam_v):
            parts.append(np.ascontiguousarray(store[name], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def restore(blob: bytes) -> ControllerState:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, version = struct.unpack_from("<8sI", body)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a controller checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint corrupt or truncated (checksum mismatch)")
    _, _, b, hidden, embed, steps, n_params, baseline, updates, adam_t = _HEADER.unpack_from(body)
    off = _HEADER.size
    domains = tuple(int(v) for v in np.frombuffer(body, "<u4", steps, off))
    off += 4 * steps
    codes = {v: k for k, v in STEP_TYPE_CODES.items()}
    step_types = tuple(codes[c] for c in body[off : off + steps])
    off += steps
    stores: tuple[dict, dict, dict] = ({}, {}, {})
    for _ in range(n_params):
        ln, nd = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off : off + ln].decode()
        off += ln
        shape = tuple(int(v) for v in np.frombuffer(body, "<u4", nd, off))
        off += 4 * nd
        size = int(np.prod(shape))
        for store in stores:
            store[name] = np.frombuffer(body, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    if off != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    return ControllerState(domains, step_types, hidden, embed, *stores, adam_t, baseline, updates, b)
