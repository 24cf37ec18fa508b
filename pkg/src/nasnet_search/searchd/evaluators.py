"""Turn a work payload into an :class:`EvalResult`."""

from __future__ import annotations

import dataclasses
import functools

from .. import genome as G
from ..cellgraph import MacroSpec
from ..childtrainer.data import SyntheticDataset, generate_dataset
from ..childtrainer.surrogate import constant_eval, surrogate_eval
from ..childtrainer.train import EvalResult, TrainConfig, train_child


class WorkerDeath(RuntimeError):
    """Injected worker crash."""


@functools.lru_cache(maxsize=4)
def _dataset(spec: SyntheticDataset):
    return generate_dataset(spec)


def evaluator_spec(config) -> dict:
    """Serializable description of the evaluator a run uses (sent with every work item)."""
    s = config.search
    if s.evaluator == "surrogate":
        return {"kind": "surrogate"}
    if s.evaluator == "constant":
        return {"kind": "constant", "value": s.constant_reward}
    return {
        "kind": "micro",
        "macro": dataclasses.asdict(config.macro),
        "train": dataclasses.asdict(config.train),
        "dataset": dataclasses.asdict(config.dataset),
    }


def evaluate_payload(payload: dict) -> EvalResult:
    if payload.get("inject_fault"):
        raise WorkerDeath(f"injected fault on genome {payload['id']} attempt {payload.get('attempt', 0)}")
    arch = G.from_dict(payload["genome"])
    spec = payload["evaluator"]
    seed = int(payload["seed"])
    kind = spec["kind"]
    if kind == "surrogate":
        return surrogate_eval(arch, seed)
    if kind == "constant":
        return constant_eval(arch, seed, float(spec["value"]))
    if kind == "micro":
        train = TrainConfig(**{**spec["train"], "seed": seed})
        return train_child(arch, MacroSpec(**spec["macro"]), _dataset(SyntheticDataset(**spec["dataset"])), train)
    raise ValueError(f"unknown evaluator kind {kind!r}")
