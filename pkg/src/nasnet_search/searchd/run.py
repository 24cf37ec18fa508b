"""The search orchestrator: sample, dispatch, commit in order, update, persist, resume.

Determinism: minibatch m (genome ids ``m*M .. m*M+M-1``) is sampled in one
batch from the controller state after m policy updates, with an RNG derived
from (run seed, m). Workers may finish in any order; a reorder buffer commits
results to the log, and so to the update stream, in genome-id order. With a
deterministic evaluator the log and leaderboard are therefore identical for
any pool size, and a run can be resumed from its directory.

Run directory:
  config           resolved configuration (INI)
  results.log      one JSON record per completed evaluation, in id order
  controller.ckpt  controller after the latest policy update (RL runs only)
  leaderboard      final top-K as JSON
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import genome as G
from ..config import RunConfig, load_config
from ..controller import (
    CheckpointError,
    ControllerState,
    SampleRecord,
    checkpoint,
    init_architecture_controller,
    policy_update,
    restore,
    sample_batch,
)
from .evaluators import evaluator_spec
from .leaderboard import Leaderboard, select_top_k
from .pools import make_pool
from .protocol import FAILURE, RESULT

CONFIG_FILE = "config"
RESULTS_LOG = "results.log"
CHECKPOINT_FILE = "controller.ckpt"
LEADERBOARD_FILE = "leaderboard"


class RunCorruptError(ValueError):
    pass


class SearchAborted(RuntimeError):
    """Persistence failed; the run directory is left in a resumable state."""


@dataclass
class WorkItem:
    id: int
    genome: G.ArchitectureGenome
    record: SampleRecord | None
    evaluator: dict
    seed: int

    def payload(self, attempt: int, inject_fault: bool) -> dict:
        return {
            "id": self.id,
            "attempt": attempt,
            "genome": G.to_dict(self.genome),
            "seed": self.seed,
            "evaluator": self.evaluator,
            "inject_fault": inject_fault,
        }


@dataclass
class RunState:
    config: RunConfig
    run_dir: Path | None
    completed: list[dict] = field(default_factory=list)
    controller: ControllerState | None = None
    sampled: int = 0
    history: list[dict] = field(default_factory=list)
    leaderboard: Leaderboard | None = None
    worker_deaths: int = 0

    @property
    def budget(self) -> int:
        return self.config.search.budget

    @property
    def finished(self) -> bool:
        return len(self.completed) >= self.budget

    @property
    def updates(self) -> int:
        return self.controller.updates if self.controller is not None else 0

    @property
    def baseline(self) -> float:
        return self.controller.baseline if self.controller is not None else 0.0

    def best_reward(self) -> float:
        return max((r["reward"] for r in self.completed), default=0.0)


def item_seed(run_seed: int, genome_id: int) -> int:
    return int(np.random.SeedSequence([run_seed, genome_id]).generate_state(1)[0])


def fault_injected(run_seed: int, rate: float, genome_id: int, attempt: int) -> bool:
    if rate <= 0.0:
        return False
    return bool(np.random.default_rng([run_seed, 7, genome_id, attempt]).random() < rate)


def _is_rl(config: RunConfig) -> bool:
    return config.controller.algorithm != "random"


def _new_controller(config: RunConfig) -> ControllerState:
    rng = np.random.default_rng([config.search.seed, 2])
    return init_architecture_controller(config.search.num_blocks, config.controller, rng)


def sample_minibatch(config: RunConfig, controller: ControllerState | None, m: int, start: int, n: int) -> list[WorkItem]:
    rng = np.random.default_rng([config.search.seed, 1, m])
    b = config.search.num_blocks
    if controller is not None and _is_rl(config):
        records = sample_batch(controller, n, rng)
    else:
        domains = G.architecture_domains(b)
        records = []
        for _ in range(n):
            d = G.sample_decisions(b, rng)
            lps = [-float(np.log(x)) for x in domains]
            records.append(SampleRecord(d, lps, float(sum(lps)), -float(sum(lps))))
    spec = evaluator_spec(config)
    return [
        WorkItem(start + i, G.decode(rec.decisions, b), rec if _is_rl(config) else None, spec,
                 item_seed(config.search.seed, start + i))
        for i, rec in enumerate(records)
    ]


def _log_record(item: WorkItem, result: dict | None, minibatch: int, attempts: int, duplicate: bool) -> dict:
    lost = result is None
    return {
        "id": item.id,
        "minibatch": minibatch,
        "genome_hash": item.genome.genome_hash(),
        "reward": 0.0 if lost else float(result["reward"]),
        "params": None if lost else result.get("params"),
        "mult_adds": None if lost else result.get("mult_adds"),
        "wall_ms": 0.0 if lost else float(result.get("wall_ms", 0.0)),
        "seed": item.seed,
        "evaluator": item.evaluator["kind"],
        "attempts": attempts,
        "lost": lost,
        "diverged": False if lost else bool(result.get("diverged", False)),
        "duplicate": duplicate,
        "genome": G.to_dict(item.genome),
    }


def read_log(path: Path) -> list[dict]:
    """Parse ``results.log``; any damaged record raises with the last valid one named."""
    if not path.exists():
        return []
    *lines, tail = path.read_bytes().split(b"\n")
    records: list[dict] = []

    def corrupt(index: int, reason: str) -> RunCorruptError:
        last = records[-1]["id"] if records else "none"
        return RunCorruptError(f"{path.name}: record {index + 1} is corrupt ({reason}); last valid record is id {last}")

    for i, raw in enumerate(lines):
        try:
            rec = json.loads(raw)
        except ValueError:
            raise corrupt(i, "not valid JSON") from None
        if not isinstance(rec, dict) or rec.get("id") != i or "reward" not in rec or "genome_hash" not in rec:
            raise corrupt(i, "unexpected content")
        records.append(rec)
    if tail:
        raise corrupt(len(lines), "truncated mid-record")
    return records


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_leaderboard(state: RunState) -> None:
    state.leaderboard = select_top_k(state.completed, state.config.search.top_k) if state.completed else None
    if state.run_dir is None or state.leaderboard is None:
        return
    by_id = {r["id"]: r for r in state.completed}
    doc = {
        "k": state.leaderboard.k,
        "budget": state.budget,
        "completed": len(state.completed),
        "updates": state.updates,
        "entries": [{**e.as_dict(), "genome": by_id[e.id]["genome"]} for e in state.leaderboard.entries],
    }
    _write_atomic(state.run_dir / LEADERBOARD_FILE, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def _evaluate_minibatch(pool_factory, state: RunState, items: list[WorkItem], reuse: dict[int, dict],
                        log_fh, minibatch: int, seen: set[str]) -> list[dict]:
    """Evaluate (or reuse) every item and commit records in id order."""
    cfg = state.config.search
    out: dict[int, dict] = {}
    attempts: dict[int, int] = {}
    pending = []
    for item in items:
        old = reuse.get(item.id)
        if old is not None:
            if old["genome_hash"] != item.genome.genome_hash():
                raise RunCorruptError(
                    f"{RESULTS_LOG}: record {item.id} holds genome {old['genome_hash']} but the run resamples "
                    f"{item.genome.genome_hash()}; the log does not belong to this configuration"
                )
            out[item.id] = old
        else:
            pending.append(item)
    by_id = {item.id: item for item in items}
    buffer: dict[int, dict | None] = {}
    if pending:
        pool = pool_factory()
        for item in pending:
            attempts[item.id] = 0
            pool.submit(item.payload(0, fault_injected(cfg.seed, cfg.fault_rate, item.id, 0)))
        while len(buffer) < len(pending):
            msg = pool.get()
            payload = msg["payload"]
            gid = payload.get("id")
            # idempotent: late or repeated submissions for a settled id are ignored
            if gid not in attempts or gid in buffer or payload.get("attempt") != attempts[gid]:
                continue
            if msg["type"] == RESULT:
                buffer[gid] = payload
            elif msg["type"] == FAILURE:
                attempts[gid] += 1
                if attempts[gid] > cfg.max_retries:
                    buffer[gid] = None
                else:
                    a = attempts[gid]
                    pool.submit(by_id[gid].payload(a, fault_injected(cfg.seed, cfg.fault_rate, gid, a)))
    # commit in genome-id order
    committed = []
    for item in items:
        if item.id in out:
            rec = out[item.id]
        else:
            dup = item.genome.genome_hash() in seen
            # attempts[id] counts failures; a lost item failed on every one of its 1 + R tries
            tries = attempts[item.id] + (buffer[item.id] is not None)
            rec = _log_record(item, buffer[item.id], minibatch, tries, dup)
            if log_fh is not None:
                try:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_fh.flush()
                except OSError as exc:
                    raise SearchAborted(f"cannot append to {RESULTS_LOG}: {exc}; resume from {state.run_dir}") from exc
        seen.add(rec["genome_hash"])
        committed.append(rec)
    if log_fh is not None:
        try:
            os.fsync(log_fh.fileno())
        except OSError as exc:
            raise SearchAborted(f"cannot sync {RESULTS_LOG}: {exc}; resume from {state.run_dir}") from exc
    return committed


def _drive(state: RunState, reuse: dict[int, dict], progress: Callable[[dict], None] | None,
           stop_after_minibatches: int | None) -> RunState:
    config = state.config
    mb = config.controller.minibatch_size
    pool = None

    def pool_factory():
        nonlocal pool
        if pool is None:
            pool = make_pool(config.search.transport, config.search.workers)
        return pool

    log_fh = open(state.run_dir / RESULTS_LOG, "a") if state.run_dir is not None else None
    seen = {r["genome_hash"] for r in state.completed}
    done_now = 0
    try:
        while not state.finished:
            if stop_after_minibatches is not None and done_now >= stop_after_minibatches:
                return state
            start = len(state.completed)
            n = min(mb, state.budget - start)
            m = start // mb
            items = sample_minibatch(config, state.controller, m, start, n)
            state.sampled = start + n
            records = _evaluate_minibatch(pool_factory, state, items, reuse, log_fh, m, seen)
            state.completed.extend(records)
            metrics = None
            if _is_rl(config) and n == mb:
                batch = [(item.record, rec["reward"]) for item, rec in zip(items, records)]
                metrics = policy_update(state.controller, batch, config.controller)
                state.history.append(metrics)
                if state.run_dir is not None:
                    try:
                        _write_atomic(state.run_dir / CHECKPOINT_FILE, checkpoint(state.controller))
                    except OSError as exc:
                        raise SearchAborted(f"cannot write {CHECKPOINT_FILE}: {exc}") from exc
            done_now += 1
            if progress is not None:
                progress(
                    {
                        "samples": len(state.completed),
                        "budget": state.budget,
                        "best": state.best_reward(),
                        "baseline": state.baseline,
                        "updates": state.updates,
                    }
                )
        write_leaderboard(state)
        return state
    finally:
        if pool is not None:
            state.worker_deaths += pool.deaths
            pool.close()
        if log_fh is not None:
            log_fh.close()


def run_search(
    config: RunConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
    stop_after_minibatches: int | None = None,
) -> RunState:
    """Run a search from scratch. ``out_dir=None`` keeps everything in memory.

    ``stop_after_minibatches`` returns early at a minibatch boundary, leaving a
    resumable directory (used to exercise crash recovery).
    """
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir)
        if (run_dir / RESULTS_LOG).exists():
            raise FileExistsError(f"{run_dir} already holds a run; use resume")
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(run_dir / CONFIG_FILE, config.to_text().encode())
    state = RunState(config, run_dir)
    if _is_rl(config):
        state.controller = _new_controller(config)
    return _drive(state, {}, progress, stop_after_minibatches)


def resume(run_dir: str | Path, progress=None, stop_after_minibatches: int | None = None) -> RunState:
    """Continue a persisted run from its last committed minibatch; finished runs are a no-op."""
    run_dir = Path(run_dir)
    if not (run_dir / CONFIG_FILE).exists():
        raise RunCorruptError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    config = load_config(run_dir / CONFIG_FILE)
    completed = read_log(run_dir / RESULTS_LOG)
    mb = config.controller.minibatch_size
    state = RunState(config, run_dir)
    if _is_rl(config):
        ckpt = run_dir / CHECKPOINT_FILE
        if ckpt.exists():
            try:
                state.controller = restore(ckpt.read_bytes())
            except CheckpointError as exc:
                raise RunCorruptError(f"{CHECKPOINT_FILE}: {exc}") from None
        else:
            state.controller = _new_controller(config)
    boundary = state.updates * mb if _is_rl(config) else (len(completed) // mb) * mb
    if len(completed) < boundary:
        raise RunCorruptError(
            f"{CHECKPOINT_FILE} records {state.updates} updates but {RESULTS_LOG} has only {len(completed)} results"
        )
    if len(completed) >= config.search.budget and (not _is_rl(config) or boundary >= (config.search.budget // mb) * mb):
        state.completed = completed[: config.search.budget]
        state.sampled = len(state.completed)
        write_leaderboard(state)
        return state
    state.completed = completed[:boundary]
    state.sampled = boundary
    reuse = {r["id"]: r for r in completed[boundary:]}
    return _drive(state, reuse, progress, stop_after_minibatches)


def with_search(config: RunConfig, **changes) -> RunConfig:
    return replace(config, search=replace(config.search, **changes))
