import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasnet_search import genome as G
from nasnet_search.config import RunConfig
from nasnet_search.searchd import (
    CSV_COLUMNS,
    ProtocolError,
    RunCorruptError,
    compare_rl_vs_rs,
    decode_message,
    encode_message,
    message,
    read_log,
    read_message,
    resume,
    run_search,
    running_curves,
    select_top_k,
    write_message,
)
from nasnet_search.searchd import run as R
from nasnet_search.searchd.pools import ProcessPool, ThreadPool
from nasnet_search.searchd.protocol import FAILURE, RESULT, SHUTDOWN, WORK, handle_work, run_worker


def _cfg(budget=100, workers=1, algorithm="ppo", **search):
    cfg = RunConfig()
    cfg = cfg.replace("search", budget=budget, workers=workers, **search)
    return cfg.replace("controller", algorithm=algorithm)


def _board(state):
    return [(e.id, e.genome_hash, e.reward) for e in state.leaderboard.entries]


def _timeless(records):
    """Log records without wall-clock time, the one field that legitimately varies between runs."""
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


# -- run_search ---------------------------------------------------------------


def test_budget_100_gives_five_updates(tmp_path):
    state = run_search(_cfg(100), tmp_path / "run")
    assert state.updates == 5
    assert len(state.completed) == 100
    assert [r["id"] for r in state.completed] == list(range(100))
    assert [h["update"] for h in state.history] == [1, 2, 3, 4, 5]
    assert (tmp_path / "run" / R.CHECKPOINT_FILE).exists()
    assert (tmp_path / "run" / R.LEADERBOARD_FILE).exists()


def test_partial_final_minibatch_does_not_update():
    state = run_search(_cfg(50))
    assert state.updates == 2
    assert len(state.completed) == 50


def test_random_mode_makes_no_updates_and_no_checkpoint(tmp_path):
    state = run_search(_cfg(60, algorithm="random"), tmp_path / "run")
    assert state.updates == 0 and state.controller is None
    assert not (tmp_path / "run" / R.CHECKPOINT_FILE).exists()
    assert len(read_log(tmp_path / "run" / R.RESULTS_LOG)) == 60


@pytest.mark.parametrize("algorithm", ["ppo", "reinforce", "random"])
def test_pool_size_does_not_change_run(algorithm):
    one = run_search(_cfg(200, workers=1, algorithm=algorithm))
    eight = run_search(_cfg(200, workers=8, algorithm=algorithm))
    assert _board(one) == _board(eight)
    assert _timeless(one.completed) == _timeless(eight.completed)


def test_resumed_run_matches_uninterrupted_at_every_boundary(tmp_path):
    cfg = _cfg(100)
    full = run_search(cfg, tmp_path / "full")
    full_log = _timeless(read_log(tmp_path / "full" / R.RESULTS_LOG))
    for stop in range(1, 5):
        d = tmp_path / f"stop{stop}"
        part = run_search(cfg, d, stop_after_minibatches=stop)
        assert len(part.completed) == 20 * stop and not part.finished
        resumed = resume(d)
        assert resumed.finished
        assert _board(resumed) == _board(full)
        assert _timeless(read_log(d / R.RESULTS_LOG)) == full_log
        assert (d / R.CHECKPOINT_FILE).read_bytes() == (tmp_path / "full" / R.CHECKPOINT_FILE).read_bytes()


def test_resume_reuses_results_logged_past_the_checkpoint(tmp_path, monkeypatch):
    # crash after the log was written but before the checkpoint: the extra records are reused, not re-run
    cfg = _cfg(60)
    d = tmp_path / "run"
    run_search(cfg, d, stop_after_minibatches=1)
    ckpt = (d / R.CHECKPOINT_FILE).read_bytes()
    resume(d, stop_after_minibatches=1)
    (d / R.CHECKPOINT_FILE).write_bytes(ckpt)
    logged = read_log(d / R.RESULTS_LOG)
    assert len(logged) == 40

    submitted = []
    real = R._evaluate_minibatch

    def spy(pool_factory, state, items, reuse, *rest):
        submitted.extend(i.id for i in items if i.id not in reuse)
        return real(pool_factory, state, items, reuse, *rest)

    monkeypatch.setattr(R, "_evaluate_minibatch", spy)
    state = resume(d)
    assert submitted == list(range(40, 60))
    assert state.completed[:40] == logged
    assert _board(state) == _board(run_search(cfg))


def test_resume_of_finished_run_is_noop(tmp_path):
    d = tmp_path / "run"
    first = run_search(_cfg(40), d)
    before = (d / R.RESULTS_LOG).read_bytes()
    again = resume(d)
    assert again.finished and _board(again) == _board(first)
    assert (d / R.RESULTS_LOG).read_bytes() == before


def test_truncated_log_is_reported(tmp_path):
    d = tmp_path / "run"
    run_search(_cfg(40), d)
    log = d / R.RESULTS_LOG
    data = log.read_bytes()
    log.write_bytes(data[: len(data) - 30])
    with pytest.raises(RunCorruptError, match="record 40 is corrupt.*last valid record is id 38"):
        resume(d)


def test_garbled_record_is_reported(tmp_path):
    d = tmp_path / "run"
    run_search(_cfg(40), d)
    log = d / R.RESULTS_LOG
    lines = log.read_text().splitlines(keepends=True)
    lines[5] = "{not json\n"
    log.write_text("".join(lines))
    with pytest.raises(RunCorruptError, match="record 6 .*last valid record is id 4"):
        read_log(log)


def test_existing_run_directory_is_not_overwritten(tmp_path):
    run_search(_cfg(20), tmp_path / "run")
    with pytest.raises(FileExistsError):
        run_search(_cfg(20), tmp_path / "run")


def test_faults_lose_and_duplicate_nothing():
    clean = run_search(_cfg(200, workers=4))
    faulty = run_search(_cfg(200, workers=4, fault_rate=0.1))
    ids = [r["id"] for r in faulty.completed]
    assert ids == list(range(200))
    assert faulty.worker_deaths > 0
    assert any(r["attempts"] > 1 for r in faulty.completed)
    for a, b in zip(clean.completed, faulty.completed):
        # retries re-run the same seed; only items that exhausted retries differ
        if not b["lost"]:
            assert a["reward"] == b["reward"]
        else:
            assert b["reward"] == 0.0 and b["attempts"] == 3


def test_lost_items_are_scored_zero():
    # a rate just under 1 exhausts R retries on nearly every item
    state = run_search(_cfg(20, fault_rate=0.999))
    assert [r["id"] for r in state.completed] == list(range(20))
    lost = [r for r in state.completed if r["lost"]]
    assert lost and all(r["reward"] == 0.0 and r["attempts"] == 3 for r in lost)


class _DuplicatingPool:
    """Answers every item twice, out of order, plus a stale attempt."""

    deaths = 0

    def __init__(self):
        self.out = []

    def submit(self, payload):
        res = handle_work(payload)
        self.out.insert(0, message(RESULT, res))
        self.out.append(message(RESULT, {**res, "reward": 0.0}))
        self.out.append(message(RESULT, {**res, "attempt": 7, "reward": 0.0}))

    def get(self):
        return self.out.pop(0)

    def close(self):
        pass


def test_result_submission_is_idempotent(monkeypatch):
    monkeypatch.setattr(R, "make_pool", lambda transport, size: _DuplicatingPool())
    state = run_search(_cfg(40))
    ref = run_search(_cfg(40))
    assert _timeless(state.completed) == _timeless(ref.completed)


def test_updates_consume_consecutive_minibatches():
    state = run_search(_cfg(100))
    assert [r["minibatch"] for r in state.completed] == [i // 20 for i in range(100)]


def test_duplicates_are_flagged(monkeypatch):
    real = R.sample_minibatch

    def few_genomes(config, controller, m, start, n):
        # fold the sampled genomes onto a pool of 7 so repeats occur
        items = real(config, controller, m, start, n)
        for item in items:
            item.genome = G.sample_uniform(config.search.num_blocks, item.id % 7)
        return items

    monkeypatch.setattr(R, "sample_minibatch", few_genomes)
    state = run_search(_cfg(40))
    assert len(state.leaderboard) == 7
    seen = set()
    for r in state.completed:
        assert r["duplicate"] == (r["genome_hash"] in seen)
        seen.add(r["genome_hash"])
    assert sum(r["duplicate"] for r in state.completed) == 33


def test_leaderboard_is_function_of_log(tmp_path):
    d = tmp_path / "run"
    state = run_search(_cfg(60), d)
    doc = json.loads((d / R.LEADERBOARD_FILE).read_text())
    rebuilt = select_top_k(read_log(d / R.RESULTS_LOG), state.config.search.top_k)
    assert [e["id"] for e in doc["entries"]] == rebuilt.ids()


def test_persistence_failure_aborts_resumably(tmp_path, monkeypatch):
    d = tmp_path / "run"
    cfg = _cfg(60)
    run_search(cfg, d, stop_after_minibatches=1)

    def broken(*args, **kwargs):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(R, "_write_atomic", broken)
    with pytest.raises(R.SearchAborted):
        resume(d)
    monkeypatch.undo()
    assert _board(resume(d)) == _board(run_search(cfg))


# -- select_top_k -------------------------------------------------------------


def test_top_k_matches_sort_oracle():
    rng = np.random.default_rng(0)
    n = 10_000
    rewards = np.round(rng.random(n), 3)  # rounding forces many ties
    hashes = [f"g{h}" for h in rng.integers(0, 6000, n)]
    results = [{"id": i, "genome_hash": h, "reward": float(r)} for i, (h, r) in enumerate(zip(hashes, rewards))]
    best = {}
    for order, rec in enumerate(results):
        if rec["genome_hash"] not in best or rec["reward"] > best[rec["genome_hash"]][0]:
            best[rec["genome_hash"]] = (rec["reward"], order, rec["id"])
    oracle = sorted(best.values(), key=lambda t: (-t[0], t[1]))
    for k in (1, 250, 10_000):
        board = select_top_k(results, k)
        assert board.ids() == [t[2] for t in oracle[:k]]
        assert len(board) == min(k, len(best))


def test_top_k_tie_break_and_errors():
    results = [{"id": i, "genome_hash": f"h{i}", "reward": 0.5} for i in range(4)]
    assert select_top_k(results, 2).ids() == [0, 1]
    assert select_top_k(results, 10).ids() == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        select_top_k(results, 0)
    with pytest.raises(ValueError):
        select_top_k([], 3)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.integers(1, 80))
@settings(max_examples=50, deadline=None)
def test_top_k_sorted_and_bounded(rewards, k):
    board = select_top_k([{"id": i, "genome_hash": str(i), "reward": r} for i, r in enumerate(rewards)], k)
    assert len(board) == min(k, len(rewards))
    assert board.rewards() == sorted(board.rewards(), reverse=True)


# -- protocol and pools -------------------------------------------------------


def _work(i, **extra):
    arch = G.sample_uniform(5, i)
    return {"id": i, "attempt": 0, "genome": G.to_dict(arch), "seed": 100 + i,
            "evaluator": {"kind": "surrogate"}, **extra}


@given(st.dictionaries(st.text(max_size=8), st.integers() | st.text(max_size=20), max_size=6))
@settings(max_examples=50)
def test_framing_round_trip(payload):
    msg = message(WORK, payload)
    buf = io.BytesIO(encode_message(msg) * 2)
    assert read_message(buf) == msg
    assert read_message(buf) == msg
    assert read_message(buf) is None


def test_framing_errors():
    frame = encode_message(message(RESULT, {"id": 1}))
    with pytest.raises(ProtocolError):
        read_message(io.BytesIO(frame[:-3]))
    with pytest.raises(ProtocolError):
        decode_message(b'{"type": "bogus", "payload": {}}')
    with pytest.raises(ProtocolError):
        message("bogus")
    assert frame[:4] == len(frame[4:]).to_bytes(4, "big")


def test_run_worker_over_pipes():
    inbox = io.BytesIO()
    for i in range(3):
        write_message(inbox, message(WORK, _work(i)))
    write_message(inbox, message(WORK, _work(9, inject_fault=True)))
    write_message(inbox, message(SHUTDOWN))
    inbox.seek(0)
    out = io.BytesIO()
    assert run_worker(inbox, out, exit_on_fault=False) == 4
    out.seek(0)
    replies = [read_message(out) for _ in range(4)]
    assert [m["type"] for m in replies] == [RESULT, RESULT, RESULT, FAILURE]
    assert [m["payload"]["id"] for m in replies] == [0, 1, 2, 9]
    assert replies[0]["payload"]["reward"] == handle_work(_work(0))["reward"]


def test_thread_pool_respawns_after_death():
    pool = ThreadPool(2)
    try:
        pool.submit(_work(0, inject_fault=True))
        pool.submit(_work(1))
        pool.submit(_work(2))
        got = sorted((m["type"], m["payload"]["id"]) for m in (pool.get() for _ in range(3)))
        assert got == [(FAILURE, 0), (RESULT, 1), (RESULT, 2)]
        assert pool.deaths == 1 and len(pool._threads) == 3
        pool.submit(_work(3))
        pool.submit(_work(4))
        assert sorted(pool.get()["payload"]["id"] for _ in range(2)) == [3, 4]
    finally:
        pool.close()


def test_process_pool_matches_threads():
    pool = ProcessPool(2)
    try:
        for i in range(4):
            pool.submit(_work(i))
        pool.submit(_work(5, inject_fault=True))
        got = {m["payload"]["id"]: m for m in (pool.get() for _ in range(5))}
        assert got[5]["type"] == FAILURE and pool.deaths == 1
        for i in range(4):
            assert got[i]["payload"]["reward"] == handle_work(_work(i))["reward"]
        pool.submit(_work(6))  # the replacement process keeps serving
        assert pool.get()["payload"]["id"] == 6
    finally:
        pool.close()


def test_process_transport_run_matches_thread_run():
    cfg = _cfg(40, workers=3)
    threads = run_search(cfg)
    procs = run_search(cfg.replace("search", transport="process", fault_rate=0.1))
    ref = run_search(cfg.replace("search", fault_rate=0.1))
    assert [r["id"] for r in procs.completed] == list(range(40))
    assert _timeless(procs.completed) == _timeless(ref.completed)
    for a, b in zip(threads.completed, procs.completed):
        assert b["lost"] or a["reward"] == b["reward"]


# -- comparison -----------------------------------------------------------------


def test_running_curves_oracle():
    rng = np.random.default_rng(3)
    rewards = rng.random(60)
    curves = running_curves(rewards)
    for n in (1, 4, 5, 24, 25, 60):
        top = np.sort(rewards[:n])[::-1]
        np.testing.assert_allclose(curves[n - 1], [top[0], top[:5].mean(), top[:25].mean()])


def test_constant_evaluator_gives_identical_flat_curves(tmp_path):
    base = RunConfig().replace("search", evaluator="constant", constant_reward=0.4, workers=2)
    report = compare_rl_vs_rs(60, [0, 1], base)
    assert len(report.rows) == 2 * 2 * 60
    for seed in (0, 1):
        rl = [r for r in report.rows if r["arm"] == "rl" and r["seed"] == seed]
        rs = [r for r in report.rows if r["arm"] == "rs" and r["seed"] == seed]
        curve = [(r["best"], r["top5_mean"], r["top25_mean"]) for r in rl]
        assert curve == [(r["best"], r["top5_mean"], r["top25_mean"]) for r in rs]
        np.testing.assert_allclose(curve, 0.4, rtol=1e-12)
    per_seed, agg = report.write(tmp_path)
    assert per_seed.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(agg.read_text().splitlines()) == 1 + 2 * 60


def test_compare_requires_a_seed():
    with pytest.raises(ValueError):
        compare_rl_vs_rs(20, [])
