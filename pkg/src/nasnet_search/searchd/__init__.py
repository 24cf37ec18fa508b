"""Search orchestration: workqueue, worker pools, result log, leaderboard, RL-vs-RS comparison."""

from .compare import CSV_COLUMNS, ComparisonReport, compare_rl_vs_rs, running_curves
from .leaderboard import Leaderboard, LeaderEntry, select_top_k
from .protocol import ProtocolError, decode_message, encode_message, message, read_message, run_worker, write_message
from .run import (
    RunCorruptError,
    RunState,
    SearchAborted,
    WorkItem,
    read_log,
    resume,
    run_search,
    sample_minibatch,
)

__all__ = [name for name in dir() if not name.startswith("_")]
