"""Top-K selection over the completed-results log."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping


@dataclass(frozen=True)
class LeaderEntry:
    id: int
    genome_hash: str
    reward: float
    order: int  # position in the completion log

    def as_dict(self) -> dict:
        return {"id": self.id, "genome_hash": self.genome_hash, "reward": self.reward, "order": self.order}


@dataclass(frozen=True)
class Leaderboard:
    k: int
    entries: tuple[LeaderEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def rewards(self) -> list[float]:
        return [e.reward for e in self.entries]

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]


def select_top_k(results: Iterable[Mapping], k: int) -> Leaderboard:
    """The ``k`` best unique genomes, ordered by reward then earlier completion.

    ``results`` are log records in completion order with ``id``,
    ``genome_hash`` and ``reward``. A genome sampled more than once is
    represented by its best-scoring (then earliest) evaluation.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    best: dict[str, LeaderEntry] = {}
    n = 0
    for order, rec in enumerate(results):
        n += 1
        entry = LeaderEntry(int(rec["id"]), str(rec["genome_hash"]), float(rec["reward"]), order)
        cur = best.get(entry.genome_hash)
        if cur is None or entry.reward > cur.reward:
            best[entry.genome_hash] = entry
    if n == 0:
        raise ValueError("select_top_k needs at least one result")
    ranked = sorted(best.values(), key=lambda e: (-e.reward, e.order))
    return Leaderboard(k, tuple(ranked[:k]))
