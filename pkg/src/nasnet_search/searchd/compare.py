"""Matched-budget comparison of a learned controller against random search."""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..config import RunConfig
from .run import run_search

CSV_COLUMNS = ("arm", "seed", "samples", "best", "top5_mean", "top25_mean")


def running_curves(rewards: Sequence[float]) -> np.ndarray:
    """``(N, 3)`` array of best, top-5 mean and top-25 mean after each sample.

    Before 5 (or 25) samples exist, the mean runs over all samples so far.
    """
    ranked: list[float] = []  # ascending
    out = np.zeros((len(rewards), 3))
    for i, r in enumerate(rewards):
        bisect.insort(ranked, float(r))
        out[i] = ranked[-1], np.mean(ranked[-5:]), np.mean(ranked[-25:])
    return out


@dataclass
class ComparisonReport:
    rows: list[dict]
    seeds: list[int]
    budget: int
    rl_algorithm: str

    def final(self, arm: str, seed: int) -> dict:
        return next(r for r in self.rows if r["arm"] == arm and r["seed"] == seed and r["samples"] == self.budget)

    def aggregate(self) -> list[dict]:
        """Per arm and sample count, means over seeds."""
        out = []
        for arm in ("rl", "rs"):
            table = np.array(
                [[r["best"], r["top5_mean"], r["top25_mean"]] for r in self.rows if r["arm"] == arm]
            ).reshape(len(self.seeds), self.budget, 3)
            mean = table.mean(axis=0)
            for n in range(self.budget):
                out.append({"arm": arm, "seed": "mean", "samples": n + 1, "best": float(mean[n, 0]),
                            "top5_mean": float(mean[n, 1]), "top25_mean": float(mean[n, 2])})
        return out

    def summary(self) -> dict:
        wins_top25 = wins_best = 0
        per_seed = []
        for s in self.seeds:
            rl, rs = self.final("rl", s), self.final("rs", s)
            wins_top25 += rl["top25_mean"] > rs["top25_mean"]
            wins_best += rl["best"] >= rs["best"]
            per_seed.append({"seed": s, "rl_best": rl["best"], "rs_best": rs["best"],
                             "rl_top25": rl["top25_mean"], "rs_top25": rs["top25_mean"]})
        agg = {r["arm"]: r for r in self.aggregate() if r["samples"] == self.budget}
        return {
            "seeds": len(self.seeds),
            "budget": self.budget,
            "rl_top25_wins": wins_top25,
            "rl_best_not_worse": wins_best,
            "mean_final": {arm: {k: agg[arm][k] for k in ("best", "top5_mean", "top25_mean")} for arm in agg},
            "per_seed": per_seed,
        }

    def to_csv(self, rows: list[dict] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows if rows is not None else self.rows:
            writer.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        per_seed = out_dir / "comparison.csv"
        agg = out_dir / "comparison_mean.csv"
        per_seed.write_text(self.to_csv())
        agg.write_text(self.to_csv(self.aggregate()))
        return per_seed, agg


def compare_rl_vs_rs(budget: int, seeds: Sequence[int], base: RunConfig | None = None,
                     progress=None) -> ComparisonReport:
    """Run the RL arm (``base.controller.algorithm``, ppo unless set) and random search per seed."""
    if not seeds:
        raise ValueError("compare_rl_vs_rs needs at least one seed")
    base = base or RunConfig()
    algo = base.controller.algorithm if base.controller.algorithm != "random" else "ppo"
    rows = []
    for seed in seeds:
        for arm, algorithm in (("rl", algo), ("rs", "random")):
            cfg = replace(
                base,
                search=replace(base.search, budget=budget, seed=seed),
                controller=replace(base.controller, algorithm=algorithm),
            )
            state = run_search(cfg)
            curves = running_curves([r["reward"] for r in state.completed])
            for n, (best, top5, top25) in enumerate(curves, start=1):
                rows.append({"arm": arm, "seed": seed, "samples": n, "best": float(best),
                             "top5_mean": float(top5), "top25_mean": float(top25)})
            if progress is not None:
                progress({"arm": arm, "seed": seed, "best": float(curves[-1, 0]), "top25": float(curves[-1, 2])})
    return ComparisonReport(rows, list(seeds), budget, algo)
