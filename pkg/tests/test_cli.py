import csv
import json
import subprocess
import sys
import time

import pytest

from nasnet_search import cli
from nasnet_search import genome as G
from nasnet_search.searchd.run import CHECKPOINT_FILE, CONFIG_FILE, LEADERBOARD_FILE, RESULTS_LOG

SMALL_CHILD = """\
[dataset]
n_train = 200
n_val = 100
image_size = 8
[train]
epochs = 2
[macro]
cell_repeats = 1
penultimate_filters = 8
"""


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


@pytest.fixture
def genome_file(tmp_path):
    path = tmp_path / "g.json"
    G.save(G.sample_uniform(5, 3), path)
    return path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_search_writes_run_directory_quickly(out_root, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[search]\nworkers = 1\n")
    start = time.perf_counter()
    code, out, _ = _run(capsys, "search", "--config", cfg, "--evaluator", "surrogate", "--budget", 200)
    assert time.perf_counter() - start < 60
    assert code == 0
    run = out_root / "search-ppo-seed0"
    for name in (CONFIG_FILE, RESULTS_LOG, CHECKPOINT_FILE, LEADERBOARD_FILE):
        assert (run / name).exists()
    progress = [line for line in out.splitlines() if line.startswith("samples ")]
    assert len(progress) == 10
    assert "best" in progress[-1] and "baseline" in progress[-1]
    assert "budget = 200" in (run / CONFIG_FILE).read_text()


def test_search_is_deterministic(tmp_path, capsys):
    logs = []
    for name in ("a", "b"):
        code, _, _ = _run(capsys, "search", "--budget", 60, "--seed", 4, "--out", tmp_path / name, "--quiet")
        assert code == 0
        logs.append(json.loads((tmp_path / name / LEADERBOARD_FILE).read_text())["entries"])
    assert logs[0] == logs[1]


def test_random_algorithm_writes_no_checkpoint(tmp_path, capsys):
    code, _, _ = _run(capsys, "search", "--algorithm", "random", "--budget", 40, "--out", tmp_path / "r", "--quiet")
    assert code == 0
    assert not (tmp_path / "r" / CHECKPOINT_FILE).exists()
    assert (tmp_path / "r" / LEADERBOARD_FILE).exists()


def test_config_errors_exit_2_with_key(tmp_path, capsys):
    code, _, err = _run(capsys, "search", "--config", tmp_path / "missing.cfg")
    assert code == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[search]\nbudgte = 5\n")
    code, _, err = _run(capsys, "search", "--config", bad)
    assert code == 2 and "budgte" in err
    code, _, err = _run(capsys, "search", "--budget", 0, "--out", tmp_path / "x")
    assert code == 2 and "budget" in err


def test_usage_errors_exit_2(capsys, genome_file):
    with pytest.raises(SystemExit) as info:
        cli.main(["search", "--algorithm", "evolution"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2
    code, _, err = _run(capsys, "compile", genome_file, "--macro", "2x64")
    assert code == 2 and "macro" in err
    code, _, _ = _run(capsys, "compile", "/nonexistent/genome.json")
    assert code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    run = tmp_path / "run"
    assert _run(capsys, "search", "--budget", 40, "--out", run, "--quiet")[0] == 0
    assert _run(capsys, "search", "--budget", 40, "--out", run, "--quiet")[0] == 1  # already holds a run
    log = run / RESULTS_LOG
    log.write_bytes(log.read_bytes()[:-10])
    code, _, err = _run(capsys, "resume", run)
    assert code == 1 and "corrupt" in err


def test_resume_command(tmp_path, capsys):
    run = tmp_path / "run"
    assert _run(capsys, "search", "--budget", 40, "--out", run, "--quiet")[0] == 0
    before = (run / LEADERBOARD_FILE).read_text()
    code, out, _ = _run(capsys, "resume", run)
    assert code == 0 and "completed 40" in out
    assert (run / LEADERBOARD_FILE).read_text() == before


def test_compile_report_stages(capsys, genome_file):
    code, out, _ = _run(capsys, "compile", genome_file, "--macro", "2 @ 64", "--image-size", 32)
    assert code == 0
    stages = [line.split()[2] for line in out.splitlines() if line.startswith("stage")]
    assert stages == ["32x32", "16x16", "8x8"]
    code, out, _ = _run(capsys, "compile", genome_file, "--macro", "2@64", "--json")
    report = json.loads(out)
    assert [s["height"] for s in report["stages"]] == [32, 16, 8]
    assert report["total_params"] > 0


def test_compare_csv(tmp_path, capsys):
    code, out, _ = _run(capsys, "compare", "--budget", 40, "--seeds", "0,1", "--out", tmp_path / "cmp", "--quiet")
    assert code == 0
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert lines[0] == "arm,seed,samples,best,top5_mean,top25_mean"
    assert len(lines) == 1 + 2 * 2 * 40
    assert "rl top-25 mean above rs" in out


def test_train_child_curve_and_droppath(tmp_path, capsys, genome_file):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CHILD)
    rewards = {}
    for p in ("0", "0.3"):
        curve = tmp_path / f"curve{p}.csv"
        code, out, _ = _run(capsys, "train-child", genome_file, "--config", cfg, "--droppath", p, "--curve", curve)
        assert code == 0
        rows = list(csv.DictReader(curve.open()))
        assert [int(r["epoch"]) for r in rows] == [1, 2]
        assert float(rows[-1]["droppath"]) == pytest.approx(float(p))
        rewards[p] = json.loads(out.splitlines()[-3])["reward"]
    code, out, _ = _run(capsys, "train-child", genome_file, "--config", cfg, "--droppath", "0",
                        "--curve", tmp_path / "again.csv", "--quiet")
    assert json.loads(out.splitlines()[0])["reward"] == rewards["0"]


def test_train_child_divergence_exits_0(tmp_path, capsys, genome_file):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CHILD)
    code, out, _ = _run(capsys, "train-child", genome_file, "--config", cfg, "--lr", "1e30",
                        "--curve", tmp_path / "c.csv", "--quiet")
    assert code == 0
    rec = json.loads(out.splitlines()[0])
    assert rec["reward"] == 0.0 and rec["diverged"] is True
    assert "diverged" in out


def test_sample_genome(tmp_path, capsys):
    path = tmp_path / "g.json"
    assert _run(capsys, "sample-genome", "--seed", 5, "--out", path)[0] == 0
    assert G.load(path) == G.sample_uniform(5, 5)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nasnet_search", "search", "--budget", "20", "--out",
                           str(tmp_path / "run"), "--quiet"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "nasnet_search", "search", "--config", str(tmp_path / "nope")],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 2
