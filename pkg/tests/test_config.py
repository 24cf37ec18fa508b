import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasnet_search.cellgraph import MacroSpec
from nasnet_search.config import SECTIONS, ConfigError, RunConfig, load_config, parse_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.search.num_blocks == 5
    assert cfg.search.top_k == 250
    assert cfg.search.budget == 20_000
    assert cfg.search.max_retries == 2
    assert cfg.controller.learning_rate == 0.00035
    assert cfg.controller.entropy_weight == 1e-5
    assert cfg.controller.baseline_decay == 0.95
    assert cfg.controller.minibatch_size == 20
    assert cfg.controller.hidden_size == 100
    assert cfg.train.epochs == 20
    assert cfg.train.momentum == 0.9
    assert cfg.macro == MacroSpec(cell_repeats=2, penultimate_filters=32)


def test_round_trip_of_resolved_text():
    cfg = RunConfig().replace("search", budget=321, evaluator="micro").replace("train", schedule_epochs=20)
    text = cfg.to_text()
    assert parse_config(text) == cfg
    for section in SECTIONS:
        assert f"[{section}]" in text


@given(
    budget=st.integers(1, 10**6),
    seed=st.integers(0, 2**31),
    lr=st.floats(1e-6, 1.0),
    algorithm=st.sampled_from(["ppo", "reinforce", "random"]),
    droppath=st.floats(0.0, 0.99),
)
@settings(max_examples=40, deadline=None)
def test_round_trip_property(budget, seed, lr, algorithm, droppath):
    cfg = (
        RunConfig()
        .replace("search", budget=budget, seed=seed)
        .replace("controller", learning_rate=lr, algorithm=algorithm)
        .replace("train", droppath=droppath)
    )
    assert parse_config(cfg.to_text()) == cfg


def test_partial_document_keeps_defaults():
    cfg = parse_config("[search]\nbudget = 1_000\n[controller]\nalgorithm = reinforce\n")
    assert cfg.search.budget == 1000
    assert cfg.controller.algorithm == "reinforce"
    assert dataclasses.replace(cfg.search, budget=20_000) == RunConfig().search


@pytest.mark.parametrize(
    "text, key",
    [
        ("[search]\nbudgte = 5\n", "budgte"),
        ("[serch]\nbudget = 5\n", "serch"),
        ("[search]\nbudget = many\n", "budget"),
        ("[search]\nworkers = 0\n", "workers"),
        ("[controller]\nalgorithm = evolution\n", "algorithm"),
        ("[macro]\npenultimate_filters = 30\n", "penultimate_filters"),
        ("[train]\nschedule_epochs = soon\n", "schedule_epochs"),
    ],
)
def test_bad_keys_and_values_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key
    assert key in str(info.value)


def test_malformed_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config("budget = 3\n")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")
    path = tmp_path / "run.cfg"
    path.write_text("[search]\nseed = 9\n")
    assert load_config(path).search.seed == 9


def test_optional_fields_accept_none():
    cfg = parse_config("[train]\nschedule_epochs = none\n[macro]\nstem_filters = 12\n")
    assert cfg.train.schedule_epochs is None
    assert cfg.macro.stem_filters == 12
