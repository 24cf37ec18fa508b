"""One human-readable INI document holding every knob of a run.

Sections map onto the dataclasses of the individual modules. Unknown sections
or keys are rejected, and ``to_text`` writes the fully resolved configuration
(defaults applied) so a run directory records exactly what ran.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cellgraph import CompileError, MacroSpec
from .childtrainer.data import SyntheticDataset
from .childtrainer.train import TrainConfig
from .controller import RLConfig

EVALUATORS = ("surrogate", "micro", "constant")
TRANSPORTS = ("thread", "process")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class SearchConfig:
    num_blocks: int = 5
    budget: int = 20_000
    workers: int = 4
    seed: int = 0
    evaluator: str = "surrogate"
    top_k: int = 250
    max_retries: int = 2
    fault_rate: float = 0.0
    transport: str = "thread"
    constant_reward: float = 0.5

    def __post_init__(self) -> None:
        if self.num_blocks < 1 or self.budget < 1 or self.workers < 1 or self.top_k < 1 or self.max_retries < 0:
            raise ValueError("num_blocks, budget, workers and top_k must be >= 1; max_retries >= 0")
        if self.evaluator not in EVALUATORS:
            raise ValueError(f"evaluator must be one of {EVALUATORS}, got {self.evaluator!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if not 0.0 <= self.fault_rate < 1.0:
            raise ValueError(f"fault_rate must be in [0, 1), got {self.fault_rate}")
        if not 0.0 <= self.constant_reward <= 1.0:
            raise ValueError("constant_reward must be in [0, 1]")


# defaults used during search: two cell repeats, a small penultimate width
_SEARCH_MACRO = MacroSpec(cell_repeats=2, penultimate_filters=32)


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    controller: RLConfig = field(default_factory=RLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: SyntheticDataset = field(default_factory=SyntheticDataset)
    macro: MacroSpec = _SEARCH_MACRO

    def replace(self, section: str, **changes) -> "RunConfig":
        try:
            updated = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError, CompileError) as exc:
            raise ConfigError(f"[{section}] {exc}", next(iter(changes), None)) from None
        return dataclasses.replace(self, **{section: updated})

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                lines.append(f"{f.name} = {'none' if value is None else value}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = ("search", "controller", "train", "dataset", "macro")


def _base_type(annotation):
    if isinstance(annotation, str):
        annotation = {"int": int, "float": float, "str": str, "bool": bool}.get(annotation.split("|")[0].strip(), str)
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        return args[0], True
    return annotation, False


def _convert(raw: str, annotation, section: str, key: str):
    base, optional = _base_type(annotation)
    text = raw.strip()
    if optional and text.lower() == "none":
        return None
    try:
        if base is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if base is int:
            return int(text.replace("_", ""))
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {base.__name__}", key) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base or RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
        obj = getattr(cfg, section)
        hints = typing.get_type_hints(type(obj))
        names = {f.name for f in dataclasses.fields(obj)}
        changes = {}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]", key)
            changes[key] = _convert(raw, hints[key], section, key)
        if changes:
            cfg = cfg.replace(section, **changes)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
