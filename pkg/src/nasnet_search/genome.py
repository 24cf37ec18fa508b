"""Discrete cell genomes for the NASNet search space.

A cell is ``B`` blocks; each block is five decisions::

    step 1  input_a   hidden-state index in [0, k+2)
    step 2  input_b   hidden-state index in [0, k+2)
    step 3  op_a      one of the 13 operations
    step 4  op_b      one of the 13 operations
    step 5  combiner  add | concat

Hidden-state indices: 0 is h_{i-1}, 1 is h_i, 2+j is the output of block j.
An architecture is a Normal cell followed by a Reduction cell, so it is
``2 * 5B`` decisions in total.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

FORMAT_VERSION = 1
STEPS_PER_BLOCK = 5


class GenomeError(ValueError):
    """Raised for invalid decision sequences and malformed genome documents."""


class Operation(str, enum.Enum):
    IDENTITY = "identity"
    CONV_1X3_3X1 = "conv_1x3_3x1"
    CONV_1X7_7X1 = "conv_1x7_7x1"
    DILATED_CONV_3X3 = "dilated_conv_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    MAX_POOL_5X5 = "max_pool_5x5"
    MAX_POOL_7X7 = "max_pool_7x7"
    CONV_1X1 = "conv_1x1"
    CONV_3X3 = "conv_3x3"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    SEP_CONV_7X7 = "sep_conv_7x7"

    @property
    def is_separable(self) -> bool:
        return self.value.startswith("sep_conv")

    @property
    def is_pool(self) -> bool:
        return "pool" in self.value


class Combiner(str, enum.Enum):
    ADD = "add"
    CONCAT = "concat"


OPERATIONS: tuple[Operation, ...] = tuple(Operation)
COMBINERS: tuple[Combiner, ...] = tuple(Combiner)
NUM_OPERATIONS = len(OPERATIONS)

# decision step types, shared with the controller's embedding tables
STEP_TYPES = ("input", "input", "op", "op", "combiner")


@dataclass(frozen=True)
class BlockSpec:
    input_a: int
    input_b: int
    op_a: Operation
    op_b: Operation
    combiner: Combiner

    def validate(self, block_index: int) -> None:
        limit = block_index + 2
        for name, value in (("input_a", self.input_a), ("input_b", self.input_b)):
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise GenomeError(f"block {block_index}: {name} must be an integer, got {value!r}")
            if not 0 <= value < limit:
                raise GenomeError(
                    f"block {block_index}: {name}={value} outside hidden-state domain [0, {limit})"
                )
        if not isinstance(self.op_a, Operation) or not isinstance(self.op_b, Operation):
            raise GenomeError(f"block {block_index}: operations must be Operation members")
        if not isinstance(self.combiner, Combiner):
            raise GenomeError(f"block {block_index}: combiner must be a Combiner member")


@dataclass(frozen=True)
class CellGenome:
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.blocks) < 1:
            raise GenomeError("a cell needs at least one block")
        for k, block in enumerate(self.blocks):
            block.validate(k)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def consumed_states(self) -> set[int]:
        """Hidden-state indices read by at least one block."""
        used: set[int] = set()
        for block in self.blocks:
            used.add(block.input_a)
            used.add(block.input_b)
        return used

    def unused_blocks(self) -> list[int]:
        """Block indices whose output no later block consumes (these form the cell output)."""
        used = self.consumed_states()
        return [k for k in range(self.num_blocks) if k + 2 not in used]

    def depth(self) -> int:
        """Longest chain of blocks, counting cell inputs as depth 0."""
        depths = [0, 0]
        for block in self.blocks:
            depths.append(1 + max(depths[block.input_a], depths[block.input_b]))
        return max(depths[2:])


@dataclass(frozen=True)
class ArchitectureGenome:
    normal: CellGenome
    reduction: CellGenome

    def __post_init__(self) -> None:
        if self.normal.num_blocks != self.reduction.num_blocks:
            raise GenomeError(
                f"block-count mismatch: normal has {self.normal.num_blocks}, "
                f"reduction has {self.reduction.num_blocks}"
            )

    @property
    def num_blocks(self) -> int:
        return self.normal.num_blocks

    def cells(self) -> tuple[CellGenome, CellGenome]:
        return self.normal, self.reduction

    def genome_hash(self) -> str:
        """Stable short content hash, used as an identity in run logs."""
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()[:16]


def decision_domains(num_blocks: int) -> list[int]:
    """Domain sizes of the ``5 * num_blocks`` decisions of one cell."""
    if isinstance(num_blocks, bool) or not isinstance(num_blocks, (int, np.integer)):
        raise GenomeError(f"num_blocks must be an integer, got {num_blocks!r}")
    if num_blocks < 1:
        raise GenomeError(f"num_blocks must be >= 1, got {num_blocks}")
    domains: list[int] = []
    for k in range(num_blocks):
        domains += [k + 2, k + 2, NUM_OPERATIONS, NUM_OPERATIONS, len(COMBINERS)]
    return domains


def architecture_domains(num_blocks: int) -> list[int]:
    """Domain sizes for a full architecture: normal cell then reduction cell."""
    return decision_domains(num_blocks) * 2


def architecture_step_types(num_blocks: int) -> list[str]:
    return list(STEP_TYPES) * (2 * num_blocks)


def _encode_cell(cell: CellGenome) -> list[int]:
    out: list[int] = []
    for b in cell.blocks:
        out += [
            int(b.input_a),
            int(b.input_b),
            OPERATIONS.index(b.op_a),
            OPERATIONS.index(b.op_b),
            COMBINERS.index(b.combiner),
        ]
    return out


def encode(genome: ArchitectureGenome) -> list[int]:
    """Flatten a genome into its ``2 * 5B`` decision integers."""
    return _encode_cell(genome.normal) + _encode_cell(genome.reduction)


def validate_decisions(seq: Sequence[int], num_blocks: int) -> None:
    domains = architecture_domains(num_blocks)
    if len(seq) != len(domains):
        raise GenomeError(
            f"decision sequence has length {len(seq)}, expected {len(domains)} for B={num_blocks}"
        )
    for pos, (value, size) in enumerate(zip(seq, domains)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise GenomeError(f"position {pos}: value {value!r} is not an integer")
        if not 0 <= value < size:
            raise GenomeError(f"position {pos}: value {value} outside domain [0, {size})")


def _decode_cell(values: Sequence[int]) -> CellGenome:
    blocks = []
    for k in range(len(values) // STEPS_PER_BLOCK):
        a, b, oa, ob, comb = values[k * STEPS_PER_BLOCK : (k + 1) * STEPS_PER_BLOCK]
        blocks.append(BlockSpec(int(a), int(b), OPERATIONS[oa], OPERATIONS[ob], COMBINERS[comb]))
    return CellGenome(tuple(blocks))


def decode(seq: Sequence[int], num_blocks: int) -> ArchitectureGenome:
    """Inverse of :func:`encode`; the first half of ``seq`` is the Normal cell."""
    validate_decisions(seq, num_blocks)
    half = STEPS_PER_BLOCK * num_blocks
    return ArchitectureGenome(_decode_cell(seq[:half]), _decode_cell(seq[half:]))


def _as_generator(rng: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_decisions(num_blocks: int, rng: int | np.random.Generator | None) -> list[int]:
    gen = _as_generator(rng)
    return [int(gen.integers(size)) for size in architecture_domains(num_blocks)]


def sample_uniform(num_blocks: int, rng_seed: int | np.random.Generator | None) -> ArchitectureGenome:
    """Draw every decision independently and uniformly over its domain.

    ``rng_seed`` may be an int seed or a ``numpy.random.Generator`` whose state
    is advanced in place.
    """
    return decode(sample_decisions(num_blocks, rng_seed), num_blocks)


# --- canonical text form ------------------------------------------------------

_BLOCK_KEYS = ("input_a", "input_b", "op_a", "op_b", "combiner")
_TOP_KEYS = ("version", "num_blocks", "normal", "reduction")


def to_dict(genome: ArchitectureGenome) -> dict[str, Any]:
    def cell_doc(cell: CellGenome) -> list[dict[str, Any]]:
        return [
            {
                "input_a": b.input_a,
                "input_b": b.input_b,
                "op_a": b.op_a.value,
                "op_b": b.op_b.value,
                "combiner": b.combiner.value,
            }
            for b in cell.blocks
        ]

    return {
        "version": FORMAT_VERSION,
        "num_blocks": genome.num_blocks,
        "normal": cell_doc(genome.normal),
        "reduction": cell_doc(genome.reduction),
    }


def serialize(genome: ArchitectureGenome) -> str:
    return json.dumps(to_dict(genome), separators=(",", ":"))


def _parse_cell(doc: Any, where: str) -> CellGenome:
    if not isinstance(doc, list):
        raise GenomeError(f"{where}: expected a list of blocks")
    blocks = []
    for k, bdoc in enumerate(doc):
        at = f"{where}[{k}]"
        if not isinstance(bdoc, dict):
            raise GenomeError(f"{at}: expected an object")
        extra = set(bdoc) - set(_BLOCK_KEYS)
        if extra:
            raise GenomeError(f"{at}: unknown keys {sorted(extra)}")
        missing = [key for key in _BLOCK_KEYS if key not in bdoc]
        if missing:
            raise GenomeError(f"{at}: missing keys {missing}")
        ops = []
        for key in ("op_a", "op_b"):
            try:
                ops.append(Operation(bdoc[key]))
            except ValueError:
                raise GenomeError(f"{at}.{key}: unknown operation {bdoc[key]!r}") from None
        try:
            combiner = Combiner(bdoc["combiner"])
        except ValueError:
            raise GenomeError(f"{at}.combiner: unknown combiner {bdoc['combiner']!r}") from None
        block = BlockSpec(bdoc["input_a"], bdoc["input_b"], ops[0], ops[1], combiner)
        try:
            block.validate(k)
        except GenomeError as exc:
            raise GenomeError(f"{at}: {exc}") from None
        blocks.append(block)
    if not blocks:
        raise GenomeError(f"{where}: a cell needs at least one block")
    return CellGenome(tuple(blocks))


def from_dict(doc: Any) -> ArchitectureGenome:
    if not isinstance(doc, dict):
        raise GenomeError("genome document must be an object")
    extra = set(doc) - set(_TOP_KEYS)
    if extra:
        raise GenomeError(f"unknown keys {sorted(extra)}")
    missing = [key for key in _TOP_KEYS if key not in doc]
    if missing:
        raise GenomeError(f"missing keys {missing}")
    if doc["version"] != FORMAT_VERSION:
        raise GenomeError(f"unsupported genome format version {doc['version']!r}")
    num_blocks = doc["num_blocks"]
    if isinstance(num_blocks, bool) or not isinstance(num_blocks, int) or num_blocks < 1:
        raise GenomeError(f"num_blocks must be a positive integer, got {num_blocks!r}")
    normal = _parse_cell(doc["normal"], "normal")
    reduction = _parse_cell(doc["reduction"], "reduction")
    if normal.num_blocks != reduction.num_blocks:
        raise GenomeError(
            f"block-count mismatch: normal has {normal.num_blocks}, reduction has {reduction.num_blocks}"
        )
    if normal.num_blocks != num_blocks:
        raise GenomeError(
            f"block-count mismatch: num_blocks={num_blocks} but cells have {normal.num_blocks}"
        )
    return ArchitectureGenome(normal, reduction)


def parse(text: str) -> ArchitectureGenome:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeError(f"malformed genome document at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(doc)


def load(path) -> ArchitectureGenome:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def save(genome: ArchitectureGenome, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(to_dict(genome), indent=2))
        fh.write("\n")
