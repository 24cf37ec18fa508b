"""Tensor values and the gradient tape.

Ops executed while a :class:`Tape` is active append a record to it whenever at
least one input requires a gradient. ``Tape.backward`` walks the records in
exact reverse order, so no separate topological sort is needed.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = np.float32
_debug = False


class ShapeError(ValueError):
    """Incompatible operand shapes; the message names the op."""


class TapeError(RuntimeError):
    """Invalid use of a tape (for example backward before any forward)."""


def get_dtype() -> type:
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


def set_dtype(dtype) -> None:
    """Set the float type for new tensors on this thread (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the tensor float type, e.g. ``precision("float64")`` for gradient checks."""
    old = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def set_debug(enabled: bool) -> None:
    """When enabled, every recorded forward op asserts its outputs are finite."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    outputs: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]
    vjp: Callable[..., Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Records differentiable ops executed on this thread while entered."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-mode pass from a scalar ``loss``.

        Returns gradients for every leaf tensor with ``requires_grad`` that the
        loss depends on; the same arrays are stored on ``tensor.grad``.
        """
        if not self.records:
            raise TapeError("backward called before any forward op was recorded")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(t) for rec in self.records for t in rec.outputs}
        if id(loss) not in produced:
            raise TapeError("loss was not produced by an op recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            out_grads = [grads.pop(id(t), None) for t in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                np.zeros_like(t.data) if g is None else g for t, g in zip(rec.outputs, out_grads)
            ]
            in_grads = rec.vjp(*out_grads)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {g.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if id(inp) not in produced:
                    leaves[key] = inp

        result: dict[Tensor, np.ndarray] = {}
        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            tensor.grad = g
            result[tensor] = g
        return result


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Run ops without recording onto any active tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def record(op: str, outputs: Sequence[Tensor], inputs: Sequence[Tensor], vjp) -> None:
    if _debug:
        for out in outputs:
            if not np.all(np.isfinite(out.data)):
                raise FloatingPointError(f"{op}: non-finite output")
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape.records.append(_Record(tuple(outputs), tuple(inputs), vjp, op))
