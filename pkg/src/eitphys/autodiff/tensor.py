"""Tensor type and the dynamic tape that records operations for reverse mode."""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from eitphys.errors import UsageError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported element type {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default element type (e.g. float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``data`` is a numpy array owned by the tensor; ops never modify it in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_id", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._id = next(_ids)
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from eitphys.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from eitphys.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from eitphys.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from eitphys.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from eitphys.autodiff import ops

        return ops.neg(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[[list[np.ndarray]], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as ops execute, so the list is topologically sorted.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward) -> None:
        index = len(self.nodes)
        for out in outputs:
            out.requires_grad = True
            out._is_leaf = False
            self._producer[out._id] = index
        self.nodes.append(Node(op, tuple(inputs), tuple(outputs), backward))

    def produces(self, tensor: Tensor) -> bool:
        return tensor._id in self._producer

    def clear(self) -> None:
        self.nodes.clear()
        self._producer.clear()


_default_tape = Tape()


def default_tape() -> Tape:
    return _default_tape


def record(op: str, inputs: Sequence, outputs: Sequence[Tensor], backward, tape: Tape | None = None) -> bool:
    """Record an op if grad mode is on and any input needs a gradient."""
    if not _grad_enabled:
        return False
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return False
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    (tape or _default_tape).record(op, tensors, outputs, backward)
    return True


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    The tape is consumed: a second call without a new forward pass raises UsageError.
    """
    tape = tape or _default_tape
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produces(loss):
        raise UsageError(
            "loss was not produced on this tape (tape already consumed or forward ran without grad)"
        )
    last = tape._producer[loss._id]
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: last + 1]):
        out_grads = [grads.pop(o._id, None) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, out_grads)]
        in_grads = node.backward(out_grads)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise AssertionError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            if inp._is_leaf:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            elif inp._id in grads:
                grads[inp._id] = grads[inp._id] + g
            else:
                grads[inp._id] = g
    tape.clear()
