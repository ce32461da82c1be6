"""Dense tensors and a reverse-mode gradient tape.

A :class:`Tensor` is a thin wrapper around a contiguous numpy array. Operations
in :mod:`bayesbeat.diffcore.ops` record themselves on the innermost active
:class:`GradTape` whenever at least one input requires a gradient; replaying
the tape with :func:`backward` produces gradients for every leaf.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(ops.square(x))
    grads = backward(loss, tape)
    grads[x]  # array([2., 4.], dtype=float32)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import TapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    """Row-major float array, optionally tracked for gradients.

    Storage defaults to float32. Passing ``dtype=np.float64`` is supported so
    finite-difference oracles can re-evaluate the same primitives in double
    precision.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: Sequence[Tensor]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered record of executed primitives, usable as a context manager.

    Tapes nest; operations record on the innermost active one. A tape can be
    replayed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def leaves(self) -> List[Tensor]:
        """Tensors requiring grad that were consumed but never produced here."""
        produced = {id(n.out) for n in self.nodes}
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _stack() -> List[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Attach ``out`` to the active tape if any input requires a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: GradTape,
             wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return ``d loss / d leaf``.

    The result maps each leaf tensor to a gradient array of the leaf's shape
    and dtype. Leaves listed in ``wrt`` (default: all leaves on the tape) that
    did not influence ``loss`` receive exact zeros.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward() call")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    targets = list(tape.leaves() if wrt is None else wrt)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.nodes = []

    result: Dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        result[t] = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    return result
