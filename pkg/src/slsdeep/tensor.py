"""Dense tensor value type and the reverse-mode recording tape.

Tensors wrap a numpy array laid out as (N, C, H, W). Operators in
:mod:`slsdeep.ops` record a :class:`Node` on the active :class:`Tape`
whenever one of their inputs requires a gradient; ``Tape.backward`` then
replays the recorded nodes in reverse order.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "slsdeep_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


@dataclass
class Node:
    """One recorded operation: its inputs, its output and the backward rule.

    ``backward`` maps the upstream gradient of ``output`` to one gradient
    (or ``None``) per input.
    """

    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records operations for reverse-mode differentiation.

    Use as a context manager::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)

    A tape must be driven by a single logical thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> int:
        """Accumulate d(output)/d(leaf) into every reachable leaf's ``grad``.

        Returns the number of nodes visited. Without ``grad`` the output must
        hold a single element.
        """
        if grad is None:
            if output.data.size != 1:
                raise ShapeError(f"backward without an explicit gradient needs a scalar output, got {output.shape}")
            grad = np.ones_like(output.data)
        pending: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        if output.is_leaf and output.requires_grad:
            output._accumulate(pending[id(output)])
        visited = 0
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            visited += 1
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
        return visited

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward, name: str) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    out.is_leaf = False
    tape = _ACTIVE_TAPE.get()
    if requires and tape is not None:
        tape.record(Node(name, tuple(inputs), out, backward))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
