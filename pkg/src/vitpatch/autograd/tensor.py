"""Dense tensors with recorded-operation reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
Calling :meth:`Tensor.backward` builds a :class:`Tape` (a topological
ordering of the graph) and replays it in reverse.

Numeric precision is a process-wide setting rather than a per-tensor one:
``float32`` for training, ``float64`` for gradient checking.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}
_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def get_dtype() -> type:
    return _state["dtype"]


def get_precision() -> str:
    return np.dtype(_state["dtype"]).name


def set_precision(name: str) -> None:
    """Select the global numeric mode, ``"float32"`` or ``"float64"``."""
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; ops return plain constant tensors."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """An N-dimensional real array that can take part in differentiation.

    Attributes:
        data: row-major values in the current global precision.
        grad: accumulated gradient (same shape as ``data``) or ``None``.
        requires_grad: whether gradients should flow into this tensor.
        node_id: unique identity used to order nodes on a tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def backward(self, grad: Optional[np.ndarray] = None) -> "Tape":
        """Back-propagate from this tensor; scalar outputs default to a unit seed."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.backward(self, np.asarray(grad, dtype=self.data.dtype))
        return tape

    # Operator sugar; the implementations live in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output, recording the graph edge only when it is needed."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


class Tape:
    """Ordered record of the operations that produced an output tensor.

    ``nodes`` is topologically sorted: every op's inputs appear before it.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        # Iterative post-order DFS; deep transformer stacks overflow recursion.
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, seed: np.ndarray) -> list[int]:
        """Propagate ``seed`` from ``output``; returns node ids in visit order."""
        grads: dict[int, np.ndarray] = {output.node_id: seed}
        visited: list[int] = []
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            visited.append(node.node_id)
            if g is None:
                continue
            if node._backward is None:
                # Only leaves keep a gradient buffer; intermediates are transient.
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"op {node.op!r} produced gradient of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        return visited


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)
