"""Define-by-run tape and the tensor type it records.

A :class:`Tape` is an ordered list of primitive applications. Every
:class:`Tensor` produced while at least one operand is bound to a tape is
appended to that tape, so the node order is a topological order by
construction. Tensors without a tape are constants: operations on constants
are evaluated eagerly and nothing is recorded, which lets the same model code
run both as a plain numeric evaluation and as a differentiable one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NumericalError(ArithmeticError):
    """A primitive was asked to produce a non-representable result."""


class TapeError(RuntimeError):
    """Operands are bound to different tapes, or a root is not scalar."""


@dataclass(frozen=True)
class Primitive:
    """A differentiable primitive.

    ``forward(*values, **params)`` returns the result array.
    ``vjp(g, out, *values, **params)`` returns one cotangent per operand
    (``None`` when an operand has no gradient contribution).
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray | None]]


@dataclass
class Node:
    primitive: Primitive
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    params: dict


class Tape:
    """Ordered record of primitive applications for one backward sweep."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """Bind ``value`` to this tape as a differentiable input."""
        t = Tensor(value, tape=self, name=name)
        self.leaves.append(t)
        return t

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: "Tensor") -> "GradientMap":
        return backward(self, root)


class Tensor:
    """Dense float64 array, optionally bound to a :class:`Tape`."""

    __slots__ = ("value", "tape", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __len__(self) -> int:
        return self.value.shape[0]

    def __repr__(self) -> str:
        bound = "bound" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {bound}, value={self.value!r})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __truediv__(self, other):
        return record("div", [self, other])

    def __rtruediv__(self, other):
        return record("div", [other, self])

    def __neg__(self):
        return record("neg", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __rmatmul__(self, other):
        return record("matmul", [other, self])

    def __pow__(self, exponent):
        if exponent != 2:
            raise ValueError("only squaring is supported; use exp/log for general powers")
        return record("square", [self])

    def __getitem__(self, index):
        return record("getitem", [self], index=index)

    # -- method forms of common primitives --------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", [self], axes=tuple(axes) if axes else None)

    @property
    def T(self):
        return self.transpose()

    def exp(self):
        return record("exp", [self])

    def log(self):
        return record("log", [self])

    def tanh(self):
        return record("tanh", [self])

    def sigmoid(self):
        return record("sigmoid", [self])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


_REGISTRY: dict[str, Primitive] = {}


def register(primitive: Primitive) -> Primitive:
    _REGISTRY[primitive.name] = primitive
    return primitive


def get_primitive(op: str | Primitive) -> Primitive:
    if isinstance(op, Primitive):
        return op
    try:
        return _REGISTRY[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}; known: {sorted(_REGISTRY)}") from None


def primitives() -> list[str]:
    return sorted(_REGISTRY)


def _common_tape(inputs: Iterable[Tensor], opname: str) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError(f"{opname}: operands are bound to different tapes")
    return tape


def record(op: str | Primitive, inputs: Sequence, **params) -> Tensor:
    """Apply a primitive to ``inputs`` and append the application to their tape.

    Non-tensor inputs (scalars, arrays) are treated as constants. When no
    input is bound to a tape the result is a constant and nothing is recorded.
    """
    prim = get_primitive(op)
    tensors = tuple(as_tensor(x) for x in inputs)
    tape = _common_tape(tensors, prim.name)
    try:
        out_value = prim.forward(*(t.value for t in tensors), **params)
    except ShapeError:
        raise
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{prim.name}: incompatible operand shapes {shapes} ({exc})") from exc
    out = Tensor(out_value, tape=tape)
    if tape is not None:
        tape.nodes.append(Node(prim, tensors, out, params))
    return out


class GradientMap(dict):
    """Mapping from leaf tensors to gradient arrays."""

    def by_name(self) -> dict[str, np.ndarray]:
        out = {}
        for leaf, g in self.items():
            if leaf.name is None:
                raise ValueError("by_name() requires every leaf to be named")
            out[leaf.name] = g
        return out


def backward(tape: Tape, root: Tensor) -> GradientMap:
    """Reverse sweep over ``tape`` from the scalar ``root``.

    Returns the gradient of ``root`` with respect to every leaf of the tape;
    leaves the root does not depend on get zero arrays. The tape itself is not
    modified, so repeated sweeps return identical results.
    """
    if root.tape is not tape:
        raise TapeError("root is not bound to this tape")
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.primitive.vjp(
            g, node.output.value, *(t.value for t in node.inputs), **node.params
        )
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or t.tape is not tape:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = GradientMap()
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        result[leaf] = np.zeros_like(leaf.value) if g is None else np.broadcast_to(g, leaf.shape).copy()
    return result


def merge_gradients(maps: Iterable[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum name-keyed gradient maps from independent tapes elementwise."""
    total: dict[str, np.ndarray] = {}
    for m in maps:
        for name, g in m.items():
            total[name] = total[name] + g if name in total else np.array(g, copy=True)
    return dict(sorted(total.items()))
