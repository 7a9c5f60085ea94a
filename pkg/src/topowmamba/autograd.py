"""Dense tensors and a tape for reverse-mode differentiation.

Every differentiable operation goes through :func:`record`, which appends a
node to the active :class:`Tape`. Nothing is recorded outside a ``with Tape()``
block, so plain inference never builds a graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, reuse, or recording after backward."""


class Tensor:
    """Value/gradient pair over a C-contiguous numpy array."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        # True when the tensor is the output of a recorded node.
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
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

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the functions live in ops to keep the op set in one place
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; usable for exactly one backward pass."""

    nodes: list[Node] = field(default_factory=list)
    used: bool = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def append(self, node: Node) -> None:
        if self.used:
            raise TapeError("tape already consumed by backward(); record a new one")
        self.nodes.append(node)

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] | None = None):
        return backward(loss, self, inputs)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_record:
    """Temporarily suspend recording, e.g. for finite-difference probes."""

    def __enter__(self):
        self._saved = list(_TAPE_STACK)
        _TAPE_STACK.clear()

    def __exit__(self, *exc):
        _TAPE_STACK.extend(self._saved)


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` in a Tensor and, if a tape is active, log how to differentiate it.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    check_finite(out, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs, dtype=out.dtype)
    if needs:
        result._recorded = True
        tape.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape, inputs: Sequence[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) for every leaf the tape touched.

    Leaf gradients land in ``.grad``. When ``inputs`` is given, a list of their
    gradients is returned, with zeros for leaves the loss does not depend on.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.used:
        raise TapeError("backward() already ran on this tape")
    tape.used = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise TapeError(f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
            g = g.astype(t.dtype, copy=False)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if not t._recorded:
                leaves[key] = t

    if not loss._recorded and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.dtype)

    if inputs is None:
        return None
    out = []
    for t in inputs:
        g = grads.get(id(t)) if id(t) in leaves else None
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype))
    return out
