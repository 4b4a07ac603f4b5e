"""Dense tensors with tape-based reverse-mode differentiation.

Ops are recorded only while a :class:`GradTape` is active and at least one
input is tracked (a leaf created with ``requires_grad=True`` or the output of a
recorded op). Outside a tape every op is a plain numpy computation, which keeps
inference cheap.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(matmul(x, w))
    grads = tape.backward(loss, [w])
    grads[w.node_id]
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_node_ids = itertools.count(1)
_active_tapes: list["GradTape"] = []
# op name -> multiplier applied to that op's input adjoints (fault-injection hook)
_adjoint_faults: dict[str, float] = {}

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

MASK_FILL_32 = -1e9


class Tensor:
    """An immutable dense array that can take part in a differentiation graph."""

    __slots__ = ("data", "node_id", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.node_id = next(_node_ids) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

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
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it on the active tape.

    ``backward_fn`` maps the output adjoint to one adjoint (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if _active_tapes and any(p.node_id is not None for p in parents):
        out.node_id = next(_node_ids)
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _active_tapes[-1].nodes.append(out)
    else:
        out.node_id = None
        out.parents = ()
        out.backward_fn = None
    return out


class GradTape:
    """Ordered record of executed ops; built fresh for every training step."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by node id.

        With ``wrt`` given, exactly those tensors are returned and the ones the
        loss does not reach get zeros. Otherwise every reached leaf is returned.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None:
            raise ContractError("loss is not on a differentiation tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            factor = _adjoint_faults.get(node.op)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent.node_id is None:
                    continue
                if factor is not None:
                    pg = pg * factor
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        if wrt is None:
            return grads
        out = {}
        for t in wrt:
            g = grads.get(t.node_id)
            out[t.node_id] = np.zeros_like(t.data) if g is None else g
        return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: GradTape | None = None) -> dict[int, np.ndarray]:
    """Backpropagate through ``tape`` (default: the innermost active tape)."""
    if tape is None:
        if not _active_tapes:
            raise ContractError("no active tape; pass one explicitly")
        tape = _active_tapes[-1]
    return tape.backward(loss, wrt)


@contextlib.contextmanager
def corrupt_adjoint(op: str, factor: float = 1.5):
    """Scale the adjoints produced by every ``op`` node (test hook for gradcheck)."""
    _adjoint_faults[op] = factor
    try:
        yield
    finally:
        _adjoint_faults.pop(op, None)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return make_op(ad @ bd, (a, b), grad, "matmul")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction.

    ``mask`` (True = allowed) broadcasts against ``a``. Masked entries come out
    exactly zero: they are set to -inf in 64-bit mode and shifted by -1e9 in
    32-bit mode.
    """
    x = a.data
    if mask is not None:
        if x.dtype == np.float64:
            x = np.where(mask, x, -np.inf)
        else:
            x = x + np.where(mask, 0.0, MASK_FILL_32).astype(x.dtype)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (a,), grad, "softmax")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat: no parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {p.shape} incompatible with {ref} on axis {axis}")
    if len(parts) == 1:
        return parts[0]
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def grad(g):
        return np.split(g, cuts, axis=ax)

    return make_op(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), grad, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    idx = (slice(None),) * ax + (slice(start, stop),)
    shape = a.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return make_op(a.data[idx], (a,), grad, "slice")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Inverse of :func:`concat`."""
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def grad(g):
        return (g.reshape(old),)

    return make_op(a.data.reshape(shape), (a,), grad, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def grad(g):
        return (g.transpose(inverse),)

    return make_op(a.data.transpose(axes), (a,), grad, "transpose")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup, row permutation)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(table.data[ids], (table,), grad, "take_rows")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return make_op(np.where(on, a.data, 0).astype(a.dtype), (a,), lambda g: (g * on,), "relu")


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    k = x.dtype.type(_GELU_K)
    c = x.dtype.type(_GELU_C)
    t = np.tanh(k * (x + c * (x * x * x)))
    y = 0.5 * x * (1 + t)

    def grad(g):
        dt = (1 - t * t) * k * (1 + 3 * c * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return make_op(y, (a,), grad, "gelu")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the one explicit broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last extent of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return make_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "gelu": gelu}


def elementwise(op: str, a: Tensor, b: Tensor | None = None, c: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul (binary); scale (needs ``c``); relu, gelu."""
    if op in _ELEMENTWISE:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op == "scale":
        if c is None:
            raise ContractError("scale needs a constant")
        return scale(a, c)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def dot_all(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) for a constant array ``w``; handy for projecting outputs to a scalar."""
    if a.shape != w.shape:
        raise DimensionError(f"dot_all: shapes {a.shape} and {w.shape} differ")
    w = w.astype(a.dtype, copy=False)
    return make_op(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,), "dot")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    ``indices`` restricts evaluation to those flat coordinates; the remaining
    entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)
