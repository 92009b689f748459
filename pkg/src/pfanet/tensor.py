"""Dense tensors and a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` on its output tensor. The node
names its op; the backward rule is looked up in :data:`BACKWARD` when the tape
is replayed, so rules can be swapped out (gradcheck uses this for fault
injection).
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_ids = itertools.count()
_grad_enabled = True

BACKWARD: dict[str, Callable] = {}


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside this block record nothing on the tape."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def register_backward(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn
    return deco


class Node:
    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op: str, inputs: tuple, saved: dict):
        self.op = op
        self.inputs = inputs
        self.saved = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "id", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.id = next(_ids)
        self._spent = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.id = next(_ids)
        t._spent = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    """Wrap ``data`` as the output of ``op``, recording a tape node if needed."""
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        out.node = Node(op, tuple(inputs), saved)
    return out


# -- tape -------------------------------------------------------------------


@dataclass(frozen=True)
class TapeEntry:
    output_id: int
    input_ids: tuple
    op: str | None


@dataclass
class Tape:
    """Recorded ops reachable from a root, in append (creation) order."""

    tensors: list
    entries: list

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.id in seen or not t.requires_grad:
                continue
            seen[t.id] = t
            if t.node is not None:
                stack.extend(t.node.inputs)
        tensors = [seen[k] for k in sorted(seen)]
        entries = [
            TapeEntry(t.id, tuple(i.id for i in t.node.inputs) if t.node else (),
                      t.node.op if t.node else None)
            for t in tensors
        ]
        return cls(tensors, entries)

    def leaves(self) -> list:
        return [t for t in self.tensors if t.node is None]


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor upstream of ``root`` that requires it.

    Running backward twice over the same graph, or into leaves whose gradients
    were not cleared, raises :class:`GradientError`.
    """
    if root.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("root does not require grad")
    if root._spent:
        raise GradientError("graph was already backpropagated")
    tape = Tape.from_root(root)
    for leaf in tape.leaves():
        if leaf.grad is not None:
            raise GradientError("leaf has a stale gradient; call zero_grad() first")

    grads = {root.id: np.ones_like(root.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        t.grad = g
        if t.node is None:
            continue
        in_grads = BACKWARD[t.node.op](g, t.node)
        for inp, gi in zip(t.node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise GradientError(
                    f"{t.node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    root._spent = True
    return tape


# -- elementwise ------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_inputs(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return make_op("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return make_op("sub", a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return make_op("mul", a.data * b.data, (a, b))


@register_backward("add")
def _add_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register_backward("sub")
def _sub_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register_backward("mul")
def _mul_bw(g, node):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def relu(x: Tensor) -> Tensor:
    return make_op("relu", np.maximum(x.data, 0), (x,))


@register_backward("relu")
def _relu_bw(g, node):
    (x,) = node.inputs
    return (g * (x.data > 0),)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # numerically stable on both tails
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_op("sigmoid", s, (x,), out=s)


@register_backward("sigmoid")
def _sigmoid_bw(g, node):
    s = node.saved["out"]
    return (g * s * (1 - s),)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_op("exp", e, (x,), out=e)


@register_backward("exp")
def _exp_bw(g, node):
    return (g * node.saved["out"],)


def log(x: Tensor) -> Tensor:
    return make_op("log", np.log(x.data), (x,))


@register_backward("log")
def _log_bw(g, node):
    return (g / node.inputs[0].data,)


def sqrt(x: Tensor) -> Tensor:
    """Square root whose derivative at exactly zero is defined as zero."""
    r = np.sqrt(x.data)
    return make_op("sqrt", r, (x,), out=r)


@register_backward("sqrt")
def _sqrt_bw(g, node):
    r = node.saved["out"]
    safe = np.where(r > 0, r, 1)
    return (np.where(r > 0, g / (2 * safe), 0).astype(g.dtype, copy=False),)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return make_op("clip", np.clip(x.data, lo, hi), (x,), lo=lo, hi=hi)


@register_backward("clip")
def _clip_bw(g, node):
    v = node.inputs[0].data
    inside = (v >= node.saved["lo"]) & (v <= node.saved["hi"])
    return (g * inside,)


# -- reductions -------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if not axes:
        raise ShapeError("reduction over an empty axis set")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated reduction axes {axes}")
    return axes


def _expand_like(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(x: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None).

    Max routes its gradient to the first maximal element, i.e. the lowest
    row-major index inside each reduced block.
    """
    if x.ndim == 0:
        raise ShapeError("cannot reduce a rank-0 tensor")
    axes = _norm_axes(axes, x.ndim)
    if kind == "sum":
        return make_op("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,),
                       axes=axes, keepdims=keepdims)
    if kind == "mean":
        return make_op("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,),
                       axes=axes, keepdims=keepdims)
    if kind == "max":
        kept = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.moveaxis(x.data, axes, tuple(range(-len(axes), 0)))
        flat = moved.reshape(tuple(x.shape[i] for i in kept) + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)
        return make_op("max", out, (x,), axes=axes, keepdims=keepdims, idx=idx,
                       moved_shape=moved.shape)
    raise ValueError(f"unknown reduction {kind!r}")


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axes, keepdims)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(x, "mean", axes, keepdims)


def max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, "max", axes, keepdims)


@register_backward("sum")
def _sum_bw(g, node):
    (x,) = node.inputs
    return (np.array(_expand_like(g, x.shape, node.saved["axes"], node.saved["keepdims"])),)


@register_backward("mean")
def _mean_bw(g, node):
    (x,) = node.inputs
    axes = node.saved["axes"]
    count = int(np.prod([x.shape[a] for a in axes]))
    return (_expand_like(g, x.shape, axes, node.saved["keepdims"]) / count,)


@register_backward("max")
def _max_bw(g, node):
    (x,) = node.inputs
    axes, idx = node.saved["axes"], node.saved["idx"]
    if node.saved["keepdims"]:
        g = np.squeeze(g, axis=axes)
    moved_shape = node.saved["moved_shape"]
    flat = np.zeros(idx.shape + (int(np.prod(moved_shape[len(idx.shape):])),), dtype=g.dtype)
    np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
    gx = np.moveaxis(flat.reshape(moved_shape), tuple(range(-len(axes), 0)), axes)
    return (gx,)


# -- structural -------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(
                f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    return make_op("concat", data, tuple(tensors), axis=ax, sizes=sizes)


@register_backward("concat")
def _concat_bw(g, node):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.saved["axis"]))


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {ax} of {x.shape}")
    index = [np.s_[:]] * x.ndim
    index[ax] = np.s_[start:stop]
    index = tuple(index)
    return make_op("slice", x.data[index].copy(), (x,), index=index)


@register_backward("slice")
def _slice_bw(g, node):
    gx = np.zeros(node.inputs[0].shape, dtype=g.dtype)
    gx[node.saved["index"]] = g
    return (gx,)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return make_op("reshape", x.data.reshape(shape), (x,))


@register_backward("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.inputs[0].shape),)
