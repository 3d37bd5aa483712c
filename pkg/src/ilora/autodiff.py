"""Reverse-mode differentiation over dense float64 arrays.

Operations build values eagerly. While a :class:`Tape` is active, every op
that touches a tensor with ``requires_grad`` is appended to the tape together
with a closure mapping the output cotangent to parent cotangents.
``Tape.backward`` walks the recorded ops in reverse order.

Outside of a tape the same functions evaluate without recording anything,
which is what inference paths use.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "power",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "relu",
    "sigmoid",
    "tanh",
    "absolute",
    "where",
    "summation",
    "mean",
    "masked_mean",
    "masked_softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "elementwise",
    "finite_diff",
    "kink_monitor",
]


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 value, optionally tracked for gradients."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return summation(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


class _Node:
    # weak: Tensor._node -> _Node -> Tensor would be a cycle that keeps every
    # activation alive until the cyclic collector runs
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable, op: str):
        self.out = weakref.ref(out)
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Records ops executed inside a ``with`` block.

    >>> x = tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)
    >>> float(x.grad)
    6.0
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def _record(self, node: _Node) -> None:
        self._index[id(node.out())] = len(self.nodes)
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def _cotangents(self, output: Tensor, seed) -> dict[int, np.ndarray]:
        if id(output) not in self._index:
            if output.is_leaf and output.requires_grad:
                g = _seed_for(output, seed)
                return {id(output): g}
            raise RuntimeError("output was not produced on this tape; run the forward pass inside it first")
        g = _seed_for(output, seed)
        grads: dict[int, np.ndarray] = {id(output): g}
        stop = self._index[id(output)]
        for node in reversed(self.nodes[: stop + 1]):
            out = node.out()
            # a dead output had no consumers; its id may now belong to another tensor
            gout = None if out is None else grads.pop(id(out), None)
            if gout is None:
                continue
            parent_grads = node.backward(gout)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # keep leaf gradients, which are never popped by a node
        return grads

    def gradient(self, output: Tensor, leaves: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` w.r.t. ``leaves`` without touching ``.grad``."""
        grads = self._cotangents(output, seed)
        return [grads.get(id(leaf), np.zeros(leaf.shape)).copy() for leaf in leaves]

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d output / d leaf into ``leaf.grad`` for every tracked leaf."""
        grads = self._cotangents(output, seed)
        leaves = {}
        for node in self.nodes:
            for p in node.parents:
                if isinstance(p, Tensor) and p.requires_grad and p.is_leaf:
                    leaves[id(p)] = p
        if output.is_leaf and output.requires_grad:
            leaves[id(output)] = output
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _seed_for(output: Tensor, seed) -> np.ndarray:
    if seed is None:
        if output.size != 1:
            raise ValueError("seed required for non-scalar output")
        return np.ones(output.shape)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    return seed


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(value: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape()
    tracked = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out.requires_grad = tracked and tape is not None
    if out.requires_grad:
        node = _Node(out, parents, backward, op)
        out._node = node
        tape._record(node)
    return out


# kink bookkeeping for finite-difference checks --------------------------------

@contextmanager
def kink_monitor():
    """Collect the branch pattern of every piecewise op evaluated in the block.

    Two evaluations with identical patterns lie on the same smooth piece.
    """
    prev = getattr(_state, "kinks", None)
    log: list[np.ndarray] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_branch(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(np.asarray(pattern).copy())


# primitives -------------------------------------------------------------------

def add(a, b) -> Tensor:
    return _make(_val(a) + _val(b), (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    return _make(_val(a) - _val(b), (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def neg(a) -> Tensor:
    return _make(-_val(a), (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def backward(g):
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = np.einsum("...i,...ij->j", g, av) if av.ndim > 1 else g * av
            return ga, gb
        if av.ndim == 1:
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.einsum("i,...j->...ij", av, g)
            return ga, gb
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            # shared weight: fold batch axes into one GEMM
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


def power(a, exponent: float) -> Tensor:
    av = _val(a)
    out = av**exponent
    return _make(out, (a,), lambda g: (g * exponent * av ** (exponent - 1),), "power")


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports the non-finite result
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    if not isinstance(a, Tensor):
        return _softplus_np(a)
    av = a.data
    return _make(_softplus_np(av), (a,), lambda g: (g * _sigmoid_np(av),), "softplus")


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid_np(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    av = _val(a)
    on = av > 0
    _note_branch(on)
    if not isinstance(a, Tensor):
        return np.where(on, av, 0.0)
    return _make(np.where(on, av, 0.0), (a,), lambda g: (g * on,), "relu")


def absolute(a):
    av = _val(a)
    sgn = np.sign(av)
    _note_branch(sgn)
    if not isinstance(a, Tensor):
        return np.abs(av)
    return _make(np.abs(av), (a,), lambda g: (g * sgn,), "abs")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    _note_branch(cond)
    av, bv = _val(a), _val(b)
    out = np.where(cond, av, bv)
    return _make(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), "where")


def summation(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return summation(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def masked_mean(a, mask, axis: int) -> Tensor:
    """Mean over ``axis`` restricted to entries where ``mask`` is true.

    ``mask`` has the shape of ``a`` with trailing feature axes dropped.
    """
    av = _val(a)
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim < av.ndim:
        m = m[..., None]
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise ValueError("masked_mean over an empty mask")
    out = (av * m).sum(axis=axis) / np.squeeze(count, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * m / count,)

    return _make(out, (a,), backward, "masked_mean")


def masked_softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries with a false mask get exactly zero weight."""
    av = _val(a)
    if mask is None:
        mask = np.ones(av.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
    if np.any(~mask.any(axis=axis)):
        raise ValueError("masked_softmax: every entry along the axis is masked")
    shifted = np.where(mask, av, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward, "masked_softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    if axes is None:
        axes = tuple(range(av.ndim - 2)) + (av.ndim - 1, av.ndim - 2) if av.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _make(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return _make(out, tuple(parts), backward, "concat")


def getitem(a, index) -> Tensor:
    av = _val(a)

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(av[index], dtype=np.float64), (a,), backward, "getitem")


def elementwise(a, fn: Callable, dfn: Callable, name: str = "elementwise"):
    """Wrap a numpy elementwise function with a known derivative as a primitive.

    ``fn(x)`` returns the value; ``dfn(x, value)`` returns the pointwise derivative.
    """
    av = _val(a)
    out = fn(av)
    if not isinstance(a, Tensor):
        return out
    return _make(np.asarray(out, dtype=np.float64), (a,), lambda g: (g * dfn(av, out),), name)


# gradient oracle ----------------------------------------------------------------

def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time.

    Only the listed flat ``coords`` are perturbed; the rest of the result is zero.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(_val(x), dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0.copy()))
        flat[i] = orig - h
        fm = float(f(x0.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
