"""Dense NCHW tensor with define-by-run reverse-mode differentiation.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to per-parent
gradients.  :meth:`Tensor.backward` collects the reachable nodes into a
:class:`Tape` ordered by creation and replays the closures in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

_node_ids = itertools.count()
_state = threading.local()

Scalar = Union[int, float]


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for non-float inputs and new parameters."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class ShapeError(ValueError):
    pass


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, *,
                 _parents: Tuple["Tensor", ...] = (), _backward=None, _op: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are 1-4 dimensional, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        self.tape_id = next(_node_ids) if _parents else None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def grad(self) -> Optional[np.ndarray]:
        # Leaves never reached by backward read as zero.
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.run(self, np.asarray(seed, dtype=self.dtype))

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Tape:
    """Nodes reachable from an output, in recording order."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.is_leaf:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t.tape_id)
        return cls(nodes)

    def run(self, out: Tensor, seed: np.ndarray) -> None:
        if out.is_leaf:
            if out.requires_grad:
                _accumulate_leaf(out, seed)
            return
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.is_leaf:
                    _accumulate_leaf(p, pg)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t._grad = g.copy() if t._grad is None else t._grad + g


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise --------------------------------------------------------------

def _broadcast_ok(big: Tuple[int, ...], small: Tuple[int, ...]) -> bool:
    if len(big) != 4 or len(small) != 4 or big[0] != small[0]:
        return False
    channel_singleton = small[1] == 1 and small[2:] == big[2:]
    spatial_singleton = small[2:] == (1, 1) and small[1] == big[1]
    return channel_singleton or spatial_singleton


def _check_pair(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _broadcast_ok(a.shape, b.shape):
        return a.shape
    if _broadcast_ok(b.shape, a.shape):
        return b.shape
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Binary op dispatcher; ``kind`` in add, sub, mul, div, scalar_mul, scalar_add."""
    if kind == "scalar_mul":
        return scalar_mul(a, b)
    if kind == "scalar_add":
        return scalar_add(a, b)
    fn = {"add": add, "sub": sub, "mul": mul, "div": div}.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return fn(a, b)


def scalar_mul(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(a.data * a.dtype.type(s), (a,), backward, "scalar_mul")


def scalar_add(a: Tensor, s: Scalar) -> Tensor:
    def backward(g):
        return (g,)

    return _result(a.data + a.dtype.type(s), (a,), backward, "scalar_add")


def rsub(a: Tensor, s: Scalar) -> Tensor:
    """``s - a`` for a python scalar ``s``."""
    def backward(g):
        return (-g,)

    return _result(a.dtype.type(s) - a.data, (a,), backward, "rsub")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, b)
    _check_pair(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, -b)
    _check_pair(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _check_pair(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, 1.0 / b)
    _check_pair(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


# -- pointwise functions ------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(out, (x,), backward, "clip")


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {p.shape} does not match N,H,W = {(n, h, w)}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "slice")


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if x.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g):
        g = g.reshape(kept_shape) * scale
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, kind)


# -- gradient checking ----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Optional[Iterable[int]] = None) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar Tensor.  ``x`` is perturbed in place, so it
    may be a model parameter that ``f`` reads through a closure.  Pass
    ``indices`` (flat positions) to check a subset of a large tensor.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check runs in 64-bit; cast the graph with .to(np.float64) first")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    y.backward()
    analytic = x.grad.reshape(-1).copy()
    x.zero_grad()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            cd = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
