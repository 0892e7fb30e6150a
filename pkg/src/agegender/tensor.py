"""Dense tensor with reverse-mode gradient recording.

A :class:`Tensor` wraps a contiguous numpy array.  Every differentiable
operation that touches a tensor with ``requires_grad`` records a
:class:`Node` holding its inputs and a backward rule.  Calling
:func:`backward` on a scalar loss linearises the recorded graph into a
:class:`GradTape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from python data ("f32"/"f64" or a numpy dtype)."""
    _state.dtype = np.dtype(_DTYPES.get(dtype, dtype))


def resolve_dtype(precision) -> np.dtype:
    if precision in _DTYPES:
        return np.dtype(_DTYPES[precision])
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {precision!r}")
    return dt


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def debug_enabled() -> bool:
    return _get("debug", False)


def set_debug(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    _state.debug = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True) -> Iterator[None]:
    prev = debug_enabled()
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Node:
    """One recorded operation: inputs plus a rule mapping d(out) to d(inputs)."""

    __slots__ = ("op", "inputs", "backward_fn", "output_ref")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.output_ref = None

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    """N-dimensional array that can participate in gradient recording.

    Image batches use the (batch, channels, height, width) layout.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        else:
            dtype = resolve_dtype(dtype)
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        if debug_enabled():
            check_finite(self.data, "tensor construction")

    # -- basic properties -------------------------------------------------
    @property
    def dims(self) -> tuple:
        return self.data.shape

    shape = dims

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got dims {self.dims}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.dims[0]

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{bad} non-finite value(s) produced by {where}")


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output, recording a node when any input needs a gradient.

    ``backward_fn(g)`` returns one gradient array (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if debug_enabled():
        check_finite(data, op)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


class GradTape:
    """Recorded operations in topological order, ending at ``root``.

    Built from the graph hanging off a tensor; every node appears after
    the nodes producing its inputs.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.entries: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep nets overflow python recursion
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.entries.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.entries]

    def __len__(self):
        return len(self.entries)

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for t in reversed(self.entries):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.dims:
                    raise RuntimeError(
                        f"{t.node.op} backward produced grad {ig.shape} for input {inp.dims}"
                    )
                if inp.node is None:
                    ig = ig.astype(inp.dtype, copy=False)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls without clearing grads accumulate.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    GradTape(loss).run(seed)


# -- elementwise arithmetic with numpy broadcasting ------------------------

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=_peer_dtype(b))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=_peer_dtype(a))
    return a, b


def _peer_dtype(x):
    return x.dtype if isinstance(x, Tensor) else None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.dims), unbroadcast(g, b.dims)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.dims), unbroadcast(-g, b.dims)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.dims) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.dims) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.dims).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.dims[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.dims),)

    return make_result(x.data.reshape(shape), (x,), bw, "reshape")
