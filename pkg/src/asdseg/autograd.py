"""Dense tensors with reverse-mode differentiation over a define-by-run tape.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape`.  :func:`backward` walks the tape in reverse, so nodes are
visited once each in reverse topological order.  After a backward pass the
tape is closed; call :func:`reset_tape` (or use :func:`new_tape`) before
recording the next computation.

Training state is float32.  Tensors built from float64 arrays stay float64,
which is what the finite-difference checker relies on.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class UsageError(RuntimeError):
    """The tape was used in an invalid order."""


class Rng:
    """Seedable PCG64 stream, stable across platforms for a given seed."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams; same parent seed gives same children."""
        return [Rng(s) for s in self._seq.spawn(n)]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


class Node:
    __slots__ = ("name", "inputs", "needs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        # frozen at record time
        self.needs = tuple(t.requires_grad for t in inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.epoch = 0
        self.closed = False

    def reset(self) -> None:
        self.nodes = []
        self.epoch += 1
        self.closed = False

    def record(self, node: Node) -> None:
        if self.closed:
            raise UsageError(
                "tape already consumed by backward(); call reset_tape() first"
            )
        self.nodes.append(node)


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_tape() -> Tape:
    return _tape()


def reset_tape() -> None:
    _tape().reset()


@contextlib.contextmanager
def new_tape() -> Iterator[Tape]:
    """Start a fresh epoch on the thread's tape."""
    tape = _tape()
    tape.reset()
    yield tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is None:
            dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float32
        return np.ascontiguousarray(data, dtype=dtype)
    return np.ascontiguousarray(np.asarray(data, dtype=dtype or np.float32))


class Tensor:
    """n-dimensional real array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._epoch = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * like.ndim, value, dtype=like.dtype))


def _needs_grad(inputs: Sequence[Tensor]) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in inputs)


def make_result(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``data`` and record ``backward_fn`` if any input needs gradients.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    input.
    """
    out = Tensor(data, dtype=data.dtype)
    if _needs_grad(inputs):
        tape = _tape()
        out.requires_grad = True
        node = Node(name, tuple(inputs), out, backward_fn)
        tape.record(node)
        out._node = node
        out._epoch = tape.epoch
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if not tape.nodes:
        raise UsageError("backward() on an empty tape")
    if loss._node is None or loss._epoch != tape.epoch:
        raise UsageError("loss was not recorded on the current tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, need, gi in zip(node.inputs, node.needs, in_grads):
            if gi is None or not need:
                continue
            if t._node is not None and t._epoch == tape.epoch:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                # leaf
                gi = np.asarray(gi, dtype=t.dtype)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    tape.closed = True


# ---------------------------------------------------------------- broadcasting


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    if a.ndim != b.ndim:
        raise ContractError(f"rank mismatch {a.shape} vs {b.shape}")
    out = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ContractError(f"incompatible shapes {a.shape} vs {b.shape}")
        out.append(max(da, db))
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ------------------------------------------------------------------ primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return make_result(
        "mul", ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = np.maximum(a.data, a.dtype.type(LOG_FLOOR))
    # clamped region has zero slope
    slope = np.where(a.data > LOG_FLOOR, 1.0 / x, 0.0).astype(a.dtype)
    return make_result("log", np.log(x), (a,), lambda g: (g * slope,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(x, x.dtype.type(0))
    s = _sigmoid(x)
    return make_result("softplus", y, (a,), lambda g: (g * s,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_result("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _restore(g: np.ndarray, axes: tuple, shape: tuple) -> np.ndarray:
    kept = [1 if i in axes else s for i, s in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    y = a.data.sum(axis=axes)
    if axis is None:
        y = y.reshape(1)
    return make_result("sum", np.asarray(y), (a,), lambda g: (_restore(g, axes, a.shape),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    y = a.data.mean(axis=axes)
    if axis is None:
        y = y.reshape(1)
    inv = a.dtype.type(1.0 / count)
    return make_result(
        "mean", np.asarray(y, dtype=a.dtype), (a,),
        lambda g: (_restore(g * inv, axes, a.shape),),
    )


def max_(a: Tensor, axis=None) -> Tensor:
    """Maximum; gradient goes to the first maximal element along the axes."""
    axes = _norm_axis(axis, a.ndim)
    moved = np.moveaxis(a.data, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    lead = moved.shape[: a.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if axis is None:
        y = y.reshape(1)

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (np.moveaxis(gm, tuple(range(a.ndim - len(axes), a.ndim)), axes),)

    return make_result("max", np.asarray(y), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = a.data.reshape(shape)
    if y.size != a.size:
        raise ContractError(f"cannot reshape {a.shape} to {shape}")
    return make_result("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return make_result(
        "concat", y, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis))
    )


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return make_result(
        "log_softmax", y, (a,),
        lambda g: (g - p * g.sum(axis=axis, keepdims=True),),
    )


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return make_result(
        "softmax", p, (a,),
        lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),),
    )


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ContractError(f"row range {start}:{stop} outside {a.shape[0]}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return make_result("rows", a.data[start:stop].copy(), (a,), bw)
