"""Dense matrix algebra with a reverse-mode tape, a multiply counter and seeded RNG.

A :class:`Matrix` wraps a numpy array whose trailing two axes are the
rows/columns; any leading axes are independent batch entries (stacked
splits, batch items), so one op call processes every split at once.

Operations are recorded on the active :class:`Tape` only when at least one
operand requires a gradient, which keeps inference on the fast path::

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = tape.backward(loss, [w])
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12


class ConfigurationError(ValueError):
    """Shapes or settings that cannot be combined."""


class UsageError(RuntimeError):
    """An API called in the wrong order (e.g. backward twice)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Matrix:
    """Dense array carrier that can participate in differentiation."""

    __slots__ = ("data", "requires_grad", "trainable", "name")
    __array_priority__ = 1000  # make ndarray <op> Matrix defer to Matrix

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self.data = arr
        self.requires_grad = requires_grad
        # leaves created with requires_grad are parameters; op outputs are not
        self.trainable = requires_grad
        self.name = name

    @classmethod
    def param(cls, data, name: str | None = None) -> "Matrix":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2] if self.data.ndim >= 2 else 1

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Matrix":
        return Matrix(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " grad" if self.requires_grad else ""
        return f"Matrix(shape={self.shape}{tag}{grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, key): return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Matrix":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Matrix":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Matrix":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_matrix(x) -> Matrix:
    if isinstance(x, Matrix):
        return x
    return Matrix(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Matrix
    inputs: tuple[Matrix, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of taped operations; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Matrix] = {}
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Matrix, inputs: tuple[Matrix, ...], backward) -> None:
        if self._consumed:
            raise UsageError("tape already replayed; clear() it before recording a new forward pass")
        for x in inputs:
            if x.trainable:
                self.leaves.setdefault(id(x), x)
        self.records.append(_Record(out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self._consumed = False

    def backward(self, loss: Matrix, wrt: Iterable[Matrix] | None = None) -> dict[Matrix, np.ndarray]:
        """Gradient of scalar ``loss`` for every parameter in ``wrt``.

        Parameters absent from the recorded graph get a zero gradient.
        Without ``wrt`` every trainable leaf seen on the tape is returned.
        """
        if self._consumed:
            raise UsageError("backward() called twice on the same forward pass")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss was not produced by taped operations")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for x, gx in zip(rec.inputs, rec.backward(g)):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        self._consumed = True
        targets = list(wrt) if wrt is not None else list(self.leaves.values())
        out = {}
        for p in targets:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        # cached intermediates are no longer needed
        self.records.clear()
        return out


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("aveyb_tape", default=None)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_grad():
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


# ---------------------------------------------------------------------------
# multiply counter


@dataclass
class FlopCounter:
    """Counts scalar multiplications, bucketed by the scope they ran in."""

    by_scope: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    _scopes: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def __getitem__(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)

    def add(self, n: int) -> None:
        for s in (self._scopes or ["other"]):
            self.by_scope[s] += int(n)


_ACTIVE_COUNTER: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "aveyb_flops", default=None)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


@contextlib.contextmanager
def flop_scope(name: str):
    """Tag multiplications inside the block; nested scopes are all credited."""
    counter = _ACTIVE_COUNTER.get()
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


def _count(n: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(n)


# ---------------------------------------------------------------------------
# op plumbing

CHECK_FINITE = True


def _finish(data: np.ndarray, inputs: tuple[Matrix, ...], backward, opname: str) -> Matrix:
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"{opname} produced non-finite values")
    out = Matrix(data)
    if any(x.requires_grad for x in inputs):
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Matrix, Matrix]:
    a, b = as_matrix(a), as_matrix(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Matrix:
    a, b = _pair(a, b)
    return _finish(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Matrix:
    a, b = _pair(a, b)
    return _finish(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Matrix:
    a, b = _pair(a, b)
    out = a.data * b.data
    _count(out.size)
    return _finish(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b) -> Matrix:
    a, b = _pair(a, b)
    out = a.data / b.data
    _count(out.size)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _finish(out, (a, b), back, "div")


def relu(x) -> Matrix:
    x = as_matrix(x)
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "relu")


def relu_squared(x) -> Matrix:
    x = as_matrix(x)
    r = np.maximum(x.data, 0.0)
    _count(r.size)
    return _finish(r * r, (x,), lambda g: (2.0 * g * r,), "relu_squared")


def exp(x) -> Matrix:
    x = as_matrix(x)
    out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Matrix:
    x = as_matrix(x)
    return _finish(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Matrix:
    x = as_matrix(x)
    out = np.sqrt(x.data)
    return _finish(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(x, floor: float) -> Matrix:
    """``max(x, floor)``; gradient passes only where ``x`` is above the floor."""
    x = as_matrix(x)
    mask = x.data > floor
    return _finish(np.where(mask, x.data, floor).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "clamp_min")


def where(mask: np.ndarray, x, fill: float = 0.0) -> Matrix:
    """Keep ``x`` where ``mask`` holds, else a constant fill (mask is not differentiated)."""
    x = as_matrix(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _finish(np.where(mask, x.data, fill).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "where")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ConfigurationError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.cols != b.rows:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _count(out.size * a.cols)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish(out, (a, b), back, "matmul")


def transpose(x) -> Matrix:
    x = as_matrix(x)
    return _finish(np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape) -> Matrix:
    x = as_matrix(x)
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Matrix:
    x = as_matrix(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    kept = np.sum(x.data, axis=axis, keepdims=True).shape

    def back(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return _finish(np.asarray(out), (x,), back, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Matrix:
    x = as_matrix(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reduce_max(x, axis: int = -1, keepdims: bool = False) -> Matrix:
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_matrix(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    kept = np.expand_dims(arg, axis).shape

    def back(g):
        g = g.reshape(kept)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), g, axis=axis)
        return (gx,)

    return _finish(out, (x,), back, "max")


def row_l2_normalize(x, eps: float = EPS_NORM) -> Matrix:
    """Scale each row to unit l2 norm; rows with norm below ``eps`` become zero."""
    x = as_matrix(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    ok = norm >= eps
    safe = np.where(ok, norm, 1.0)
    y = np.where(ok, x.data / safe, 0.0)
    _count(x.data.size * 2)

    def back(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(ok, (g - y * proj) / safe, 0.0),)

    return _finish(y, (x,), back, "row_l2_normalize")


def softmax(x, axis: int = -1) -> Matrix:
    x = as_matrix(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _finish(y, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Matrix:
    x = as_matrix(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _finish(y, (x,), back, "log_softmax")


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence, axis: int = -1) -> Matrix:
    parts = [as_matrix(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(
            f"cannot concatenate shapes {[p.shape for p in parts]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                for i in range(len(parts))]

    return _finish(out, tuple(parts), back, "concat")


def index(x, key) -> Matrix:
    """Basic or advanced numpy indexing; the gradient scatters back with accumulation."""
    x = as_matrix(x)
    out = np.asarray(x.data[key])
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice)) or k is Ellipsis or k is None for k in parts)

    def back(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _finish(out.copy(), (x,), back, "index")


def take(x, idx: np.ndarray, axis: int = 0) -> Matrix:
    """Gather along ``axis`` with an integer index array of any shape."""
    x = as_matrix(x)
    idx = np.asarray(idx)
    ax = axis % x.data.ndim
    out = np.take(x.data, idx, axis=ax)

    def back(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _finish(out, (x,), back, "take")


def split_cols(x, sizes: Sequence[int]) -> list[Matrix]:
    x = as_matrix(x)
    if sum(sizes) != x.cols:
        raise ConfigurationError(f"column sizes {list(sizes)} do not sum to {x.cols}")
    out, start = [], 0
    for n in sizes:
        out.append(index(x, (Ellipsis, slice(start, start + n))))
        start += n
    return out


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded counter-based generator (Philox); child streams are derived by key."""

    def __init__(self, seed: int, *path: int | str):
        self.seed = int(seed) & (2**64 - 1)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_key_word(p) for p in path]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *path: int | str) -> "Rng":
        return Rng(self.seed, *self.path, *path)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self) -> float:
        return float(self.generator.random())


def _key_word(p: int | str) -> int:
    if isinstance(p, str):
        # stable across processes, unlike hash()
        h = 2166136261
        for ch in p.encode():
            h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
        return h
    return int(p) & 0xFFFFFFFF


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape if shape is not None else (fan_in, fan_out))
