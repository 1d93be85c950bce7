"""Dense float64 tensors with reverse-mode differentiation.

Every operation producing a :class:`Tensor` from inputs that require gradients
records a node; :func:`backward` replays those nodes in reverse creation order.
There is no broadcasting: elementwise operations demand identical shapes, and
row-wise bias addition and row scaling are explicit primitives.

Finite-difference checks of objectives containing stop-gradients or argmin
choices need those to stay fixed while parameters are perturbed;
:func:`finite_diff_check` records every :func:`stop_gradient` value and every
:func:`discrete` decision on the unperturbed evaluation and replays them on the
perturbed ones, so the numeric derivative is taken of the same surrogate whose
gradient the tape computes.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named operation."""


_counter = itertools.count()
PRIMITIVES: dict[str, Callable] = {}


def primitive(fn):
    """Register ``fn`` as a differentiable primitive (used by the gradient suite)."""
    PRIMITIVES[fn.__name__] = fn
    return fn


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "parents", "grad_fn", "seq", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn = None
        self.seq = next(_counter)
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], grad_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.name = None
        out.seq = next(_counter)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.grad_fn = grad_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out.grad_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# record / replay of frozen values


@dataclass
class _Frozen:
    mode: str  # "record" or "replay"
    values: list = field(default_factory=list)
    pos: int = 0


_frozen: contextvars.ContextVar[_Frozen | None] = contextvars.ContextVar("frozen", default=None)


def _freeze(compute: Callable):
    state = _frozen.get()
    if state is None:
        return compute()
    if state.mode == "record":
        value = compute()
        state.values.append(value)
        return value
    if state.pos >= len(state.values):
        raise RuntimeError("replay: objective made more frozen choices than when recorded")
    value = state.values[state.pos]
    state.pos += 1
    return value


def discrete(compute: Callable):
    """Evaluate a non-differentiable choice, pinned during gradient checking."""
    return _freeze(compute)


@contextlib.contextmanager
def recording() -> Iterator[_Frozen]:
    state = _Frozen("record")
    token = _frozen.set(state)
    try:
        yield state
    finally:
        _frozen.reset(token)


@contextlib.contextmanager
def replaying(recorded: _Frozen) -> Iterator[_Frozen]:
    state = _Frozen("replay", recorded.values, 0)
    token = _frozen.set(state)
    try:
        yield state
    finally:
        _frozen.reset(token)
    if state.pos != len(state.values):
        raise RuntimeError("replay: objective made fewer frozen choices than when recorded")


# ---------------------------------------------------------------------------
# primitives


@primitive
def stop_gradient(x: Tensor) -> Tensor:
    value = _freeze(lambda: x.data.copy())
    return Tensor._result(value, (), None, "stop_gradient")


@primitive
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


@primitive
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


@primitive
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


@primitive
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


@primitive
def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._result(x.data * s, (x,), lambda g: (g * s,), "scale")


@primitive
def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of the 2-D tensor ``x``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    return Tensor._result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


@primitive
def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``r`` of ``x`` by ``w[r]``."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows: shape mismatch {x.shape} vs {w.shape}")
    xd, wd = x.data, w.data
    return Tensor._result(
        xd * wd[:, None], (x, w), lambda g: (g * wd[:, None], (g * xd).sum(axis=1)), "scale_rows"
    )


@primitive
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.data.ndim != ndim or other != first:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


@primitive
def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_axis: range [{start}, {stop}) outside axis of length {n} in {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._result(x.data[index], (x,), grad_fn, "slice")


@primitive
def take(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-D tensor (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take: expected a 2-D table, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for table {x.shape}")
    n = x.shape[0]
    return Tensor._result(x.data[index], (x,), lambda g: (kernels.index_add(n, index, g),), "take")


@primitive
def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.shape}")
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,), "transpose")


@primitive
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


@primitive
def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor._result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


@primitive
def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor._result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


@primitive
def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    return Tensor._result(x.data.sum(axis=axis), (x,), lambda g: (_expand(g, shape, axis).copy(),), "sum")


@primitive
def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    n = x.size if axis is None else shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty reduction over {shape}")
    return Tensor._result(
        x.data.mean(axis=axis), (x,), lambda g: (_expand(g, shape, axis) / n,), "mean"
    )


@primitive
def sum_sq(x: Tensor, axis: int | None = None) -> Tensor:
    """Squared L2 norm (of everything, or along ``axis``)."""
    xd = x.data
    return Tensor._result(
        (xd * xd).sum(axis=axis), (x,), lambda g: (2.0 * _expand(g, xd.shape, axis) * xd,), "sum_sq"
    )


@primitive
def norm(x: Tensor, axis: int | None = None) -> Tensor:
    """L2 norm; the gradient at the zero vector is taken as zero."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis))

    def grad_fn(g):
        nn = _expand(n, xd.shape, axis)
        safe = np.where(nn > 0, nn, 1.0)
        return (np.where(nn > 0, _expand(g, xd.shape, axis) * xd / safe, 0.0),)

    return Tensor._result(n, (x,), grad_fn, "norm")


@primitive
def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit L2 norm; zero rows stay zero."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    y = np.where(n > 0, xd / safe, 0.0)

    def grad_fn(g):
        return (np.where(n > 0, (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe, 0.0),)

    return Tensor._result(y, (x,), grad_fn, "normalize_rows")


@primitive
def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, or row-wise for two matrices; 0 against a zero vector."""
    _same_shape("cosine", a, b)
    return sum(mul(normalize_rows(a), normalize_rows(b)), axis=-1)


@primitive
def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


@primitive
def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


@primitive
def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy
    xd = x.data
    return Tensor._result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


@primitive
def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._result(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


@primitive
def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


@primitive
def spmm(a: kernels.CSR, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    if x.data.ndim != 2 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: shape mismatch {a.shape} vs {x.shape}")
    at = None

    def grad_fn(g):
        nonlocal at
        if at is None:
            at = a.transpose()
        return (at.matmul(g),)

    return Tensor._result(a.matmul(x.data), (x,), grad_fn, "spmm")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of corresponding rows."""
    return sum(mul(a, b), axis=-1)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# parameters and backward


class ParameterStore:
    """Named parameter tensors in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    def set(self, name: str, value) -> None:
        t = self._params[name]
        value = np.array(value, dtype=np.float64)
        if value.shape != t.shape:
            raise ShapeError(f"set {name}: shape mismatch {t.shape} vs {value.shape}")
        t.data = value

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in recording order."""

    nodes: list[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
        return grads


def backward(loss: Tensor, store: ParameterStore) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable parameter of ``store``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    raw = Tape.from_loss(loss).backward(loss) if loss.requires_grad else {}
    out = {}
    for name, t in store.items():
        if not t.requires_grad:
            continue
        g = raw.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to arbitrary leaf tensors."""
    if loss.size != 1:
        raise ValueError(f"grad: loss must be a scalar, got shape {loss.shape}")
    raw = Tape.from_loss(loss).backward(loss) if loss.requires_grad else {}
    return [raw.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class CoordinateCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float
    ok: bool


@dataclass
class GradCheckReport:
    checks: list[CoordinateCheck]
    tol: float

    @property
    def max_rel_error(self) -> float:
        errs = [c.error for c in self.checks]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[CoordinateCheck]:
        return [c for c in self.checks if not c.ok]

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"{state}: {len(self.checks)} coords, max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central differences.

    A coordinate passes when ``|a - n| <= max(tol * max(|a|, |n|), floor)``; its
    reported error is ``|a - n| / max(|a|, |n|, floor / tol)``. Tensors with
    more than ``max_coords`` entries are checked on a seeded subsample.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with recording() as recorded:
        loss = fn()
    analytic = backward(loss, params)
    checks = []
    for name in names if names is not None else params.trainable():
        t = params[name]
        base = t.data
        flat_count = base.size
        if flat_count > max_coords:
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        else:
            coords = np.arange(flat_count)
        for flat in coords:
            idx = np.unravel_index(int(flat), base.shape) if base.ndim else ()
            values = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * epsilon
                t.data = pert
                try:
                    with replaying(recorded):
                        values.append(fn().item())
                finally:
                    t.data = base
            a = float(analytic[name][idx])
            if not all(np.isfinite(values)):
                checks.append(CoordinateCheck(name, tuple(int(i) for i in idx), a, float("nan"), float("inf"), False))
                continue
            n = (values[0] - values[1]) / (2.0 * epsilon)
            diff = math.fabs(a - n)
            scale_ = max(math.fabs(a), math.fabs(n))
            ok = diff <= max(tol * scale_, floor)
            err = diff / max(scale_, floor / tol)
            checks.append(CoordinateCheck(name, tuple(int(i) for i in idx), a, n, err, ok))
    return GradCheckReport(checks, tol)
