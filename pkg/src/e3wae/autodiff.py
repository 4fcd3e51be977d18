"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a :class:`Tape`
is active and some input requires a gradient, appends a node holding the
vector-Jacobian product closure.  Node handles are tensor uids; because nodes
are appended as they are created, inputs always precede their consumers and the
backward sweep is a plain reverse iteration.

Elementwise primitives never broadcast implicitly: operand shapes must match
exactly and :func:`broadcast` is the only way to expand a tensor.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ContractViolation, DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "as_tensor",
    "apply_primitive",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "square",
    "neg",
    "softmax",
    "log_softmax",
    "relu",
    "leaky_relu",
    "tanh",
    "abs",
    "clamp_min",
    "row_l2_norm",
    "dot_rows",
    "slice",
    "take",
    "segment_sum",
    "broadcast",
    "reshape",
    "transpose",
    "scalar_mul",
]

NORM_EPS = 1e-12

_uids = itertools.count()
_state = threading.local()


class Tensor:
    """An immutable float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(float(other), self)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(float(other), self)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(1.0 / float(other), self)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice(self, key)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; primitives evaluated inside the ``with`` block are
    recorded.  ``backward`` does not mutate the tape, so it may be replayed.
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` keyed by uid of every reached leaf."""
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for out_uid, inputs, vjp in reversed(self.nodes):
            g = grads.pop(out_uid, None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.uid)
                grads[t.uid] = gi if prev is None else prev + gi
        return grads

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradient map by parameter name; unreachable parameters get zeros."""
        raw = self.backward(loss)
        out = {}
        for name, p in params.items():
            g = raw.get(p.uid)
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block (also inside an outer tape)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res = Tensor(out, requires_grad=True)
        tape.nodes.append((res.uid, inputs, vjp))
        return res
    return Tensor(out)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _scatter_rows(values: np.ndarray, index: np.ndarray, num: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64).ravel()
    rest = values.shape[1:]
    flat = values.reshape(len(index), -1)
    if flat.size <= 8192:
        # small problems: a sparse matrix costs more to build than to apply
        out = np.zeros((num, flat.shape[1]))
        np.add.at(out, index, flat)
        return out.reshape((num,) + rest)
    m = sp.csr_matrix(
        (np.ones(len(index)), (index, np.arange(len(index)))), shape=(num, len(index))
    )
    return np.asarray(m @ flat).reshape((num,) + rest)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; shapes must match."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: zero denominator")
    return _emit(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scalar_mul(c: float, x) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(c * x.data, (x,), lambda g: (c * g,))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log: non-positive input")
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _emit(out, (x,), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Absolute value; subgradient 0 at 0."""
    x = as_tensor(x)
    xd = x.data
    return _emit(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    keep = xd > lo
    return _emit(np.where(keep, xd, lo), (x,), lambda g: (g * keep,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * d, (x,), lambda g: (g * d,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


# --- reductions and normalizations ------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scalar_mul(1.0 / float(count), sum(x, axis=axis, keepdims=keepdims))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax; ``-inf`` entries stay ``-inf``."""
    x = as_tensor(x)
    mx = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - mx
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def row_l2_norm(x, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """``sqrt(sum(x**2) + eps)`` along ``axis`` (removed from the result)."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis) + eps)
    return _emit(n, (x,), lambda g: (np.expand_dims(g / n, axis) * xd,))


def dot_rows(a, b) -> Tensor:
    """Row-wise inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("dot_rows", a, b)
    ad, bd = a.data, b.data
    return _emit(
        (ad * bd).sum(axis=-1), (a, b), lambda g: (g[..., None] * bd, g[..., None] * ad)
    )


# --- linear algebra and shape ----------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    k, m = bd.shape

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
        return (ga, gb)

    return _emit(ad @ bd, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice(x, key) -> Tensor:  # noqa: A001
    """Basic or advanced indexing ``x[key]``; gradients scatter-add back."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    return _emit(x.data[key], (x,), vjp)


def take(x, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (default rows) by an integer index array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ContractViolation(f"take: index out of range for extent {x.shape[axis]}")
    n = x.shape[axis]

    def vjp(g):
        gm = np.moveaxis(g, axis, 0).reshape((index.size,) + tuple(np.delete(x.shape, axis)))
        s = _scatter_rows(gm, index, n)
        return (np.moveaxis(s, 0, axis),)

    return _emit(np.take(x.data, index, axis=axis), (x,), vjp)


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum the rows of ``x`` that share a segment id; output has ``num_segments`` rows."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: ids shape {seg.shape} vs rows {x.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ContractViolation("segment_sum: segment id out of range")
    return _emit(_scatter_rows(x.data, seg, num_segments), (x,), lambda g: (g[seg],))


def broadcast(x, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape

    def vjp(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "negate": neg,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "abs": abs,
    "clamp_min": clamp_min,
    "row_l2_norm": row_l2_norm,
    "dot_rows": dot_rows,
    "slice": slice,
    "take": take,
    "segment_sum": segment_sum,
    "broadcast": broadcast,
    "reshape": reshape,
    "transpose": transpose,
    "scalar_mul": lambda c, x: scalar_mul(c, x),
}


def apply_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("add", a, b)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
    order: int = 2,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    The error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.  ``order=4``
    uses the five-point stencil, whose truncation error is ``O(step^4)``.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    if order not in (2, 4):
        raise ContractViolation("order must be 2 or 4")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tracked = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    with Tape() as tape:
        loss = f(tracked)
    if not np.all(np.isfinite(loss.data)):
        raise DomainError("finite_diff_check: non-finite function value")
    analytic = tape.gradient(loss, tracked)

    def value(k, idx, delta):
        arr = base[k].copy()
        arr[idx] += delta
        args = {name: Tensor(arr if name == k else v) for name, v in base.items()}
        with no_grad():
            out = f(args).item()
        if not np.isfinite(out):
            raise DomainError("finite_diff_check: non-finite function value")
        return out

    worst = 0.0
    for k, arr in base.items():
        for idx in np.ndindex(arr.shape):
            num = (value(k, idx, step) - value(k, idx, -step)) / (2.0 * step)
            if order == 4:
                wide = (value(k, idx, 2.0 * step) - value(k, idx, -2.0 * step)) / (4.0 * step)
                num = (4.0 * num - wide) / 3.0
            a = float(analytic[k][idx])
            err = np.abs(a - num) / max(1e-8, np.abs(a) + np.abs(num))
            worst = max(worst, float(err))
    return worst
