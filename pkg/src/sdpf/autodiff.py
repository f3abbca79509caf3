"""Reverse-mode automatic differentiation over dense float64 arrays (rank <= 2).

Every operation on a :class:`DiffValue` records its parents and a backward rule.
:func:`backward` walks the graph in reverse topological order and accumulates
adjoints.  Elementwise binary ops accept equal shapes or a scalar operand; the
only other broadcast is the bias row inside :func:`affine`.
"""

from __future__ import annotations

import contextlib
import json
import struct
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DiffValue",
    "ParamStore",
    "ShapeError",
    "PoisonedGradientError",
    "ProbeError",
    "GradCheckReport",
    "backward",
    "gradient_check",
    "no_grad",
    "grad_enabled",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "tanh",
    "relu",
    "exp",
    "log",
    "sin",
    "cos",
    "atan2",
    "square",
    "sum",
    "mean",
    "dot",
    "norm",
    "logsumexp",
    "concat",
    "gather",
    "take",
    "stop_gradient",
    "reshape",
    "where",
    "wrap_offset",
    "dense",
    "angle_features",
    "row_cosine",
    "log_normalize",
    "weighted_circular_mean",
    "row_gaussian_log_density",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class PoisonedGradientError(FloatingPointError):
    """A NaN appeared in an adjoint during the backward pass."""


class ProbeError(FloatingPointError):
    """A finite-difference probe produced a non-finite function value."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no backward graph inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DiffValue:
    """A node in the backward graph: a float64 array plus its adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    # make ``ndarray <op> DiffValue`` dispatch to the reflected DiffValue method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} arrays are not supported")
        self.data = arr
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[DiffValue, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"DiffValue({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

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

    def __getitem__(self, index):
        return take(self, index)


def constant(x) -> DiffValue:
    """Wrap ``x`` as a non-differentiable leaf (no-op for DiffValues)."""
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _make(data: np.ndarray, parents: Sequence[DiffValue], op: str, rule) -> DiffValue:
    out = DiffValue(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _check_elementwise(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand broadcast against an array
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> DiffValue:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "add")
    return _make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> DiffValue:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "sub")
    return _make(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> DiffValue:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "mul")
    return _make(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> DiffValue:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "div")
    out = a.data / b.data
    return _make(
        out, (a, b), "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> DiffValue:
    a = constant(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def square(a) -> DiffValue:
    a = constant(a)
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def matmul(a, b) -> DiffValue:
    """Matrix/vector products with numpy ``@`` semantics for rank 1 and 2."""
    a, b = constant(a), constant(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs rank >= 1 operands")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:  # (n, m) @ (m,) -> (n,)
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:  # (m,) @ (m, k) -> (k,)
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _make(A @ B, (a, b), "matmul", rule)


def dot(a, b) -> DiffValue:
    a, b = constant(a), constant(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


def affine(x, weight, bias) -> DiffValue:
    """``x @ weight + bias``, with ``bias`` added to every row."""
    x, weight, bias = constant(x), constant(weight), constant(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: weight {weight.shape}, bias {bias.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {weight.shape}")
    X, W = x.data, weight.data

    def rule(g):
        if X.ndim == 2:
            return g @ W.T, X.T @ g, g.sum(axis=0)
        return W @ g, np.outer(X, g), g

    return _make(X @ W + bias.data, (x, weight, bias), "affine", rule)


def tanh(a) -> DiffValue:
    a = constant(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a) -> DiffValue:
    a = constant(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def exp(a) -> DiffValue:
    a = constant(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> DiffValue:
    a = constant(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), "log", lambda g: (g / a.data,))


def sin(a) -> DiffValue:
    a = constant(a)
    return _make(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a) -> DiffValue:
    a = constant(a)
    return _make(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def atan2(y, x) -> DiffValue:
    y, x = constant(y), constant(x)
    _check_elementwise(y, x, "atan2")
    r2 = x.data * x.data + y.data * y.data
    return _make(
        np.arctan2(y.data, x.data), (y, x), "atan2",
        lambda g: (_unbroadcast(g * x.data / r2, y.shape), _unbroadcast(-g * y.data / r2, x.shape)),
    )


def sum(a, axis: int | None = None) -> DiffValue:  # noqa: A001 - mirrors numpy
    a = constant(a)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), "sum", rule)


def mean(a, axis: int | None = None) -> DiffValue:
    a = constant(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def norm(a, axis: int | None = None) -> DiffValue:
    """Euclidean norm of a vector, or of each row (``axis=1``) / column (``axis=0``)."""
    a = constant(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def rule(g):
        if axis is None:
            return (g * a.data / out,)
        return (np.expand_dims(g / out, axis) * a.data,)

    return _make(out, (a,), "norm", rule)


def logsumexp(a, axis: int | None = None) -> DiffValue:
    a = constant(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def rule(g):
        soft = np.exp(a.data - out_k)
        gk = g if axis is None else np.expand_dims(g, axis)
        return (gk * soft,)

    return _make(out, (a,), "logsumexp", rule)


def concat(values: Sequence, axis: int = 0) -> DiffValue:
    values = [constant(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([v.data for v in values], axis=axis), values, "concat", rule)


def take(a, index) -> DiffValue:
    """Basic or integer-array indexing; repeated indices accumulate on backward."""
    a = constant(a)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), "take", rule)


def gather(a, indices) -> DiffValue:
    """Select rows (or vector entries) by integer index."""
    return take(a, np.asarray(indices, dtype=np.intp))


def reshape(a, shape) -> DiffValue:
    a = constant(a)
    old = a.shape
    out = a.data.reshape(shape)
    if out.ndim > 2:
        raise ShapeError("reshape target has rank > 2")
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


def stop_gradient(a) -> DiffValue:
    a = constant(a)
    return DiffValue(a.data.copy())


def wrap_offset(a, mask: np.ndarray | None = None) -> DiffValue:
    """Wrap angular entries into (-pi, pi] via a constant offset (gradient 1 a.e.).

    ``mask`` flags angular entries along the last axis; ``None`` wraps every entry.
    """
    a = constant(a)
    x = a.data
    wrapped = np.pi - np.mod(np.pi - x, 2.0 * np.pi)
    offset = wrapped - x
    if mask is not None:
        offset = np.where(np.asarray(mask, dtype=bool), offset, 0.0)
    if not np.any(offset):
        return a
    return add(a, offset)


def where(cond, a, b) -> DiffValue:
    """Elementwise select with a constant boolean ``cond``."""
    a, b = constant(a), constant(b)
    cond = np.asarray(cond, dtype=bool)
    if not (a.shape == b.shape == cond.shape):
        raise ShapeError(f"where: shapes {cond.shape}, {a.shape}, {b.shape}")
    return _make(np.where(cond, a.data, b.data), (a, b), "where",
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# Fused primitives.  Each is a composition of the primitives above with a
# hand-written backward rule; they exist to keep per-step graphs small.


def dense(x, weight, bias, activation: str | None = "tanh") -> DiffValue:
    """``act(x @ weight + bias)`` for ``act`` in {tanh, relu, None}."""
    x, weight, bias = constant(x), constant(weight), constant(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],) or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    X, W = x.data, weight.data
    z = X @ W + bias.data
    if activation == "tanh":
        out = np.tanh(z)
    elif activation == "relu":
        out = np.maximum(z, 0.0)
    elif activation is None:
        out = z
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def rule(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        elif activation == "relu":
            g = g * (z > 0)
        if X.ndim == 2:
            return g @ W.T, X.T @ g, g.sum(axis=0)
        return W @ g, np.outer(X, g), g

    return _make(out, (x, weight, bias), f"dense_{activation}", rule)


def angle_features(a, angular_mask) -> DiffValue:
    """Replace each flagged column of an ``N x D`` array by its ``(sin, cos)`` pair."""
    a = constant(a)
    mask = np.asarray(angular_mask, dtype=bool)
    if a.ndim != 2 or a.shape[1] != mask.size:
        raise ShapeError(f"angle_features: input {a.shape}, mask {mask.shape}")
    X = a.data
    cols, kinds = [], []
    for j in range(mask.size):
        if mask[j]:
            cols += [np.sin(X[:, j]), np.cos(X[:, j])]
            kinds += [(j, "sin"), (j, "cos")]
        else:
            cols.append(X[:, j])
            kinds.append((j, "lin"))
    out = np.stack(cols, axis=1)

    def rule(g):
        grad = np.zeros_like(X)
        for c, (j, kind) in enumerate(kinds):
            if kind == "lin":
                grad[:, j] += g[:, c]
            elif kind == "sin":
                grad[:, j] += g[:, c] * out[:, c + 1]
            else:
                grad[:, j] -= g[:, c] * out[:, c - 1]
        return (grad,)

    return _make(out, (a,), "angle_features", rule)


def row_cosine(a, b) -> DiffValue:
    """Cosine similarity of matching rows of two ``N x F`` arrays."""
    a, b = constant(a), constant(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"row_cosine: shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    ua, ub = A / na[:, None], B / nb[:, None]
    out = (ua * ub).sum(axis=1)

    def rule(g):
        ga = (ub - out[:, None] * ua) / na[:, None]
        gb = (ua - out[:, None] * ub) / nb[:, None]
        return g[:, None] * ga, g[:, None] * gb

    return _make(out, (a, b), "row_cosine", rule)


def log_normalize(a) -> DiffValue:
    """Subtract the log-sum-exp of each row (or of a vector)."""
    a = constant(a)
    X = a.data
    axis = X.ndim - 1
    m = np.max(X, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(X - m).sum(axis=axis, keepdims=True)) + m
    out = X - lse

    def rule(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_normalize", rule)


def weighted_circular_mean(states, log_weights, angular_mask) -> DiffValue:
    """Per-group weighted mean of particle states.

    ``states`` is ``(B*N) x D`` (rows grouped by batch member), ``log_weights``
    is ``B x N`` and normalised per row.  Flagged columns use the weighted
    circular mean ``atan2(sum w sin, sum w cos)``.  Returns ``B x D``.
    """
    states, log_weights = constant(states), constant(log_weights)
    lw = log_weights.data if log_weights.ndim == 2 else log_weights.data[None, :]
    B, N = lw.shape
    S = states.data.reshape(B, N, -1)
    mask = np.asarray(angular_mask, dtype=bool)
    w = np.exp(lw)
    out = np.einsum("bn,bnd->bd", w, S)
    sin_s, cos_s = np.sin(S[:, :, mask]), np.cos(S[:, :, mask])
    ys = np.einsum("bn,bnd->bd", w, sin_s)
    xs = np.einsum("bn,bnd->bd", w, cos_s)
    out[:, mask] = np.arctan2(ys, xs)
    r2 = xs * xs + ys * ys

    def rule(g):
        g = g if g.ndim == 2 else g[None, :]
        gs = np.zeros_like(S)
        gw = np.zeros_like(w)
        lin = ~mask
        gs[:, :, lin] = w[:, :, None] * g[:, None, lin]
        gw += np.einsum("bnd,bd->bn", S[:, :, lin], g[:, lin])
        if mask.any():
            gy = g[:, mask] * xs / r2  # d atan2 / d ys
            gx = -g[:, mask] * ys / r2
            gs[:, :, mask] = w[:, :, None] * (gy[:, None, :] * cos_s - gx[:, None, :] * sin_s)
            gw += np.einsum("bnd,bd->bn", sin_s, gy) + np.einsum("bnd,bd->bn", cos_s, gx)
        glw = gw * w
        return gs.reshape(states.shape), glw.reshape(log_weights.shape)

    result = out if log_weights.ndim == 2 else out[0]
    return _make(result, (states, log_weights), "weighted_circular_mean", rule)


def row_gaussian_log_density(delta, scales) -> DiffValue:
    """``sum_d log N(delta_d; 0, scales_d^2)`` for each row of ``delta``."""
    delta = constant(delta)
    scales = np.asarray(scales, dtype=np.float64)
    if delta.ndim != 2 or delta.shape[1] != scales.size:
        raise ShapeError(f"row_gaussian_log_density: {delta.shape} vs {scales.shape}")
    z = delta.data / scales
    const = -float(np.sum(np.log(scales))) - 0.5 * scales.size * np.log(2.0 * np.pi)
    out = -0.5 * (z * z).sum(axis=1) + const
    return _make(out, (delta,), "row_gaussian_log_density", lambda g: (-g[:, None] * z / scales,))


def _toposort(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffValue, free_graph: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves keep any adjoint already present (so several losses can be summed);
    call :meth:`ParamStore.zero_grad` between independent passes.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if np.isnan(g).any():
            label = node.name or node.op
            raise PoisonedGradientError(f"NaN adjoint at node '{label}' (shape {node.shape})")
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if np.isnan(pg).any():
                label = node.name or node.op
                raise PoisonedGradientError(
                    f"NaN adjoint produced by the backward rule of '{label}' (shape {node.shape})")
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    if free_graph:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


class ParamStore:
    """Named learnable arrays in insertion order."""

    MAGIC = b"SDPFCKPT"
    VERSION = 1

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self._params: dict[str, DiffValue] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> DiffValue:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = DiffValue(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DiffValue:
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

    def size(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_snapshot(self, values: dict[str, np.ndarray]) -> None:
        for n, p in self._params.items():
            v = np.asarray(values[n], dtype=np.float64)
            if v.shape != p.data.shape:
                raise ShapeError(f"{n}: shape {v.shape} != {p.data.shape}")
            p.data = v.copy()

    def copy(self) -> ParamStore:
        return ParamStore(self.snapshot())

    def to_bytes(self) -> bytes:
        manifest = {
            "format": "sdpf-params",
            "version": self.VERSION,
            "dtype": "<f8",
            "params": [{"name": n, "shape": list(p.shape)} for n, p in self._params.items()],
        }
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in self._params.values())
        return self.MAGIC + struct.pack("<Q", len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamStore:
        if blob[:8] != cls.MAGIC:
            raise ValueError("not a parameter checkpoint")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        manifest = json.loads(blob[16 : 16 + hlen])
        if manifest.get("version") != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        offset = 16 + hlen
        values = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            values[entry["name"]] = raw.reshape(shape).astype(np.float64)
            offset += 8 * count
        return cls(values)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParamStore:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    tolerance: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(
    f: Callable[[ParamStore], DiffValue],
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    loss_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic adjoints against central differences for every entry.

    ``f`` must be deterministic.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor, loss_floor * |f(p)|)``.  The floor terms
    act as an absolute tolerance for entries whose derivative is too small to
    resolve: rounding alone perturbs a central difference by about
    ``eps * |f| / step``, i.e. ``2e-11 |f|`` at ``step = 1e-5``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data):
        raise ProbeError("f is non-finite at the base point")
    backward(loss)
    floor = max(floor, loss_floor * abs(float(loss.data)))
    analytic = {n: g.copy() for n, g in params.grads().items()}
    params.zero_grad()

    worst = (0.0, None, None)
    n_entries = 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = float(f(params).data)
                flat[j] = orig - step
                fm = float(f(params).data)
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ProbeError(f"f is non-finite probing {name}[{j}]")
                numeric = (fp - fm) / (2.0 * step)
                a = float(analytic[name].reshape(-1)[j])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                n_entries += 1
                if rel > worst[0]:
                    worst = (rel, name, tuple(int(i) for i in np.unravel_index(j, p.shape)))
    return GradCheckReport(worst[0], worst[1], worst[2], tolerance, n_entries)
