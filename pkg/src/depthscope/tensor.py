"""Dense tensor kernels and a recorded-operation reverse-mode tape.

Tensors are plain numpy arrays (float32 by default, float64 in verification
mode).  Every differentiable primitive is a forward kernel plus a pullback
that only needs the op's inputs and output, so the same kernels serve both
eager evaluation and taped evaluation and produce bit-identical values.

Model code is written against an *ops* object: :data:`EAGER` evaluates
immediately and returns arrays, a :class:`Tape` records every primitive and
returns :class:`Node` handles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TapeLookupError

ZERO_NORM = 1e-12
DEFAULT_EPS = 1e-6


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``x / sqrt(mean(x**2) + eps) * scale`` along the last axis."""
    if x.shape[-1] != scale.shape[-1] or scale.ndim != 1:
        raise ShapeError(f"rmsnorm: last dim of {x.shape} does not match scale {scale.shape}")
    if not eps > 0:
        raise ValueError("rmsnorm: eps must be positive")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    return (x * inv) * scale


def softmax(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 0:
        raise ShapeError("softmax: empty last dimension")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 0:
        raise ShapeError("log_softmax: empty last dimension")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotary position rotation of ``x[..., n, d_head]`` with tables ``[n, d_head]``."""
    return x * cos + rotate_half(x) * sin


def rotary_tables(n: int, d_head: int, base: float, dtype=np.float32):
    inv_freq = 1.0 / (base ** (np.arange(0, d_head, 2, dtype=np.float64) / d_head))
    angles = np.outer(np.arange(n, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def causal_keep(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def cosim(u, v) -> float:
    """Cosine similarity of two vectors; 0.0 when either norm is below 1e-12."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosim: length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosim_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise :func:`cosim` along the last axis, computed in float64."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosim_rows: shape mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nu >= ZERO_NORM) & (nv >= ZERO_NORM)
    dots = np.einsum("...i,...i->...", u, v)
    out = np.zeros(dots.shape)
    np.divide(dots, nu * nv, out=out, where=ok)
    return np.clip(out, -1.0, 1.0)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive table: name -> (forward, pullback)
#
# pullback(g, out, *inputs, **params) returns one gradient per input; None
# marks a non-differentiable input.
# ---------------------------------------------------------------------------


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _matmul_vjp(g, out, a, b):
    return _unbroadcast(np.matmul(g, _swap(b)), a.shape), _unbroadcast(np.matmul(_swap(a), g), b.shape)


def _rmsnorm_vjp(g, out, x, scale, eps=DEFAULT_EPS):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    normed = x * inv
    gscale = (g * normed).reshape(-1, x.shape[-1]).sum(axis=0)
    gn = g * scale
    gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
    return gx, gscale


def _silu_vjp(g, out, x):
    s = sigmoid(x)
    return (g * (s + x * s * (1 - s)),)


def _softmax_vjp(g, out, x):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _log_softmax_vjp(g, out, x):
    return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


def _rotary_vjp(g, out, x, cos, sin):
    return g * cos + _rotate_half_t(g * sin), None, None


def _repeat_fwd(x, repeats, axis):
    return np.repeat(x, repeats, axis=axis)


def _repeat_vjp(g, out, x, repeats, axis):
    axis = axis % x.ndim
    shape = g.shape[:axis] + (x.shape[axis], repeats) + g.shape[axis + 1:]
    return (g.reshape(shape).sum(axis=axis + 1),)


def _mask_fwd(x):
    keep = causal_keep(x.shape[-1])
    return np.where(keep, x, x.dtype.type(-np.inf))


def _mask_vjp(g, out, x):
    return (np.where(causal_keep(x.shape[-1]), g, 0),)


def _embed_vjp(g, out, table, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, ids, g)
    return gt, None


def _pick_fwd(x, positions, tokens):
    return x[..., positions, tokens]


def _pick_vjp(g, out, x, positions, tokens):
    gx = np.zeros_like(x)
    np.add.at(gx, (Ellipsis, positions, tokens), g)
    return gx, None, None


def _replace_rows_fwd(x, values, rows):
    out = x.copy()
    out[..., rows, :] = values
    return out


def _blend_rows_fwd(x, y, rows):
    out = x.copy()
    out[..., rows, :] = y[..., rows, :]
    return out


def _blend_rows_vjp(g, out, x, y, rows):
    gx = g.copy()
    gx[..., rows, :] = 0
    gy = np.zeros_like(g)
    gy[..., rows, :] = g[..., rows, :]
    return gx, _unbroadcast(gy, y.shape), None


def _replace_rows_vjp(g, out, x, values, rows):
    gx = g.copy()
    gx[..., rows, :] = 0
    return gx, _unbroadcast(g[..., rows, :], np.shape(values)), None


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (matmul, _matmul_vjp),
    "add": (np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "mul": (np.multiply, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "scale": (lambda x, c: x * x.dtype.type(c), lambda g, out, x, c: (g * g.dtype.type(c), None)),
    "rmsnorm": (rmsnorm, _rmsnorm_vjp),
    "silu": (silu, _silu_vjp),
    "softmax": (softmax, _softmax_vjp),
    "log_softmax": (log_softmax, _log_softmax_vjp),
    "rotary": (rotary, _rotary_vjp),
    "reshape": (lambda x, shape: np.reshape(x, shape), lambda g, out, x, shape: (g.reshape(x.shape), None)),
    "transpose": (
        lambda x, axes: np.transpose(x, axes),
        lambda g, out, x, axes: (np.transpose(g, np.argsort(axes)), None),
    ),
    "repeat": (_repeat_fwd, _repeat_vjp),
    "causal_mask": (_mask_fwd, _mask_vjp),
    "embed": (lambda table, ids: table[ids], _embed_vjp),
    "pick": (_pick_fwd, _pick_vjp),
    "sum": (lambda x: np.sum(x, keepdims=False), lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),)),
    "replace_rows": (_replace_rows_fwd, _replace_rows_vjp),
    "blend_rows": (_blend_rows_fwd, _blend_rows_vjp),
    "cast": (lambda x, dtype: x.astype(dtype, copy=False), lambda g, out, x, dtype: (g.astype(x.dtype), None)),
}


# ---------------------------------------------------------------------------
# ops objects
# ---------------------------------------------------------------------------


class Ops:
    """Primitive vocabulary used by model code; subclasses decide what ``apply`` does."""

    def apply(self, op: str, *args):
        raise NotImplementedError

    def value(self, x) -> np.ndarray:
        return x

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, x, c: float):
        return self.apply("scale", x, c)

    def rmsnorm(self, x, scale, eps: float = DEFAULT_EPS):
        return self.apply("rmsnorm", x, scale, eps)

    def silu(self, x):
        return self.apply("silu", x)

    def softmax(self, x):
        return self.apply("softmax", x)

    def log_softmax(self, x):
        return self.apply("log_softmax", x)

    def rotary(self, x, cos, sin):
        return self.apply("rotary", x, cos, sin)

    def reshape(self, x, shape):
        return self.apply("reshape", x, tuple(shape))

    def transpose(self, x, axes):
        return self.apply("transpose", x, tuple(axes))

    def repeat(self, x, repeats: int, axis: int):
        if repeats == 1:
            return x
        return self.apply("repeat", x, repeats, axis)

    def causal_mask(self, x):
        return self.apply("causal_mask", x)

    def embed(self, table, ids):
        return self.apply("embed", table, np.asarray(ids))

    def pick(self, x, positions, tokens):
        return self.apply("pick", x, np.asarray(positions), np.asarray(tokens))

    def sum(self, x):
        return self.apply("sum", x)

    def replace_rows(self, x, values, rows):
        """Copy of ``x`` whose ``rows`` (second-to-last axis) are set to ``values``."""
        return self.apply("replace_rows", x, values, np.asarray(rows))

    def blend_rows(self, x, y, rows):
        """Copy of ``x`` whose ``rows`` are taken from ``y`` (same shape)."""
        return self.apply("blend_rows", x, y, np.asarray(rows))

    def cast(self, x, dtype):
        return self.apply("cast", x, np.dtype(dtype))


class _Eager(Ops):
    def apply(self, op, *args):
        return PRIMITIVES[op][0](*args)


EAGER = _Eager()


class Node:
    """Handle for a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "index", "tape")

    def __init__(self, value: np.ndarray, index: int, tape: "Tape"):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape}, dtype={self.value.dtype})"


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Node


class Tape(Ops):
    """Ordered record of primitive applications from one forward pass.

    Non-:class:`Node` arguments are treated as constants.  Gradients are
    obtained with :meth:`backward`; :meth:`replay` re-executes the recording
    from the leaf values.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: list[Node] = []
        self._count = 0

    def _new(self, value) -> Node:
        node = Node(value, self._count, self)
        self._count += 1
        return node

    def leaf(self, value) -> Node:
        node = self._new(np.asarray(value))
        self.leaves.append(node)
        return node

    def value(self, x):
        return x.value if isinstance(x, Node) else x

    def apply(self, op, *args):
        for a in args:
            if isinstance(a, Node) and a.tape is not self:
                raise TapeLookupError(f"{op}: input {a!r} belongs to another tape")
        out = PRIMITIVES[op][0](*(self.value(a) for a in args))
        node = self._new(out)
        self.records.append(Record(op, args, node))
        return node

    def _owns(self, node) -> bool:
        return isinstance(node, Node) and node.tape is self

    def backward(self, target: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """Gradients of the scalar ``target`` with respect to each node in ``wrt``."""
        if not self._owns(target):
            raise TapeLookupError(f"target {target!r} is not on this tape")
        if target.value.size != 1:
            raise ShapeError(f"backward target must be scalar, got shape {target.value.shape}")
        for n in wrt:
            if not self._owns(n):
                raise TapeLookupError(f"requested node {n!r} is not on this tape")
        grads: dict[int, np.ndarray] = {target.index: np.ones_like(target.value)}
        needed = min((n.index for n in wrt), default=target.index)
        for rec in reversed(self.records):
            if rec.output.index < needed:
                break
            g = grads.get(rec.output.index)
            if g is None:
                continue
            vals = [self.value(a) for a in rec.inputs]
            parts = PRIMITIVES[rec.op][1](g, rec.output.value, *vals)
            for a, ga in zip(rec.inputs, parts):
                if ga is None or not isinstance(a, Node):
                    continue
                if a.index in grads:
                    grads[a.index] = grads[a.index] + ga
                else:
                    grads[a.index] = ga
        return [grads.get(n.index, np.zeros_like(n.value)) for n in wrt]

    def replay(self) -> list[np.ndarray]:
        """Re-run every record from the leaf values; returns outputs in record order."""
        values = {leaf.index: leaf.value for leaf in self.leaves}
        outs = []
        for rec in self.records:
            args = [values[a.index] if isinstance(a, Node) else a for a in rec.inputs]
            out = PRIMITIVES[rec.op][0](*args)
            values[rec.output.index] = out
            outs.append(out)
        return outs


def backward(tape: Tape, target: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    return tape.backward(target, wrt)
