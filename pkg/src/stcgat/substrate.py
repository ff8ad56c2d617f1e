"""Dense tensors with tape-based reverse-mode differentiation.

Every operation used by the model lives here: elementwise arithmetic with
numpy broadcasting, matrix products, row softmax, concatenation, dilated
causal convolution, weight normalisation and dropout. Each op records a
closure that maps the output gradient back to its inputs; :func:`backward`
replays the closures in reverse topological order.

Precision follows the arrays you feed in: float64 for verification,
float32 for training. Reductions are plain numpy calls with a fixed order,
so identical inputs give bit-identical outputs and gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is accumulated by :func:`backward`."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def _require_finite(out: np.ndarray, op: str, *inputs: Tensor) -> None:
    """Raise when ``op`` turned finite inputs into NaN/Inf."""
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NumericError(f"{op} produced non-finite values from finite inputs")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data / b.data
    _require_finite(out, "div", a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _require_finite(out, "exp", a)
    return _result(out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    neg_mask = a.data < 0
    out = np.where(neg_mask, a.data * a.dtype.type(slope), a.data)

    def bw(g):
        return (np.where(neg_mask, g * g.dtype.type(slope), g),)

    return _result(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the trailing axis with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return _result(np.expand_dims(a.data, axis), (a,), lambda g: (np.squeeze(g, axis),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result(out, (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    return _result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; a single tensor is returned unchanged."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty tensor list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ outside axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tensors, bw)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with an explicit output, e.g. ``"nd,dio->nio"``."""
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb, out_sub):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in {s!r} unsupported")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: shapes {a.shape} and {b.shape}: {exc}") from None

    def grad_for(target: Tensor, st: str, other: Tensor, so: str, g):
        kept = "".join(c for c in st if c in out_sub or c in so)
        res = np.einsum(f"{out_sub},{so}->{kept}", g, other.data)
        if kept != st:
            shape = [target.shape[st.index(c)] if c in kept else 1 for c in st]
            order = [kept.index(c) for c in st if c in kept]
            res = np.transpose(res, order).reshape(shape)
            res = np.broadcast_to(res, target.shape).copy()
        return res

    def bw(g):
        ga = grad_for(a, sa, b, sb, g) if a.requires_grad else None
        gb = grad_for(b, sb, a, sa, g) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution, normalisation, regularisation
# ---------------------------------------------------------------------------

def dilated_causal_conv1d(x: Tensor, filt: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated convolution along the last axis.

    ``x`` is ``[..., c_in, L]`` and ``filt`` is ``[c_out, c_in, l]``; the
    output ``[..., c_out, L]`` is ``sum_i filt[:, :, i] @ x[..., s - d*i]``
    with zeros for negative positions.
    """
    if dilation < 1:
        raise ContractError(f"dilation must be >= 1, got {dilation}")
    if filt.ndim != 3 or x.ndim < 2 or filt.shape[1] != x.shape[-2]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with filter {filt.shape}")
    c_out, c_in, taps = filt.shape
    lead = x.shape[:-2]
    length = x.shape[-1]
    pad = (taps - 1) * dilation
    # channel-major [c_in, M, L + pad] so each tap is one GEMM
    xc = np.moveaxis(x.data.reshape((-1, c_in, length)), 1, 0)
    xp = np.pad(xc, ((0, 0), (0, 0), (pad, 0)))
    m = xc.shape[1]
    starts = [(taps - 1 - i) * dilation for i in range(taps)]
    shifted = [xp[:, :, s:s + length].reshape(c_in, m * length) for s in starts]
    # tap slices of filt are strided; BLAS needs them contiguous
    w = [np.ascontiguousarray(filt.data[:, :, i]) for i in range(taps)]
    acc = np.zeros((c_out, m * length), dtype=np.result_type(x.dtype, filt.dtype))
    for i, xs in enumerate(shifted):
        acc += w[i] @ xs
    out = np.moveaxis(acc.reshape(c_out, m, length), 0, 1).reshape(lead + (c_out, length))

    def bw(g):
        gx = gf = None
        gc = np.moveaxis(g.reshape((-1, c_out, length)), 1, 0).reshape(c_out, m * length)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, s in enumerate(starts):
                gxp[:, :, s:s + length] += (w[i].T @ gc).reshape(c_in, m, length)
            gx = np.moveaxis(gxp[:, :, pad:], 0, 1).reshape(x.shape)
        if filt.requires_grad:
            gf = np.zeros_like(filt.data)
            for i, xs in enumerate(shifted):
                gf[:, :, i] = gc @ xs.T
        return gx, gf

    return _result(out, (x, filt), bw)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """``w = g * v / ||v||`` with one norm per output channel (axis 0)."""
    if g.shape != (v.shape[0],):
        raise DimensionError(f"weight_norm: gain shape {g.shape} does not match {v.shape[0]} channels")
    axes = tuple(range(1, v.ndim))
    bshape = (-1,) + (1,) * (v.ndim - 1)
    norm = np.sqrt((v.data * v.data).sum(axis=axes))
    if np.any(norm == 0):
        bad = [int(i) for i in np.flatnonzero(norm == 0)]
        raise NumericError(f"weight_norm: zero-norm output channel(s) {bad}")
    unit = v.data / norm.reshape(bshape)
    out = g.data.reshape(bshape) * unit

    def bw(grad):
        gv = gg = None
        proj = (grad * unit).sum(axis=axes)
        if g.requires_grad:
            gg = proj
        if v.requires_grad:
            gv = (g.data / norm).reshape(bshape) * (grad - proj.reshape(bshape) * unit)
        return gv, gg

    return _result(out, (v, g), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in evaluation mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add across repeated uses of the same leaf. Leaves not reached
    keep whatever they held (zero after ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
