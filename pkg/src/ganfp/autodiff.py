"""Dense tensors with reverse-mode automatic differentiation.

A small CPU engine, just wide enough to train the convolutional nets in
this package: elementwise arithmetic with broadcasting, dense matmul,
2-D convolution, 2x nearest upsampling, 2x average pooling, the usual
activations, reductions, and a couple of special-purpose ops (separable
linear image transforms, straight-through wrappers).

Ops record onto the innermost active :class:`Tape`.  With no tape active
they run as plain forward evaluation, which is how inference paths avoid
bookkeeping cost.  Default dtype is float32; constructing tensors as
float64 is supported so finite-difference verification can run without
single-precision cancellation noise.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "GraphError", "ShapeError", "no_grad", "is_recording",
    "add", "sub", "mul", "matmul", "fully_connected", "conv2d",
    "conv2d_nhwc", "permute", "leaky_relu", "sigmoid", "softplus", "tanh",
    "tsum", "tmean", "reshape", "narrow", "clamp",
    "avg_pool2", "upsample_nearest2", "avg_pool2_nhwc",
    "upsample_nearest2_nhwc", "sep_image_op", "straight_through",
    "backward", "finite_difference_grad", "max_rel_err",
]


class GraphError(RuntimeError):
    """Backward pass requested on a malformed or disconnected graph."""


class ShapeError(ValueError):
    """Operands with incompatible dimensions."""


class Tensor:
    """N-dimensional real array, optionally tracked for gradients.

    ``grad`` starts as None and accumulates additively across backward
    passes and across multiple uses of the tensor within one graph.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=None)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped as untracked tensors
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=None)


class _Record:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_recording() -> bool:
    return _active_tape() is not None


class Tape:
    """Execution-ordered record of differentiable ops.

    Use as a context manager around a forward pass, then call
    :func:`backward` on a scalar loss produced inside it.  Records are
    appended in execution order, so a reverse walk is topological and
    visits each op exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, parents: tuple, backward_fn) -> None:
        self._records.append(_Record(out, parents, backward_fn))
        self._produced.add(id(out))


class no_grad:
    """Context that suspends recording even inside an active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()


def _make(out_data, parents: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track, dtype=None)
    if track:
        tape._record(out, parents, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar produced on the given (or innermost active)
    tape.  Gradients accumulate additively into existing ``grad`` buffers.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise GraphError("backward() outside of any tape")
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise GraphError("backward() on a non-finite loss")
    if id(loss) not in tape._produced:
        raise GraphError("loss is not connected to this tape (detached graph)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape._records):
        gout = grads.pop(id(rec.out), None)
        if gout is None:
            continue
        rec.out.grad = gout if rec.out.grad is None else rec.out.grad + gout
        pgrads = rec.backward_fn(gout)
        for parent, pg in zip(rec.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
            if pid not in tape._produced:
                leaves[pid] = parent
    for pid, leaf in leaves.items():
        g = grads.get(pid)
        if g is not None:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``y = x @ W^T + b`` for a batch of row vectors.

    x: (N, d_in); weight: (d_out, d_in); bias: (d_out,).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"fully_connected input must be (N, d_in), got {x.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"fully_connected: input width {x.data.shape[1]} does not match "
            f"weight shape {weight.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} does not match "
                         f"output width {weight.data.shape[0]}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel.

    im2col layout (N*Ho*Wo, C*kh*kw) so forward and both backward products
    are single large GEMMs."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW and OIHW, got {x.shape} and {weight.shape}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {i}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    ho, wo = view.shape[2], view.shape[3]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)) \
        .reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray(
        (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.data.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] \
                        += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _make(out, (x, weight), backward_fn)


def permute(x: Tensor, axes: tuple) -> Tensor:
    """Transpose to a new contiguous axis order."""
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(out, (x,), backward_fn)


def conv2d_nhwc(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation in channels-last layout: x (N,H,W,C), weight
    (kh,kw,C,O), output (N,Ho,Wo,O).

    Channels-last keeps the im2col gather and both GEMM operands
    contiguous, which matters on memory-bound hosts; the NCHW
    :func:`conv2d` is the layout-stable public twin.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d_nhwc expects NHWC and khkwIO, got {x.shape} "
                         f"and {weight.shape}")
    n, h, w, c = x.data.shape
    kh, kw, i, o = weight.data.shape
    if c != i:
        raise ShapeError(f"conv2d_nhwc: input has {c} channels but kernel expects {i}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d_nhwc: invalid stride={stride} padding={padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    w2 = weight.data.reshape(kh * kw * i, o)
    if kh == kw == 1 and stride == 1:
        ho, wo = xp.shape[1], xp.shape[2]
        cols = xp.reshape(n * ho * wo, c)
    else:
        view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        view = view[:, ::stride, ::stride]
        ho, wo = view.shape[1], view.shape[2]
        cols = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)) \
            .reshape(n * ho * wo, kh * kw * c)
    out = (cols @ w2).reshape(n, ho, wo, o)

    def backward_fn(g):
        g2 = g.reshape(n * ho * wo, o)
        gw = (cols.T @ g2).reshape(weight.data.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2.T
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gcols = gcols.reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[:, ki:ki + stride * ho:stride,
                            kj:kj + stride * wo:stride, :] += gcols[:, :, :, ki, kj, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return gx, gw

    return _make(out, (x, weight), backward_fn)


def avg_pool2_nhwc(x: Tensor) -> Tensor:
    """2x2 average pooling, channels-last."""
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2_nhwc needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)) \
        * np.asarray(0.25, x.data.dtype)

    def backward_fn(g):
        gq = g * np.asarray(0.25, x.data.dtype)
        gx = np.empty_like(x.data).reshape(n, h // 2, 2, w // 2, 2, c)
        gx[:, :, 0, :, 0] = gq
        gx[:, :, 0, :, 1] = gq
        gx[:, :, 1, :, 0] = gq
        gx[:, :, 1, :, 1] = gq
        return (gx.reshape(x.data.shape),)

    return _make(out, (x,), backward_fn)


def upsample_nearest2_nhwc(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling, channels-last."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward_fn(g):
        n, h2, w2, c = g.shape
        gx = g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        return (gx,)

    return _make(out, (x,), backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)) \
        * np.asarray(0.25, x.data.dtype)

    def backward_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, x.data.dtype)
        return (gx,)

    return _make(out, (x,), backward_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        n, c, h2, w2 = g.shape
        gx = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return (gx,)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # d/dx as a multiplicative coefficient; one saved array, one fused
    # multiply in each direction
    d = x.data
    s = np.asarray(slope, d.dtype)
    coef = (d >= 0).astype(d.dtype)
    coef *= np.asarray(1.0 - slope, d.dtype)
    coef += s
    out = d * coef

    def backward_fn(g):
        return (g * coef,)

    return _make(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails: exp() only ever sees non-positive arguments
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward_fn)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(np.asarray(0.0, x.data.dtype), x.data)

    def backward_fn(g):
        d = x.data
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _make(out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum()

    def backward_fn(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    return _make(out, (x,), backward_fn)


def tmean(x: Tensor) -> Tensor:
    scale = 1.0 / x.data.size
    out = x.data.mean()

    def backward_fn(g):
        gx = np.broadcast_to(g * np.asarray(scale, x.data.dtype), x.data.shape)
        return (gx.astype(x.data.dtype, copy=False),)

    return _make(out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(out, (x,), backward_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        return (g * mask,)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# special-purpose ops


def sep_image_op(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Separable linear transform of image batches: out = L @ x @ R^T.

    ``left`` is (Ho, H) or per-sample (N, Ho, H); likewise ``right`` is
    (Wo, W) or (N, Wo, W).  The backward pass applies the exact
    transposes, so crops, bilinear resizes, and blurs expressed this way
    differentiate exactly.
    """
    L = left if left.ndim == 3 else left[None]
    R = right if right.ndim == 3 else right[None]
    Lb = L[:, None].astype(x.data.dtype, copy=False)
    Rb = R[:, None].astype(x.data.dtype, copy=False)
    out = np.matmul(np.matmul(Lb, x.data), Rb.transpose(0, 1, 3, 2))

    def backward_fn(g):
        gx = np.matmul(np.matmul(Lb.transpose(0, 1, 3, 2), g), Rb)
        return (gx,)

    return _make(out, (x,), backward_fn)


def straight_through(x: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a non-differentiable array function with identity backward."""
    out = np.asarray(fn(x.data), dtype=x.data.dtype)
    if out.shape != x.data.shape:
        raise ShapeError("straight_through function must preserve shape")

    def backward_fn(g):
        return (g,)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# verification helpers


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor,
                           h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. ``param``.

    ``fn`` re-evaluates the forward pass from current tensor contents and
    must not record (it is run under :class:`no_grad`).
    """
    base = param.data
    grad = np.zeros(base.shape, dtype=np.float64)
    with no_grad():
        for idx in np.ndindex(base.shape):
            keep = base[idx]
            base[idx] = keep + h
            fp = float(fn().data)
            base[idx] = keep - h
            fm = float(fn().data)
            base[idx] = keep
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Elementwise relative discrepancy, floored so near-zero entries
    compare against ``floor`` instead of each other."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
