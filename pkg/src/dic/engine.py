"""Dense NCHW tensor engine with tape-based reverse-mode autodiff.

The engine is deliberately small: exactly the operations the denoiser needs,
each with a hand-written backward.  Buffers are numpy arrays (float32 for
training, float64 for gradient checks); convolutions lower to im2col + GEMM.

Gradients are recorded on an explicit :class:`Tape`.  A tape is built by one
forward pass inside a ``with Tape() as tape:`` block and consumed by exactly
one :func:`backward` call, after which its intermediates are dropped.  Ops
called with no active tape run in pure inference mode and keep no state.

All operations are pure functions of their inputs: repeated calls produce
bitwise-identical outputs, regardless of how the underlying BLAS schedules
its work.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import costs
from .errors import NonScalarLossError, ShapeError, TapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """A dense array with optional gradient tracking.

    `data` is always a numpy array; `grad`, once populated by backward(), has
    the same shape and dtype.  Tensors are immutable after creation except for
    gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Parameter(Tensor):
    """A leaf tensor registered under a hierarchical name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class _TapeRecord:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tape:
    """Ordered record of one forward pass, consumed by one backward pass."""

    def __init__(self):
        self.records: list[_TapeRecord] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def clear(self) -> None:
        """Drop all recorded intermediates; the tape can no longer serve a
        backward pass."""
        self.records.clear()
        self.consumed = True


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append(_TapeRecord(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] | None = None) -> None:
    """Populate gradients of every reachable leaf from a scalar loss.

    Leaves passed explicitly but not reached by the tape get zero gradients.
    The traversal visits each record exactly once, in reverse execution
    order, so accumulation order (and hence the result, bit for bit) is
    deterministic.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(loss.data.shape)
    if tape.consumed:
        raise TapeError("backward called on a cleared or already-consumed tape")
    produced = {id(rec.output) for rec in tape.records}
    if id(loss) not in produced and not loss.is_leaf:
        raise TapeError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def _deposit(t: Tensor, g: np.ndarray) -> None:
        # Gradient arrays are never mutated in place, so accumulating by
        # rebinding (`prev + g`) keeps every deposited array intact even when
        # one array object was handed to several inputs.
        if t.is_leaf:
            t.grad = g if t.grad is None else t.grad + g
        else:
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g

    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        in_grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            _deposit(t, g)

    if id(loss) in grads and loss.is_leaf and loss.requires_grad:
        loss.grad = grads.pop(id(loss))

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

    tape.clear()


# --------------------------------------------------------------------------
# MAC / op counting instrumentation
# --------------------------------------------------------------------------


class FlopCounter:
    """Accumulates operation costs (see :mod:`dic.costs`) during forwards."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        counters = getattr(_tls, "counters", None)
        if counters is None:
            counters = []
            _tls.counters = counters
        counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tls.counters.pop()

    def add(self, amount: int) -> None:
        self.total += amount


def _count(amount: int) -> None:
    counters = getattr(_tls, "counters", None)
    if counters:
        counters[-1].add(amount)


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(op, f"operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    _count(costs.elemwise_cost(a.size))
    return _make_output(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    _count(costs.elemwise_cost(a.size))
    return _make_output(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    _count(costs.elemwise_cost(a.size))
    ad, bd = a.data, b.data
    return _make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, s: float) -> Tensor:
    _count(costs.elemwise_cost(a.size))
    return _make_output(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    _count(costs.elemwise_cost(a.size))
    return _make_output(a.data * s, (a,), lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make_output(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.size
    shape = a.data.shape
    return _make_output(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: ((np.broadcast_to(g, shape) * inv).astype(g.dtype, copy=False),),
    )


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error, composed from primitive ops (fully differentiable)."""
    d = sub(pred, target)
    return mean_all(mul(d, d))


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    _count(costs.act_cost(x.size))
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * pdf),)

    return _make_output(xd * phi, (x,), back)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    _count(costs.act_cost(x.size))
    xd = x.data
    sig = _sigmoid(xd)
    return _make_output(xd * sig, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# Linear / embedding
# --------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: y[..., o] = sum_i x[..., i] w[o, i] + b[o]."""
    din = x.data.shape[-1]
    dout, din_w = weight.data.shape
    if din != din_w:
        raise ShapeError("linear", f"input last dim {din} != weight in dim {din_w}")
    if bias is not None and bias.data.shape != (dout,):
        raise ShapeError("linear", f"bias shape {bias.data.shape} != ({dout},)")

    lead = x.data.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    _count(costs.linear_macs(rows, din, dout))
    x2 = x.data.reshape(rows, din)
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 = y2 + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(rows, dout)
        dx = (g2 @ weight.data).reshape(x.data.shape)
        dw = g2.T @ x2
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _make_output(y2.reshape(*lead, dout), inputs, back)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: y[n] = table[idx[n]].  Gradient scatter-adds into the table."""
    indices = np.asarray(idx)
    if indices.ndim != 1:
        raise ShapeError("embedding", f"index array must be 1-D, got {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.data.shape[0]):
        raise ShapeError(
            "embedding",
            f"index out of range [0, {table.data.shape[0]}): "
            f"[{indices.min()}, {indices.max()}]",
        )

    def back(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, indices, g)
        return (dt,)

    return _make_output(table.data[indices], (table,), back)


def split_last(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Split the last axis into consecutive chunks; gradients re-concatenate."""
    if sum(sizes) != x.data.shape[-1]:
        raise ShapeError("split_last", f"sizes {tuple(sizes)} do not sum to {x.data.shape[-1]}")
    outs = []
    offset = 0
    for size in sizes:
        sl = (Ellipsis, slice(offset, offset + size))
        piece = x.data[sl]

        def back(g, sl=sl):
            dx = np.zeros_like(x.data)
            dx[sl] = g
            return (dx,)

        outs.append(_make_output(piece.copy(), (x,), back))
        offset += size
    return tuple(outs)


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------


def _im2col3x3(xpad: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=xpad.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xpad[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
    return cols


def conv3x3_direct(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1
) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    Stride 1 preserves the spatial extent; stride 2 halves it and requires
    even height and width.
    """
    if x.data.ndim != 4:
        raise ShapeError("conv3x3", f"input must be NCHW, got {x.data.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ShapeError("conv3x3", f"weight must be [Cout,Cin,3,3], got {weight.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_w = weight.data.shape[:2]
    if cin != cin_w:
        raise ShapeError("conv3x3", f"input channels {cin} != weight channels {cin_w}")
    if stride not in (1, 2):
        raise ShapeError("conv3x3", f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError("conv3x3", f"stride-2 requires even extents, got {h}x{w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError("conv3x3", f"bias shape {bias.data.shape} != ({cout},)")

    ho, wo = h // stride, w // stride
    _count(costs.conv3x3_macs(n, cin, cout, ho, wo))

    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3x3(xpad, ho, wo, stride)
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, cin * 9)
    wmat = weight.data.reshape(cout, cin * 9)
    y2 = cols2 @ wmat.T
    if bias is not None:
        y2 = y2 + bias.data
    y = y2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (g2.T @ cols2).reshape(weight.data.shape)
        dcols = (
            (g2 @ wmat)
            .reshape(n, ho, wo, cin, 3, 3)
            .transpose(0, 3, 4, 5, 1, 2)
        )
        dxpad = np.zeros_like(xpad)
        for ky in range(3):
            for kx in range(3):
                dxpad[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += dcols[
                    :, :, ky, kx
                ]
        dx = dxpad[:, :, 1 : h + 1, 1 : w + 1]
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _make_output(y, inputs, back)


def conv_patchify2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Non-overlapping 2x2 stride-2 convolution (patch embedding stem)."""
    if x.data.ndim != 4:
        raise ShapeError("conv_patchify2", f"input must be NCHW, got {x.data.shape}")
    n, cin, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("conv_patchify2", f"extents must be even, got {h}x{w}")
    cout, cin_w, kh, kw = weight.data.shape
    if (kh, kw) != (2, 2) or cin_w != cin:
        raise ShapeError(
            "conv_patchify2", f"weight must be [Cout,{cin},2,2], got {weight.data.shape}"
        )
    ho, wo = h // 2, w // 2
    _count(costs.conv_patchify2_macs(n, cin, cout, ho, wo))

    patches = (
        x.data.reshape(n, cin, ho, 2, wo, 2)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n * ho * wo, cin * 4)
    )
    wmat = weight.data.reshape(cout, cin * 4)
    y2 = patches @ wmat.T
    if bias is not None:
        y2 = y2 + bias.data
    y = y2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (g2.T @ patches).reshape(weight.data.shape)
        dx = (
            (g2 @ wmat)
            .reshape(n, ho, wo, cin, 2, 2)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(n, cin, h, w)
        )
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _make_output(y, inputs, back)


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------


def group_norm(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Per-(sample, group) normalization over (C/G)*H*W elements, then a
    per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError("group_norm", f"input must be NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if c % groups:
        raise ShapeError("group_norm", f"channels {c} not divisible by groups {groups}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("group_norm", f"gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ShapeError("group_norm", f"eps must be positive, got {eps}")
    _count(costs.norm_cost(x.size))

    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * invstd).reshape(n, c, h, w)
    gb = gamma.data.reshape(1, c, 1, 1)
    y = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gb).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        mean_dxhat = dxhat.mean(axis=2, keepdims=True)
        mean_dxhat_xh = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = (invstd * (dxhat - mean_dxhat - xh * mean_dxhat_xh)).reshape(x.data.shape)
        return dx, dgamma, dbeta

    return _make_output(y, (x, gamma, beta), back)


# --------------------------------------------------------------------------
# Shape / channel manipulation
# --------------------------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits back."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels", "inputs must be NCHW")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            "concat_channels",
            f"batch/spatial extents differ: {a.data.shape} vs {b.data.shape}",
        )
    ca = a.data.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return _make_output(y, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel 2x2; the gradient is the 2x2 block sum."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2x", f"input must be NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make_output(
        y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    )


def depth_to_space2x(x: Tensor) -> Tensor:
    """Rearrange [N,4C,H,W] -> [N,C,2H,2W] (pixel shuffle, zero FLOPs)."""
    n, c4, h, w = x.data.shape
    if c4 % 4:
        raise ShapeError("depth_to_space2x", f"channels {c4} not divisible by 4")
    c = c4 // 4
    y = (
        x.data.reshape(n, c, 2, 2, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, 2 * h, 2 * w)
    )

    def back(g):
        return (
            g.reshape(n, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c4, h, w),
        )

    return _make_output(y, (x,), back)


def channel_affine(
    x: Tensor, scale: Tensor | None = None, shift: Tensor | None = None
) -> Tensor:
    """Per-sample, per-channel affine: y[n,c,h,w] = x*scale[n,c] + shift[n,c].

    Either factor may be omitted.  This is the conditioning injection
    primitive: scale/shift come from condition projections, so their
    gradients reduce over the spatial axes only.
    """
    if x.data.ndim != 4:
        raise ShapeError("channel_affine", f"input must be NCHW, got {x.data.shape}")
    n, c = x.data.shape[:2]
    for name, t in (("scale", scale), ("shift", shift)):
        if t is not None and t.data.shape != (n, c):
            raise ShapeError("channel_affine", f"{name} shape {t.data.shape} != ({n},{c})")
    if scale is None and shift is None:
        raise ShapeError("channel_affine", "need at least one of scale, shift")
    _count(costs.elemwise_cost(x.size, nops=(scale is not None) + (shift is not None)))

    xd = x.data
    y = xd
    if scale is not None:
        y = y * scale.data[:, :, None, None]
    if shift is not None:
        y = y + shift.data[:, :, None, None]

    inputs = tuple(t for t in (x, scale, shift) if t is not None)

    def back(g):
        out = []
        dx = g if scale is None else g * scale.data[:, :, None, None]
        out.append(dx)
        if scale is not None:
            out.append((g * xd).sum(axis=(2, 3)))
        if shift is not None:
            out.append(g.sum(axis=(2, 3)))
        return tuple(out)

    return _make_output(y, inputs, back)
