"""Dense tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation executed while it is
active; ``Tape.backward`` replays the records in reverse order (which is
a valid topological order by construction) and accumulates adjoints into
the ``.grad`` buffers of every tensor that requires gradients.  Calling
backward twice without resetting gradients doubles them; callers zero
gradients between optimizer steps.

Tensors wrap numpy arrays in float32 or float64; the precision is a
per-tensor property, not a compile-time choice.  When no tape is active
the operations below run forward-only, which is how inference paths
avoid bookkeeping overhead.  Tapes are single-owner: share parameters
across threads only for forward passes, never a live tape.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    GradCheckError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    UsageError,
)

_FLOAT_DTYPES = (np.float32, np.float64)

# Above this many multiply-adds the transposed-convolution path for the
# input gradient is replaced by a per-tap loop (better for large strides).
_CONV_DENSE_BACKWARD_LIMIT = 2 * 10**7


class Tensor:
    """A numpy array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = _STATE.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations (single-owner)."""

    def __init__(self):
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - defensive
            raise UsageError("tape context exited out of order")
        return False

    def _record(self, name, inputs, output, backward):
        self._entries.append((name, inputs, output, backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into .grad for recorded tensors.

        The loss must be a scalar produced under this tape.  Each entry
        is visited exactly once, in reverse recording order.
        """
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise UsageError("backward needs a scalar Tensor loss")
        adjoint = {id(loss): np.ones((), dtype=loss.data.dtype)}
        holder = {id(loss): loss}
        for _name, inputs, output, backward in reversed(self._entries):
            gout = adjoint.get(id(output))
            if gout is None:
                continue
            grads = backward(gout)
            for tin, gin in zip(inputs, grads):
                if gin is None or not tin.requires_grad:
                    continue
                key = id(tin)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gin
                else:
                    adjoint[key] = gin
                    holder[key] = tin
        for key, gacc in adjoint.items():
            tens = holder[key]
            if tens.requires_grad:
                tens.grad += gacc


def _op(name, out_data, inputs, backward):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = np.zeros_like(out_data) if needs else None
    if needs:
        tape._record(name, inputs, out, backward)
    return out


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _op("matmul", out, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Rows-of-x linear map: x (r,p) @ w (p,q) + b (q,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("affine expects x rank-2, w rank-2, b rank-1")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"affine shapes incompatible: x{x.shape} w{w.shape} b{b.shape}"
        )
    out = x.data @ w.data + b.data
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _op("affine", out, (x, w, b), backward)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shapes incompatible: {a.shape} @ {x.shape}")
    out = a.data @ x.data
    ad, xd = a.data, x.data

    def backward(g):
        ga = np.outer(g, xd) if a.requires_grad else None
        gx = ad.T @ g if x.requires_grad else None
        return ga, gx

    return _op("matvec", out, (a, x), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape}, {b.shape}")
    out = np.asarray(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = g * ad if b.requires_grad else None
        return ga, gb

    return _op("dot", out, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution


def same_output_length(extent: int, stride: int) -> int:
    """Output extent of a SAME-padded strided convolution: ceil(extent/stride)."""
    if extent < 1 or stride < 1:
        raise ParameterError(f"extent and stride must be positive, got {extent}, {stride}")
    return -(-extent // stride)


def _same_padding(extent, filt, stride):
    out = same_output_length(extent, stride)
    total = max((out - 1) * stride + filt - extent, 0)
    before = total // 2
    return out, before, total - before  # extra padding goes after (bottom/right)


def same_padding(extent: int, filt: int, stride: int):
    """Zero padding (before, after) applied to one axis by SAME convolution."""
    _out, before, after = _same_padding(extent, filt, stride)
    return before, after


def conv2d_same(x: Tensor, filt: Tensor, bias: Tensor, stride) -> Tensor:
    """2-D cross-correlation with SAME zero padding and per-axis strides.

    x is (H, W, C_in), filt is (f_v, f_h, C_in, C_out), bias is (C_out,).
    Output extents obey out = ceil(in / stride) on both spatial axes.  No
    kernel flip is applied (cross-correlation, the usual CNN convention).
    """
    try:
        s_v, s_h = (int(s) for s in stride)
    except TypeError:
        raise ParameterError(f"stride must be a pair, got {stride!r}") from None
    if s_v < 1 or s_h < 1:
        raise ParameterError(f"strides must be positive, got {stride}")
    if x.ndim != 3 or filt.ndim != 4 or bias.ndim != 1:
        raise ShapeError("conv2d_same expects x rank-3, filter rank-4, bias rank-1")
    H, W, C_in = x.shape
    f_v, f_h, fc_in, C_out = filt.shape
    if fc_in != C_in:
        raise ShapeError(f"filter expects {fc_in} input channels, input has {C_in}")
    if bias.shape[0] != C_out:
        raise ShapeError(f"bias has {bias.shape[0]} channels, filter yields {C_out}")
    if f_v < 1 or f_h < 1:
        raise ParameterError("filter extents must be positive")

    H_out, pt, pb = _same_padding(H, f_v, s_v)
    W_out, pl, pr = _same_padding(W, f_h, s_h)
    xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (f_v, f_h), axis=(0, 1))[::s_v, ::s_h]
    win = win[:H_out, :W_out]
    out = np.einsum("hwcab,abco->hwo", win, filt.data, optimize=True) + bias.data

    fd = filt.data

    def backward(g):
        gf = gb = gx = None
        if filt.requires_grad:
            gf = np.einsum("hwcab,hwo->abco", win, g, optimize=True)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            dense_cost = (
                H_out * s_v * W_out * s_h * f_v * f_h * C_in * C_out
            )
            if dense_cost <= _CONV_DENSE_BACKWARD_LIMIT:
                # Transposed convolution: dilate the output gradient by the
                # stride, pad by filter-1, correlate with the flipped filter.
                Hd = (H_out - 1) * s_v + 1
                Wd = (W_out - 1) * s_h + 1
                gd = np.zeros((Hd, Wd, C_out), dtype=g.dtype)
                gd[::s_v, ::s_h] = g
                gdp = np.pad(gd, ((f_v - 1, f_v - 1), (f_h - 1, f_h - 1), (0, 0)))
                wind = sliding_window_view(gdp, (f_v, f_h), axis=(0, 1))
                flipped = fd[::-1, ::-1]
                region = np.einsum("hwoab,abco->hwc", wind, flipped, optimize=True)
                gxp[: region.shape[0], : region.shape[1]] += region
            else:
                for a in range(f_v):
                    rows = slice(a, a + (H_out - 1) * s_v + 1, s_v)
                    for b_off in range(f_h):
                        cols = slice(b_off, b_off + (W_out - 1) * s_h + 1, s_h)
                        gxp[rows, cols] += g @ fd[a, b_off].T
            gx = gxp[pt : pt + H, pl : pl + W]
        return gx, gf, gb

    return _op("conv2d_same", out, (x, filt, bias), backward)


# ---------------------------------------------------------------------------
# pointwise and reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly zero is zero
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (np.where(mask, g, g.dtype.type(0)),)

    return _op("relu", out, (x,), backward)


def softmax(x: Tensor, axis=None) -> Tensor:
    """Softmax over all entries (axis=None) or along one axis.

    The maximum is subtracted before exponentiation, so the result is
    invariant to constant shifts of the input.
    """
    if x.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    if axis is None:
        shifted = x.data - x.data.max()
        e = np.exp(shifted)
        out = e / e.sum()

        def backward(g):
            inner = (g * out).sum()
            return (out * (g - inner),)

    else:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - inner),)

    return _op("softmax", out, (x,), backward)


def _binary_shapes_ok(a, b):
    return a.shape == b.shape or a.shape == () or b.shape == ()


def _reduce_if_scalar(tens, g):
    if tens.shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"add shapes must match or be scalar: {a.shape}, {b.shape}")
    out = a.data + b.data

    def backward(g):
        ga = _reduce_if_scalar(a, g) if a.requires_grad else None
        gb = _reduce_if_scalar(b, g) if b.requires_grad else None
        return ga, gb

    return _op("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"sub shapes must match or be scalar: {a.shape}, {b.shape}")
    out = a.data - b.data

    def backward(g):
        ga = _reduce_if_scalar(a, g) if a.requires_grad else None
        gb = _reduce_if_scalar(b, -g) if b.requires_grad else None
        return ga, gb

    return _op("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"mul shapes must match or be scalar: {a.shape}, {b.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_if_scalar(a, g * bd) if a.requires_grad else None
        gb = _reduce_if_scalar(b, g * ad) if b.requires_grad else None
        return ga, gb

    return _op("mul", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * x.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return _op("scale", out, (x,), backward)


def sum_over_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _op("sum_over_axis", out, (x,), backward)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("mean over an empty axis")
    denom = x.shape[axis]
    out = x.data.mean(axis=axis)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / denom,)

    return _op("mean_over_axis", out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _op("reshape", out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _op("transpose", out, (x,), backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Row gather from a rank-2 tensor; gradient is a scatter-add."""
    if x.ndim != 2:
        raise ShapeError("take_rows expects a rank-2 tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("take_rows index out of range")
    out = x.data[idx]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _op("take_rows", out, (x,), backward)


def pick(x: Tensor, index: int) -> Tensor:
    if x.ndim != 1:
        raise ShapeError("pick expects a rank-1 tensor")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"pick index {index} out of range for {x.shape}")
    out = np.asarray(x.data[index])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _op("pick", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    out = np.log(x.data)
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _op("log", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = out.astype(xd.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _op("sigmoid", out, (x,), backward)


def stack_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack_rows of an empty list")
    width = tensors[0].shape
    for t in tensors:
        if t.ndim != 1 or t.shape != width:
            raise ShapeError("stack_rows expects equal-length vectors")
    out = np.stack([t.data for t in tensors])

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _op("stack_rows", out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# memory-pipeline contractions


def mode1_dot(t3: Tensor, v: Tensor) -> Tensor:
    """scores[i, j] = sum_d t3[i, d, j] * v[d] for a (slots, d, channels) tensor."""
    if t3.ndim != 3 or v.ndim != 1 or t3.shape[1] != v.shape[0]:
        raise ShapeError(f"mode1_dot shapes incompatible: {t3.shape}, {v.shape}")
    out = np.einsum("idj,d->ij", t3.data, v.data)
    td, vd = t3.data, v.data

    def backward(g):
        gt = np.einsum("ij,d->idj", g, vd) if t3.requires_grad else None
        gv = np.einsum("ij,idj->d", g, td) if v.requires_grad else None
        return gt, gv

    return _op("mode1_dot", out, (t3, v), backward)


def weighted_slot_sum(t3: Tensor, weights: Tensor) -> Tensor:
    """out[d] = sum_{j,k} t3[j, d, k] * weights[j, k]."""
    if (
        t3.ndim != 3
        or weights.ndim != 2
        or t3.shape[0] != weights.shape[0]
        or t3.shape[2] != weights.shape[1]
    ):
        raise ShapeError(
            f"weighted_slot_sum shapes incompatible: {t3.shape}, {weights.shape}"
        )
    out = np.einsum("jdk,jk->d", t3.data, weights.data)
    td, wd = t3.data, weights.data

    def backward(g):
        gt = np.einsum("d,jk->jdk", g, wd) if t3.requires_grad else None
        gw = np.einsum("d,jdk->jk", g, td) if weights.requires_grad else None
        return gt, gw

    return _op("weighted_slot_sum", out, (t3, weights), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    ``f`` must map one Tensor to a scalar Tensor and be side-effect free.
    """
    base = np.array(point.data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not isinstance(y, Tensor) or y.data.shape != ():
        raise UsageError("grad_check needs f to return a scalar Tensor")
    tape.backward(y)
    analytic = x.grad.reshape(-1).copy()
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise GradCheckError("non-finite analytic gradient", coordinate=bad)

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        f_plus = float(f(Tensor(base)).data)
        flat[i] = saved - step
        f_minus = float(f(Tensor(base)).data)
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradCheckError("non-finite value during finite differences",
                                 coordinate=i)
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


def grad_check_params(loss_fn, named_params, step: float = 1e-5) -> dict:
    """Check gradients of ``loss_fn()`` w.r.t. each named parameter tensor.

    ``loss_fn`` rebuilds the scalar loss from the live parameter tensors,
    so perturbing ``tensor.data`` in place re-evaluates the full model.
    Returns {name: max relative error}.
    """
    named_params = dict(named_params)
    for t in named_params.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if loss.data.shape != ():
        raise UsageError("grad_check_params needs a scalar loss")
    tape.backward(loss)

    errors = {}
    for name, t in named_params.items():
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        numeric = np.empty_like(analytic)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = float(loss_fn().data)
            flat[i] = saved - step
            f_minus = float(loss_fn().data)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(
                    f"non-finite value while checking {name}", coordinate=i
                )
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        errors[name] = float(rel.max()) if rel.size else 0.0
    return errors
