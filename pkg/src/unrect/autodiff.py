"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records operations in execution order; backward() replays the records
once, in reverse, accumulating gradients additively. Tensors built without a
tape behave as plain forward-mode values, so the same code path serves both
training and inference.

All tensor contractions go through np.einsum with optimize=False. That keeps
a fixed scalar accumulation order, so results are bitwise reproducible across
runs and platforms and agree exactly with a naive loop reference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError


def _contract(spec: str, *ops: np.ndarray) -> np.ndarray:
    # optimize=False: fixed loop order, bitwise-stable accumulation.
    return np.einsum(spec, *ops, optimize=False)


class Tape:
    """Ordered record of differentiable operations."""

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out, inputs, backward) -> None:
        self._records.append((out, inputs, backward))

    def backward(self, loss: "DiffTensor", seed=None) -> None:
        """Seed d(loss)/d(loss) and sweep the records once in reverse.

        Grads of every tensor touched by this tape are reset first, so
        repeated backward calls do not accumulate across sweeps.
        """
        if loss.tape is not self:
            raise ValidationError("backward: loss tensor does not belong to this tape")
        if seed is None and loss.data.size != 1:
            raise ValidationError(
                f"backward: loss must be scalar unless a seed is given, got shape {loss.data.shape}"
            )
        for out, inputs, _ in self._records:
            out.grad = None
            for t in inputs:
                t.grad = None
        if seed is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = np.asarray(seed, dtype=loss.data.dtype)
        for out, inputs, bwd in reversed(self._records):
            g = out.grad
            if g is None:
                # branch that does not reach the loss
                continue
            bwd(g)


class DiffTensor:
    """Array value plus optional tape membership and accumulated gradient."""

    __array_ufunc__ = None  # keep numpy from hijacking operators
    __slots__ = ("data", "tape", "grad")

    def __init__(self, data, tape: Tape | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        taped = "taped" if self.tape is not None else "const"
        return f"DiffTensor(shape={self.data.shape}, dtype={self.data.dtype}, {taped})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return pow_(self, p)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def leaf(data, tape: Tape) -> DiffTensor:
    """Trainable input: participates in the tape, receives a gradient."""
    if tape is None:
        raise ValidationError("leaf: tape must not be None, use constant() instead")
    return DiffTensor(data, tape)


def constant(data) -> DiffTensor:
    """Fixed value: never receives a gradient."""
    return DiffTensor(data, None)


def detach(x: DiffTensor) -> DiffTensor:
    """Copy of x cut off from the tape."""
    return DiffTensor(x.data, None)


def _lift(x, like: DiffTensor | None = None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    if like is not None and np.isscalar(x):
        return DiffTensor(np.asarray(x, dtype=like.data.dtype), None)
    return DiffTensor(np.asarray(x), None)


def _join_tape(op: str, *ts: DiffTensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValidationError(f"{op}: operands belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(t: DiffTensor, g) -> None:
    # Backward closures must never mutate their upstream grad in place;
    # rebinding here keeps shared views safe.
    if t.tape is None:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _check_broadcast(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, a.data.shape, b.data.shape)


def _binary(op, a, b, fwd, bwd_a, bwd_b):
    a = _lift(a, like=b if isinstance(b, DiffTensor) else None)
    b = _lift(b, like=a)
    _check_broadcast(op, a, b)
    tape = _join_tape(op, a, b)
    out = DiffTensor(fwd(a.data, b.data), tape)
    if tape is not None:
        def bwd(g, a=a, b=b, out=out):
            if a.tape is not None:
                _acc(a, bwd_a(g, a.data, b.data, out.data))
            if b.tape is not None:
                _acc(b, bwd_b(g, a.data, b.data, out.data))
        tape.record(out, (a, b), bwd)
    return out


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def maximum(a, b):
    # ties route the gradient to the first operand
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y, o: g * (x >= y), lambda g, x, y, o: g * (x < y))


def minimum(a, b):
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y, o: g * (x <= y), lambda g, x, y, o: g * (x > y))


def _unary(op, x, fwd, bwd_fn):
    x = _lift(x)
    tape = x.tape
    out = DiffTensor(fwd(x.data), tape)
    if tape is not None:
        def bwd(g, x=x, out=out):
            _acc(x, bwd_fn(g, x.data, out.data))
        tape.record(out, (x,), bwd)
    return out


def neg(x):
    return _unary("neg", x, lambda d: -d, lambda g, d, o: -g)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, d, o: g * o)


def log(x):
    return _unary("log", x, np.log, lambda g, d, o: g / d)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, d, o: g / (2.0 * o))


def abs_(x):
    # subgradient 0 at the kink
    return _unary("abs", x, np.abs, lambda g, d, o: g * np.sign(d))


def pow_(x, p):
    if isinstance(p, DiffTensor):
        raise ValidationError("pow: exponent must be a plain number")
    p = float(p)
    return _unary("pow", x, lambda d: d ** p, lambda g, d, o: g * p * d ** (p - 1.0))


def sigmoid(x):
    def fwd(d):
        z = np.exp(-np.abs(d))
        return np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    return _unary("sigmoid", x, fwd, lambda g, d, o: g * o * (1.0 - o))


def elu(x, alpha: float = 1.0):
    def fwd(d):
        return np.where(d > 0, d, alpha * (np.exp(np.minimum(d, 0.0)) - 1.0))

    def bwd(g, d, o):
        return np.where(d > 0, g, g * (o + alpha))

    return _unary("elu", x, fwd, bwd)


def where(cond, a, b):
    """Select by a fixed boolean mask; the mask itself is not differentiated."""
    cond = np.asarray(cond.data if isinstance(cond, DiffTensor) else cond, dtype=bool)
    a = _lift(a, like=b if isinstance(b, DiffTensor) else None)
    b = _lift(b, like=a)
    tape = _join_tape("where", a, b)
    out = DiffTensor(np.where(cond, a.data, b.data), tape)
    if tape is not None:
        def bwd(g, a=a, b=b, cond=cond):
            zero = np.zeros((), dtype=g.dtype)
            if a.tape is not None:
                _acc(a, np.where(cond, g, zero))
            if b.tape is not None:
                _acc(b, np.where(cond, zero, g))
        tape.record(out, (a, b), bwd)
    return out


def getitem(x, idx):
    """Basic slicing only; integer-array gathers belong to grid_sample."""
    x = _lift(x)
    out_data = x.data[idx]
    tape = x.tape
    out = DiffTensor(out_data, tape)
    if tape is not None:
        def bwd(g, x=x, idx=idx):
            gp = np.zeros_like(x.data)
            gp[idx] = g
            _acc(x, gp)
        tape.record(out, (x,), bwd)
    return out


def reshape(x, shape):
    x = _lift(x)
    out = DiffTensor(x.data.reshape(shape), x.tape)
    if x.tape is not None:
        def bwd(g, x=x):
            _acc(x, np.asarray(g).reshape(x.data.shape))
        x.tape.record(out, (x,), bwd)
    return out


def transpose2d(x):
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose2d", x.data.shape)
    out = DiffTensor(x.data.T, x.tape)
    if x.tape is not None:
        def bwd(g, x=x):
            _acc(x, np.asarray(g).T)
        x.tape.record(out, (x,), bwd)
    return out


def broadcast_to(x, shape):
    x = _lift(x)
    out = DiffTensor(np.broadcast_to(x.data, shape), x.tape)
    if x.tape is not None:
        def bwd(g, x=x):
            _acc(x, g)  # _acc unbroadcasts
        x.tape.record(out, (x,), bwd)
    return out


def concat(tensors, axis: int = 0):
    tensors = [_lift(t) for t in tensors]
    tape = _join_tape("concat", *tensors)
    try:
        stacked = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.data.shape for t in tensors])
    out = DiffTensor(stacked, tape)
    if tape is not None:
        sizes = [t.data.shape[axis] for t in tensors]

        def bwd(g, tensors=tensors, sizes=sizes, axis=axis):
            off = 0
            for t, n in zip(tensors, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(off, off + n)
                _acc(t, g[tuple(sl)])
                off += n
        tape.record(out, tuple(tensors), bwd)
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, axis, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    gshape = [1 if i in axis else n for i, n in enumerate(shape)]
    return np.broadcast_to(np.asarray(g).reshape(gshape), shape)


def sum_(x, axis=None, keepdims: bool = False):
    x = _lift(x)
    ax = _norm_axis(axis, x.data.ndim)
    out = DiffTensor(x.data.sum(axis=ax, keepdims=keepdims), x.tape)
    if x.tape is not None:
        def bwd(g, x=x, ax=ax):
            _acc(x, _expand_reduced(g, ax, x.data.shape))
        x.tape.record(out, (x,), bwd)
    return out


def mean(x, axis=None, keepdims: bool = False):
    x = _lift(x)
    ax = _norm_axis(axis, x.data.ndim)
    out = DiffTensor(x.data.mean(axis=ax, keepdims=keepdims), x.tape)
    if x.tape is not None:
        n = x.data.size if ax is None else int(np.prod([x.data.shape[i] for i in ax]))

        def bwd(g, x=x, ax=ax, n=n):
            _acc(x, _expand_reduced(np.asarray(g) / n, ax, x.data.shape))
        x.tape.record(out, (x,), bwd)
    return out


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    tape = _join_tape("matmul", a, b)
    out = DiffTensor(_contract("ij,jk->ik", a.data, b.data), tape)
    if tape is not None:
        def bwd(g, a=a, b=b):
            g = np.asarray(g)
            if a.tape is not None:
                _acc(a, _contract("ik,jk->ij", g, b.data))
            if b.tape is not None:
                _acc(b, _contract("ij,ik->jk", a.data, g))
        tape.record(out, (a, b), bwd)
    return out


def softmax_rows(x):
    """Softmax along the last axis; each row of the output sums to one."""
    x = _lift(x)
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = DiffTensor(e / e.sum(axis=-1, keepdims=True), x.tape)
    if x.tape is not None:
        def bwd(g, x=x, out=out):
            s = out.data
            _acc(x, (g - (g * s).sum(axis=-1, keepdims=True)) * s)
        x.tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial ops


def pad_reflect2d(x, pad: int):
    """Reflect-pad the last two axes (edge sample not repeated)."""
    x = _lift(x)
    h, w = x.data.shape[-2:]
    if pad < 1 or pad > min(h, w) - 1:
        raise ValidationError(f"pad_reflect2d: pad {pad} invalid for spatial size {(h, w)}")

    def refl(n, p):
        return np.concatenate([np.arange(p, 0, -1), np.arange(n), np.arange(n - 2, n - 2 - p, -1)])

    iy, ix = refl(h, pad), refl(w, pad)
    out = DiffTensor(x.data[..., iy[:, None], ix[None, :]], x.tape)
    if x.tape is not None:
        def bwd(g, x=x, iy=iy, ix=ix):
            g = np.asarray(g)
            lead = x.data.shape[:-2]
            gp = np.zeros_like(x.data).reshape((-1,) + x.data.shape[-2:])
            gf = g.reshape((-1,) + g.shape[-2:])
            n = gp.shape[0]
            np.add.at(gp, (np.arange(n)[:, None, None], iy[:, None], ix[None, :]), gf)
            _acc(x, gp.reshape(lead + x.data.shape[-2:]))
        x.tape.record(out, (x,), bwd)
    return out


def avg_pool2(x):
    """2x2 average pooling with stride 2 on the last two axes."""
    x = _lift(x)
    h, w = x.data.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", x.data.shape)
    lead = x.data.shape[:-2]
    out_data = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))
    out = DiffTensor(out_data, x.tape)
    if x.tape is not None:
        def bwd(g, x=x, lead=lead, h=h, w=w):
            g = np.asarray(g)
            ge = np.broadcast_to(g[..., :, None, :, None] / 4.0, lead + (h // 2, 2, w // 2, 2))
            _acc(x, ge.reshape(x.data.shape))
        x.tape.record(out, (x,), bwd)
    return out


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0):
    """2-D convolution (cross-correlation), x (B,C,H,W), w (O,C,kh,kw).

    The contraction column order is (channel, row, col), matching a plain
    loop nest over c then ki then kj, so the result is bitwise-equal to a
    naive scalar accumulation.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    b_, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b_, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    y = np.stack([_contract("ok,kl->ol", wmat, cols[i]) for i in range(b_)])
    y = y.reshape(b_, o, ho, wo)
    if bias is not None:
        bias = _lift(bias)
        if bias.data.shape != (o,):
            raise ShapeError("conv2d bias", bias.data.shape, (o,))
        y = y + bias.data.reshape(1, o, 1, 1)
    tape = _join_tape("conv2d", x, w, *( [bias] if bias is not None else [] ))
    out = DiffTensor(y, tape)
    if tape is not None:
        inputs = (x, w) + ((bias,) if bias is not None else ())

        def bwd(g, x=x, w=w, bias=bias, cols=cols, wmat=wmat, dims=(b_, c, h, wd, o, kh, kw, s, p, ho, wo)):
            b_, c, h, wd, o, kh, kw, s, p, ho, wo = dims
            g = np.asarray(g)
            gmat = g.reshape(b_, o, ho * wo)
            if bias is not None and bias.tape is not None:
                _acc(bias, g.sum(axis=(0, 2, 3)))
            if w.tape is not None:
                gw = np.zeros_like(wmat)
                for i in range(b_):
                    gw = gw + _contract("ol,kl->ok", gmat[i], cols[i])
                _acc(w, gw.reshape(w.data.shape))
            if x.tape is not None:
                hp, wp = h + 2 * p, wd + 2 * p
                gxp = np.zeros((b_, c, hp, wp), dtype=g.dtype)
                for i in range(b_):
                    g6 = _contract("ok,ol->kl", wmat, gmat[i]).reshape(c, kh, kw, ho, wo)
                    for ki in range(kh):
                        for kj in range(kw):
                            gxp[i, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += g6[:, ki, kj]
                _acc(x, gxp[:, :, p:p + h, p:p + wd] if p else gxp)
        tape.record(out, inputs, bwd)
    return out


def conv_transpose2d(x, w):
    """Transposed convolution with a fixed 2x2 kernel and stride 2.

    x (B,C,H,W), w (C,O,2,2) -> (B,O,2H,2W). Used for decoder upsampling.
    """
    x, w = _lift(x), _lift(w)
    if (x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (2, 2)
            or x.data.shape[1] != w.data.shape[0]):
        raise ShapeError("conv_transpose2d", x.data.shape, w.data.shape)
    b_, c, h, wd = x.data.shape
    o = w.data.shape[1]
    t = _contract("bchw,cokl->bohwkl", x.data, w.data)
    y = np.ascontiguousarray(t.transpose(0, 1, 2, 4, 3, 5)).reshape(b_, o, 2 * h, 2 * wd)
    tape = _join_tape("conv_transpose2d", x, w)
    out = DiffTensor(y, tape)
    if tape is not None:
        def bwd(g, x=x, w=w, dims=(b_, c, h, wd, o)):
            b_, c, h, wd, o = dims
            gt = np.asarray(g).reshape(b_, o, h, 2, wd, 2).transpose(0, 1, 2, 4, 3, 5)
            if x.tape is not None:
                _acc(x, _contract("bohwkl,cokl->bchw", gt, w.data))
            if w.tape is not None:
                _acc(w, _contract("bchw,bohwkl->cokl", x.data, gt))
        tape.record(out, (x, w), bwd)
    return out


def grid_sample(img, xs, ys):
    """Bilinear lookup of img (C,H,W) at pixel coordinates xs, ys.

    Out-of-rectangle queries clamp to the border; their coordinate gradient
    is zero. Differentiable in both the image and the coordinates. The image
    gradient is scattered with np.add.at, which is deterministic.
    """
    img, xs, ys = _lift(img), _lift(xs), _lift(ys)
    if img.data.ndim != 3:
        raise ShapeError("grid_sample", img.data.shape)
    if xs.data.shape != ys.data.shape:
        raise ShapeError("grid_sample coords", xs.data.shape, ys.data.shape)
    c, h, w = img.data.shape
    xc = np.clip(xs.data, 0.0, w - 1.0)
    yc = np.clip(ys.data, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    v00 = img.data[:, y0, x0]
    v10 = img.data[:, y0, x1]
    v01 = img.data[:, y1, x0]
    v11 = img.data[:, y1, x1]
    top = v00 + wx * (v10 - v00)
    bot = v01 + wx * (v11 - v01)
    out_data = top + wy * (bot - top)
    tape = _join_tape("grid_sample", img, xs, ys)
    out = DiffTensor(out_data, tape)
    if tape is not None:
        def bwd(g, img=img, xs=xs, ys=ys, cache=(x0, x1, y0, y1, wx, wy, v00, v10, v01, v11)):
            x0, x1, y0, y1, wx, wy, v00, v10, v01, v11 = cache
            g = np.asarray(g)
            if img.tape is not None:
                gi = np.zeros_like(img.data)
                ci = np.arange(c).reshape((c,) + (1,) * wx.ndim)
                np.add.at(gi, (ci, y0, x0), g * (1 - wx) * (1 - wy))
                np.add.at(gi, (ci, y0, x1), g * wx * (1 - wy))
                np.add.at(gi, (ci, y1, x0), g * (1 - wx) * wy)
                np.add.at(gi, (ci, y1, x1), g * wx * wy)
                _acc(img, gi)
            if xs.tape is not None or ys.tape is not None:
                inx = (xs.data > 0) & (xs.data < w - 1)
                iny = (ys.data > 0) & (ys.data < h - 1)
                if xs.tape is not None:
                    dx = (1 - wy) * (v10 - v00) + wy * (v11 - v01)
                    _acc(xs, (g * dx).sum(axis=0) * inx)
                if ys.tape is not None:
                    dy = (1 - wx) * (v01 - v00) + wx * (v11 - v10)
                    _acc(ys, (g * dy).sum(axis=0) * iny)
        tape.record(out, (img, xs, ys), bwd)
    return out


# ---------------------------------------------------------------------------
# rotation primitive


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]], dtype=v.dtype)


def _rot_coeffs(u: float):
    """A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3 with u = t^2.

    All three are even series in t, so they stay finite and accurate through
    u = 0; below the switch point the truncated series is exact to double
    precision.
    """
    if u < 1e-6:
        a = 1.0 - u / 6.0 + u * u / 120.0
        b = 0.5 - u / 24.0 + u * u / 720.0
        c = 1.0 / 6.0 - u / 120.0 + u * u / 5040.0
    else:
        t = math.sqrt(u)
        a = math.sin(t) / t
        b = (1.0 - math.cos(t)) / u
        c = (t - math.sin(t)) / (u * t)
    return a, b, c


def rotation_forward(v: np.ndarray) -> np.ndarray:
    """Plain-numpy rotation matrix from an axis-angle vector."""
    v = np.asarray(v)
    if v.shape != (3,):
        raise ShapeError("rotation_forward", v.shape)
    u = float(v @ v)
    a, b, _ = _rot_coeffs(u)
    k = _skew(v)
    dt = v.dtype.type
    return np.eye(3, dtype=v.dtype) + dt(a) * k + dt(b) * _contract("ij,jk->ik", k, k)


def rot_from_axis_angle(v):
    """Differentiable rotation matrix (3,3) from an axis-angle vector (3,)."""
    v = _lift(v)
    if v.data.shape != (3,):
        raise ShapeError("rot_from_axis_angle", v.data.shape)
    out = DiffTensor(rotation_forward(v.data), v.tape)
    if v.tape is not None:
        def bwd(g, v=v, out=out):
            g = np.asarray(g)
            r = out.data
            m = _contract("ji,jk->ik", r, g)
            wv = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]],
                          dtype=v.data.dtype)
            u = float(v.data @ v.data)
            _, b, c = _rot_coeffs(u)
            k = _skew(v.data)
            dt = v.data.dtype.type
            jr = np.eye(3, dtype=v.data.dtype) - dt(b) * k + dt(c) * _contract("ij,jk->ik", k, k)
            _acc(v, _contract("ji,j->i", jr, wv))
        v.tape.record(out, (v,), bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    passed: bool
    max_rel_err: float
    n_checked: int
    n_failed: int
    tol: float
    step: float
    failures: list = field(default_factory=list)  # (flat_index, analytic, numeric, rel_err)

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return (f"gradient check {state}: max rel err {self.max_rel_err:.3e} "
                f"over {self.n_checked} coords, {self.n_failed} above tol {self.tol:g}")


def gradient_check(f, x, step: float = 1e-6, tol: float = 1e-4,
                   sample: int | None = None, rng: np.random.Generator | None = None,
                   max_report: int = 10, indices=None) -> GradCheckReport:
    """Compare d f(x) / dx from the tape against central finite differences.

    f maps one DiffTensor to a scalar DiffTensor. Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-6); a non-finite mismatch counts
    as a failure rather than raising. indices restricts probing to those flat
    coordinates; callers use it to stay clear of known non-smooth points
    (a central difference straddling a bilinear cell edge or an |x| kink
    measures the slope jump there, not the derivative).
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = leaf(x.copy(), tape)
    y = f(xt)
    if not isinstance(y, DiffTensor) or y.data.size != 1:
        raise ValidationError("gradient_check: f must return a scalar DiffTensor")
    tape.backward(y)
    ga = np.zeros_like(x) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    size = x.size
    if indices is not None:
        idxs = np.asarray(indices, dtype=int)
        if sample is not None and sample < idxs.size:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(idxs, size=sample, replace=False)
    elif sample is not None and sample < size:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(size, size=sample, replace=False)
    else:
        idxs = np.arange(size)

    max_rel = 0.0
    n_failed = 0
    failures = []
    for i in idxs:
        xp = x.copy()
        xp.flat[i] += step
        fp = float(f(constant(xp)).data)
        xm = x.copy()
        xm.flat[i] -= step
        fm = float(f(constant(xm)).data)
        num = (fp - fm) / (2.0 * step)
        ana = float(ga.flat[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        ok = rel <= tol  # NaN compares false, so a NaN mismatch fails
        if not ok:
            n_failed += 1
            if len(failures) < max_report:
                failures.append((int(i), ana, num, rel))
        if math.isfinite(rel):
            max_rel = max(max_rel, rel)
        else:
            max_rel = math.inf
    return GradCheckReport(passed=(n_failed == 0), max_rel_err=max_rel,
                           n_checked=len(idxs), n_failed=n_failed,
                           tol=tol, step=step, failures=failures)
