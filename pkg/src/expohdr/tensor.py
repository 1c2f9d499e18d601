"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every value in the pipeline travels as a (batch, channel, height, width)
array: frames, feature pyramids, flows, weights, scalar losses. The op set
is exactly what the rendering network needs -- convolution, transposed
convolution, PReLU, bilinear upsampling, and a small elementwise suite.

Data is float32 by default; float64 arrays are accepted so that test
oracles can evaluate the same graphs at higher precision. Gradients
accumulate across multiple uses of a tensor, which weight sharing
(the encoder runs on 3-5 frames per step) relies on. No operation
mutates its inputs.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An operation rejected its input shapes."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Immutable rank-4 value, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are rank-4 (batch, channel, height, width), got shape {arr.shape}"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Read-only view of the payload."""
        v = self.data.view()
        v.flags.writeable = False
        return v

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return scalar(float(value), dtype=dtype)


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + np.asarray(g, dtype=t.dtype)


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; populates .grad on graph leaves.

    The graph is consumed: closures and parent links are released so a
    second call on the same graph fails loudly instead of silently
    recomputing.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
    if loss._parents is None:
        raise ValueError("backward: graph already consumed by an earlier backward pass")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not attached to a graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    _accum(loss, np.ones((1, 1, 1, 1), dtype=loss.dtype))
    for node in reversed(topo):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
    for node in topo:
        if node._parents:
            node._backward = None
            node._parents = None  # None marks a consumed interior node
            node.grad = None  # keep grads only on leaves


# ---------------------------------------------------------------------------
# elementwise suite


_AXIS_NAMES = ("batch", "channel", "height", "width")


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if da != db and 1 not in (da, db):
            raise ShapeError(
                f"{op}: axis {ax} ({_AXIS_NAMES[ax]}) mismatch: {da} vs {db}"
            )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(ax for ax in range(4) if shape[ax] == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, _unbroadcast(g * bd, a.shape))
        _accum(b, _unbroadcast(g * ad, b.shape))

    return _result(ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if _grad_enabled and np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains exact zeros in graph mode")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        _accum(a, _unbroadcast(g / bd, a.shape))
        _accum(b, _unbroadcast(-g * out / bd, b.shape))

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _result(-a.data, (a,), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, g * p * ad ** (p - 1.0))

    return _result(ad ** np.asarray(p, dtype=a.dtype), (a,), bw)


def log1p(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, g / (1.0 + ad))

    return _result(np.log1p(ad), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _result(out, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, g * np.sign(ad))

    return _result(np.abs(ad), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    # straight-through subgradient inside [lo, hi], zero outside
    ad = a.data

    def bw(g):
        _accum(a, g * ((ad >= lo) & (ad <= hi)).astype(a.dtype))

    return _result(np.clip(ad, lo, hi), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _result(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(a, g * s)

    return _result(out, (a,), bw)


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        for ax in (0, 2, 3):
            if t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat_channels: tensor {i} axis {ax} ({_AXIS_NAMES[ax]}) "
                    f"mismatch: {t.shape[ax]} vs {ref.shape[ax]}"
                )
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, start:stop])

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(
            f"slice_channels: range [{start}:{stop}] outside channel axis of extent {a.shape[1]}"
        )

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, start:stop] = g
        _accum(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), bw)


def crop_spatial(a: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    _, _, h, w = a.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ShapeError(
            f"crop_spatial: window [{y0}:{y1}, {x0}:{x1}] outside extent ({h}, {w})"
        )

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, :, y0:y1, x0:x1] = g
        _accum(a, full)

    return _result(a.data[:, :, y0:y1, x0:x1].copy(), (a,), bw)


def pad_reflect(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflection-pad the bottom/right spatial borders."""
    if pad_h == 0 and pad_w == 0:
        return a
    _, _, h, w = a.shape
    if pad_h >= h or pad_w >= w:
        raise ShapeError(f"pad_reflect: padding ({pad_h}, {pad_w}) too large for extent ({h}, {w})")
    iy = np.concatenate([np.arange(h), h - 2 - np.arange(pad_h)])
    ix = np.concatenate([np.arange(w), w - 2 - np.arange(pad_w)])

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, (slice(None), slice(None), iy[:, None], ix[None, :]), g)
        _accum(a, full)

    return _result(np.ascontiguousarray(a.data[:, :, iy[:, None], ix[None, :]]), (a,), bw)


def reduce_sum(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full(a.shape, g.reshape(()), dtype=a.dtype))

    return _result(a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1), (a,), bw)


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.full(a.shape, g.reshape(()) / n, dtype=a.dtype))

    return _result((a.data.sum(dtype=a.dtype) / n).reshape(1, 1, 1, 1), (a,), bw)


def mean_channels(a: Tensor) -> Tensor:
    """Mean over the channel axis, keeping it as extent 1."""
    c = a.shape[1]

    def bw(g):
        _accum(a, np.broadcast_to(g / c, a.shape))

    return _result(a.data.mean(axis=1, keepdims=True), (a,), bw)


# ---------------------------------------------------------------------------
# convolution-family ops


def _conv_out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(arr: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = arr.shape
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    if padding:
        arr = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=arr.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = arr[:, :, u : u + stride * (ho - 1) + 1 : stride,
                                   v : v + stride * (wo - 1) + 1 : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = shape
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    c6 = cols.reshape(b, c, kh, kw, ho, wo)
    padded = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            padded[:, :, u : u + stride * (ho - 1) + 1 : stride,
                   v : v + stride * (wo - 1) + 1 : stride] += c6[:, :, u, v]
    if padding:
        return np.ascontiguousarray(padded[:, :, padding : padding + h, padding : padding + w])
    return padded


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input channel axis is {c} but weight expects {ic}")
    if bias.shape != (1, oc, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {oc}, 1, 1)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: output extent ({ho}, {wo}) not positive for input ({h}, {w}), "
            f"kernel ({kh}, {kw}), stride {stride}, padding {padding}"
        )
    cols = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols) + bias.data.reshape(1, oc, 1)
    out = out.reshape(b, oc, ho, wo)

    def bw(g):
        g2 = g.reshape(b, oc, ho * wo)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=(0, 2)).reshape(1, oc, 1, 1))
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            _accum(x, _col2im(gcols, x.shape, kh, kw, stride, padding))

    return _result(out, (x, weight, bias), bw)


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is (in_ch, out_ch, kh, kw).

    With matching arguments this is exactly the input-gradient of conv2d,
    so conv2d(x, w, .) and deconv2d(y, w, .) form an adjoint pair.
    """
    b, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"deconv2d: input channel axis is {c} but weight expects {ic}")
    if bias.shape != (1, oc, 1, 1):
        raise ShapeError(f"deconv2d: bias shape {bias.shape} != (1, {oc}, 1, 1)")
    if stride < 1:
        raise ShapeError(f"deconv2d: stride must be positive, got {stride}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"deconv2d: output extent ({ho}, {wo}) not positive for input ({h}, {w}), "
            f"kernel ({kh}, {kw}), stride {stride}, padding {padding}"
        )
    w2 = weight.data.reshape(ic, oc * kh * kw)
    xflat = x.data.reshape(b, ic, h * w)
    cols = np.matmul(w2.T, xflat)
    out = _col2im(cols, (b, oc, ho, wo), kh, kw, stride, padding)
    out = out + bias.data

    def bw(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))
        gcols = None
        if weight.requires_grad or x.requires_grad:
            gcols = _im2col(g, kh, kw, stride, padding)  # (b, oc*kh*kw, h*w)
        if weight.requires_grad:
            gw = np.matmul(xflat, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            _accum(x, np.matmul(w2, gcols).reshape(x.shape))

    return _result(out, (x, weight, bias), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    c = x.shape[1]
    if slope.shape not in ((1, 1, 1, 1), (1, c, 1, 1)):
        raise ShapeError(
            f"prelu: slope shape {slope.shape} is neither scalar nor per-channel (1, {c}, 1, 1)"
        )
    xd = x.data
    negmask = xd < 0
    out = np.where(negmask, slope.data * xd, xd)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * np.where(negmask, np.broadcast_to(slope.data, xd.shape), np.asarray(1.0, dtype=x.dtype)))
        if slope.requires_grad:
            gs = g * np.where(negmask, xd, 0.0)
            _accum(slope, _unbroadcast(gs, slope.shape))

    return _result(out, (x, slope), bw)


def _upsample_coords(n_out: int, scale: int, n_in: int):
    # half-pixel-center convention (align-corners false), border clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    if scale < 1 or int(scale) != scale:
        raise ShapeError(f"upsample_bilinear: scale must be a positive integer, got {scale}")
    if scale == 1:
        def bw_id(g):
            _accum(x, g)

        return _result(x.data.copy(), (x,), bw_id)
    b, c, h, w = x.shape
    y0, y1, fy = _upsample_coords(h * scale, scale, h)
    x0, x1, fx = _upsample_coords(w * scale, scale, w)
    fy_col = fy.astype(x.dtype)[None, None, :, None]
    fx_row = fx.astype(x.dtype)[None, None, None, :]
    xd = x.data
    rows = xd[:, :, y0, :] * (1 - fy_col) + xd[:, :, y1, :] * fy_col
    out = rows[:, :, :, x0] * (1 - fx_row) + rows[:, :, :, x1] * fx_row

    def bw(g):
        grows = np.zeros((b, c, h * scale, w), dtype=x.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0), g * (1 - fx_row))
        np.add.at(grows, (slice(None), slice(None), slice(None), x1), g * fx_row)
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), grows * (1 - fy_col))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), grows * fy_col)
        _accum(x, gx)

    return _result(np.ascontiguousarray(out), (x,), bw)
