"""Dense float64 tensors with tape-based reverse-mode autodiff.

Forward ops record a closure per result node; ``backward`` on a scalar walks
the recorded graph once and frees it (the tape is single-use). Raw array
math is numpy; stride-1 depthwise convolutions additionally have an
FFT-based fast path (scipy.fft) that is exact to roundoff.

Every op validates that its output is finite and raises NumericError
otherwise, so NaN/Inf surfaces at the op that produced it.
"""

import numpy as np
import scipy.fft as sfft
from scipy.special import expit

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops inside record nothing on the tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self._spent = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff machinery --------------------------------------------------

    def backward(self):
        """Populate .grad of every reachable requires_grad tensor, then clear the tape."""
        if self.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._spent:
            raise ContractError("tape already consumed; rebuild the graph before calling backward again")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._spent:
                raise ContractError("graph reuses a subgraph whose tape was already consumed")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)
            if node._parents:
                node._spent = True
                node._bwd = None
                node._parents = ()
                node.grad = None  # intermediate grads are not kept

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method aliases --------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, bwd, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to the given original (broadcast-from) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def relu(x):
    x = _wrap(x)
    mask = x.data > 0.0

    def bwd(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bwd, "relu")


def sigmoid(x):
    x = _wrap(x)
    y = expit(x.data)

    def bwd(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), bwd, "sigmoid")


def exp(x):
    x = _wrap(x)
    y = np.exp(x.data)

    def bwd(g):
        x._accumulate(g * y)

    return _make(y, (x,), bwd, "exp")


def log(x):
    x = _wrap(x)

    def bwd(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bwd, "log")


# -- reductions -----------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = _wrap(x)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd, "sum")


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]

    def bwd(g):
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd, "mean")


# -- shape manipulation -----------------------------------------------------------


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape

    def bwd(g):
        x._accumulate(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd, "reshape")


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        x._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd, "transpose")


def take(x, idx):
    """Indexing/slicing; advanced integer-array indexing routes gradients with np.add.at."""
    x = _wrap(x)
    advanced = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def bwd(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        x._accumulate(gx)

    return _make(np.array(x.data[idx], dtype=np.float64), (x,), bwd, "take")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


# -- linear algebra ------------------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if b.ndim < 2:
        raise DimensionError("matmul: right operand must have at least 2 dimensions")
    a_vec = a.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    if ad.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner axes disagree ({ad.shape[-1]} vs {b.shape[-2]})"
        )
    out = np.matmul(ad, b.data)
    if a_vec:
        out = out[..., 0, :]

    def bwd(g):
        gg = g[..., None, :] if a_vec else g
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(b.data, -1, -2))
            if a_vec:
                ga = ga[..., 0, :]
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bwd, "matmul")


def dense(x, w, b=None):
    """Affine map x @ w (+ b). x: (..., F_in), w: (F_in, F_out), b: (F_out,)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# -- softmax family ----------------------------------------------------------------------


def softmax(x, axis=-1):
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _make(y, (x,), bwd, "softmax")


def log_softmax(x, axis=-1):
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bwd, "log_softmax")


def l2_normalize(x, axis=-1):
    x = _wrap(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("l2_normalize: zero vector has no direction")
    y = x.data / norm

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate((g - y * dot) / norm)

    return _make(y, (x,), bwd, "l2_normalize")


# -- pooling ---------------------------------------------------------------------


def pool_global(x, mode="avg"):
    """(..., C, H, W) -> (..., C). Max mode sends gradient to the first maximum."""
    x = _wrap(x)
    if x.ndim < 3:
        raise DimensionError("pool_global expects (...,C,H,W)")
    H, W = x.shape[-2], x.shape[-1]
    if H < 1 or W < 1:
        raise DimensionError("pool_global: empty spatial extent on height/width axis")
    flat = x.data.reshape(x.shape[:-2] + (H * W,))
    if mode == "avg":
        out = flat.mean(axis=-1)

        def bwd(g):
            x._accumulate(np.broadcast_to(g[..., None, None] / (H * W), x.shape))

    elif mode == "max":
        arg = flat.argmax(axis=-1)  # first index on ties (row-major)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bwd(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
            x._accumulate(gf.reshape(x.shape))

    else:
        raise ContractError(f"pool_global: unknown mode {mode!r}")
    return _make(out, (x,), bwd, "pool_global")


def avg_pool2d(x, k):
    """k x k average pooling with stride k; spatial extents must divide by k."""
    x = _wrap(x)
    H, W = x.shape[-2], x.shape[-1]
    if H % k:
        raise DimensionError(f"avg_pool2d: height {H} not divisible by {k}")
    if W % k:
        raise DimensionError(f"avg_pool2d: width {W} not divisible by {k}")
    lead = x.shape[:-2]
    view = x.data.reshape(lead + (H // k, k, W // k, k))
    out = view.mean(axis=(-3, -1))

    def bwd(g):
        gx = np.broadcast_to(g[..., :, None, :, None] / (k * k), lead + (H // k, k, W // k, k))
        x._accumulate(gx.reshape(x.shape))

    return _make(out, (x,), bwd, "avg_pool2d")


# -- convolution -------------------------------------------------------------------

# Depthwise stride-1 convolutions switch to an FFT path once the direct
# per-tap schedule would be slower; both paths agree to roundoff.
_FFT_MIN_TAPS = 25
_FFT_MIN_AREA = 64


def _conv_shapes(H, W, kh, kw, stride, padding):
    if H + 2 * padding < kh:
        raise DimensionError(f"conv2d: height {H} with padding {padding} is smaller than kernel extent {kh}")
    if W + 2 * padding < kw:
        raise DimensionError(f"conv2d: width {W} with padding {padding} is smaller than kernel extent {kw}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    return Ho, Wo


def _pad_spatial(a, p):
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, stride=1, padding=0, depthwise=False):
    """2-D convolution (cross-correlation, the CNN convention).

    x: (C,H,W) or (N,C,H,W). Regular mode: w is (C_out, C_in, kh, kw).
    Depthwise mode: w is (C_out, kh, kw) with C_out a multiple of C_in;
    output channel o reads input channel o // (C_out // C_in).
    """
    x = _wrap(x)
    w = _wrap(w)
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError("conv2d: input must be (C,H,W) or (N,C,H,W)")
    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    if depthwise:
        if w.ndim != 3:
            raise DimensionError("conv2d: depthwise weights must be (C_out, kh, kw)")
        C_out, kh, kw = w.shape
        if C_out % C != 0:
            raise DimensionError(
                f"conv2d: depthwise C_out {C_out} is not a multiple of C_in {C} on the channel axis"
            )
        mult = C_out // C
    else:
        if w.ndim != 4:
            raise DimensionError("conv2d: weights must be (C_out, C_in, kh, kw)")
        C_out, C_in_w, kh, kw = w.shape
        if C_in_w != C:
            raise DimensionError(f"conv2d: weight channel axis {C_in_w} does not match input channels {C}")
        mult = None
    Ho, Wo = _conv_shapes(H, W, kh, kw, stride, padding)

    if depthwise:
        fft_ok = stride == 1 and mult == 1 and kh == kw and kh * kw >= _FFT_MIN_TAPS and Ho * Wo >= _FFT_MIN_AREA
        if fft_ok:
            out, bwd = _depthwise_fft(x, w, xd, padding, kh)
        else:
            out, bwd = _depthwise_taps(x, w, xd, stride, padding, kh, kw, mult, Ho, Wo)
    elif kh == kw == 1 and stride == 1 and padding == 0:
        out, bwd = _conv_pointwise(x, w, xd)
    else:
        out, bwd = _conv_im2col(x, w, xd, stride, padding, kh, kw, Ho, Wo)

    if single:
        inner_bwd = bwd
        out = out[0]

        def bwd(g):
            inner_bwd(g[None])

    return _make(out, (x, w), bwd, "conv2d")


def _conv_pointwise(x, w, xd):
    N, C, H, W = xd.shape
    w2 = w.data[:, :, 0, 0]
    out = np.matmul(w2, xd.reshape(N, C, H * W)).reshape(N, -1, H, W)

    def bwd(g):
        g2 = g.reshape(N, g.shape[1], H * W)
        if x.requires_grad:
            gx = np.matmul(w2.T, g2).reshape(xd.shape)
            x._accumulate(gx if x.ndim == 4 else gx)
        if w.requires_grad:
            gw = np.matmul(g2, xd.reshape(N, C, H * W).transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(gw[:, :, None, None])

    return out, bwd


def _conv_im2col(x, w, xd, stride, padding, kh, kw, Ho, Wo):
    N, C, H, W = xd.shape
    C_out = w.shape[0]
    xp = _pad_spatial(xd, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * kh * kw, Ho * Wo)
    w2 = w.data.reshape(C_out, C * kh * kw)
    out = np.matmul(w2, cols).reshape(N, C_out, Ho, Wo)

    def bwd(g):
        g2 = g.reshape(N, C_out, Ho * Wo)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(N, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
            x._accumulate(gx)

    return out, bwd


def _depthwise_taps(x, w, xd, stride, padding, kh, kw, mult, Ho, Wo):
    N, C, H, W = xd.shape
    C_out = C * mult
    xp = _pad_spatial(xd, padding)
    xr = xp if mult == 1 else xp[:, np.repeat(np.arange(C), mult)]
    out = np.zeros((N, C_out, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            out += xr[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * w.data[None, :, i, j, None, None]

    def bwd(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xr[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                    gw[:, i, j] = np.einsum("nchw,nchw->c", sl, g)
            w._accumulate(gw)
        if x.requires_grad:
            gxr = np.zeros_like(xr)
            for i in range(kh):
                for j in range(kw):
                    gxr[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * w.data[None, :, i, j, None, None]
            gxp = gxr if mult == 1 else gxr.reshape(N, C, mult, *xp.shape[2:]).sum(axis=2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
            x._accumulate(gx)

    return out, bwd


def _fft_sizes(Hp, Wp):
    return sfft.next_fast_len(Hp), sfft.next_fast_len(Wp)


def _depthwise_fft(x, w, xd, padding, k):
    """Stride-1 same-channel depthwise conv via circular FFT on the padded grid."""
    N, C, H, W = xd.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = Hp - k + 1, Wp - k + 1
    S1, S2 = _fft_sizes(Hp, Wp)
    xp = _pad_spatial(xd, padding)
    F = sfft.rfft2(xp, s=(S1, S2))
    kbuf = np.zeros((C, S1, S2))
    kbuf[:, :k, :k] = w.data[:, ::-1, ::-1]
    out_full = sfft.irfft2(F * sfft.rfft2(kbuf), s=(S1, S2))
    out = np.ascontiguousarray(out_full[:, :, k - 1 : k - 1 + Ho, k - 1 : k - 1 + Wo])

    def bwd(g):
        G = sfft.rfft2(g, s=(S1, S2))
        if x.requires_grad:
            dbuf = np.zeros((C, S1, S2))
            dbuf[:, :k, :k] = w.data
            gxp = sfft.irfft2(G * sfft.rfft2(dbuf), s=(S1, S2))[:, :, :Hp, :Wp]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
            x._accumulate(gx)
        if w.requires_grad:
            Z = (F * np.conj(G)).sum(axis=0)
            corr = sfft.irfft2(Z, s=(S1, S2))
            w._accumulate(corr[:, :k, :k])

    return out, bwd


def multi_scale_depthwise(x, weights):
    """Depthwise same-size convolution of one input at several odd square scales.

    weights maps scale r -> (C, r, r). Returns {r: Tensor}. All scales share
    one padded input transform, so this is cheaper than r separate conv2d
    calls; results are identical to conv2d(..., depthwise=True, padding=r//2).
    """
    x = _wrap(x)
    scales = sorted(weights)
    for r in scales:
        if r % 2 == 0 or r < 1:
            raise ContractError(f"multi_scale_depthwise: scale {r} must be odd and positive")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    P = max(scales) // 2
    use_fft = H * W >= _FFT_MIN_AREA and max(scales) ** 2 >= _FFT_MIN_TAPS
    if not use_fft:
        return {
            r: conv2d(x, weights[r], stride=1, padding=r // 2, depthwise=True) for r in scales
        }

    wts = {r: _wrap(weights[r]) for r in scales}
    Hp, Wp = H + 2 * P, W + 2 * P
    S1, S2 = _fft_sizes(Hp, Wp)
    xp = _pad_spatial(xd, P)
    F = sfft.rfft2(xp, s=(S1, S2))
    stacked = np.empty((N, len(scales) * C, H, W))
    for si, r in enumerate(scales):
        kbuf = np.zeros((C, S1, S2))
        kbuf[:, :r, :r] = wts[r].data[:, ::-1, ::-1]
        off = P - r // 2 + r - 1
        y = sfft.irfft2(F * sfft.rfft2(kbuf), s=(S1, S2))
        stacked[:, si * C : (si + 1) * C] = y[:, :, off : off + H, off : off + W]

    parents = (x,) + tuple(wts[r] for r in scales)

    def bwd(g):
        acc = np.zeros((N, C, S1, S2 // 2 + 1), dtype=np.complex128) if x.requires_grad else None
        for si, r in enumerate(scales):
            gr = g[:, si * C : (si + 1) * C]
            G = sfft.rfft2(gr, s=(S1, S2))
            d = P - r // 2
            if x.requires_grad:
                dbuf = np.zeros((C, S1, S2))
                dbuf[:, d : d + r, d : d + r] = wts[r].data
                acc += G * sfft.rfft2(dbuf)
            if wts[r].requires_grad:
                Z = (F * np.conj(G)).sum(axis=0)
                corr = sfft.irfft2(Z, s=(S1, S2))
                wts[r]._accumulate(corr[:, d : d + r, d : d + r])
        if x.requires_grad:
            gxp = sfft.irfft2(acc, s=(S1, S2))[:, :, :Hp, :Wp]
            gx = gxp[:, :, P : P + H, P : P + W]
            x._accumulate(gx if not single else gx[0])

    node = _make(stacked if not single else stacked[0], parents, bwd, "multi_scale_depthwise")
    ax = 0 if single else 1
    sizes = [C] * len(scales)
    pieces = {}
    for si, r in enumerate(scales):
        sl = [slice(None)] * node.ndim
        sl[ax] = slice(si * C, (si + 1) * C)
        pieces[r] = take(node, tuple(sl))
    return pieces


# -- gradient checking ---------------------------------------------------------------


def grad_check(fn, params, eps=1e-5):
    """Max relative error between autodiff and central differences.

    fn: () -> scalar Tensor, deterministic, built from `params` each call.
    Relative error uses denominator max(|numeric|, |autodiff|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    out = fn()
    if not isinstance(out, Tensor) or out.shape != ():
        raise ContractError("grad_check: fn must return a scalar Tensor")
    out.backward()
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError("grad_check: non-finite objective at perturbed point")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(numeric), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
