"""Primitive operators with analytic vector-Jacobian products.

Activations are ``(C, H, W)`` or batched ``(N, C, H, W)`` with H the frequency
axis and W the time axis.  Every convolution is stride 1 with zero "same"
padding, so only pooling changes spatial extents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import CORE, OTHER, TENSOR_MANIP, Tensor, active_tape, primitive, span

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _result(op: str, data: np.ndarray, inputs, vjp) -> Tensor:
    needs = any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, out, vjp)
    return out


def _recording(*inputs) -> bool:
    return active_tape() is not None and any(t is not None and t.requires_grad for t in inputs)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data, False
    if x.ndim == 3:
        return x.data[None], True
    raise ValueError(f"{op}: expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise

@primitive("add", OTHER)
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@primitive("mul", OTHER)
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _result("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


@primitive("relu", OTHER)
def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    if not _recording(x):
        return Tensor(out)
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _result("relu", out, (x,), lambda g: (g * mask,))


@primitive("sigmoid", OTHER)
def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


# -------------------------------------------------------------------- reductions

@primitive("sum", CORE)
def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum())
    shape = x.shape
    return _result("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


@primitive("mean", CORE)
def mean(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result("mean", out, (x,), vjp)


@primitive("reshape", TENSOR_MANIP)
def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape
    return _result("reshape", out, (x,), lambda g: (g.reshape(orig),))


@primitive("matmul", CORE)
def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return _unbroadcast(ga, ad.shape), gb
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result("matmul", out, (a, b), vjp)


# ------------------------------------------------------------------ convolution

@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k_h: int = 1
    k_w: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for field in ("c_in", "c_out", "k_h", "k_w", "groups"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")
        if self.k_h % 2 == 0 or self.k_w % 2 == 0:
            raise ValueError(f"kernel extents must be odd for same padding, got {self.k_h}x{self.k_w}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.k_h, self.k_w)

    @classmethod
    def from_weight(cls, weight: Tensor, groups: int = 1, has_bias: bool = True) -> "ConvSpec":
        if weight.ndim != 4:
            raise ValueError(f"conv weight must be rank 4 (C_out, C_in/g, k_h, k_w), got {weight.shape}")
        c_out, cg, kh, kw = weight.shape
        return cls(cg * groups, c_out, kh, kw, groups, has_bias)


def _check_conv(op, xd, weight, bias, groups) -> ConvSpec:
    spec = ConvSpec.from_weight(weight, groups, bias is not None)
    if xd.shape[1] != spec.c_in:
        raise ValueError(
            f"{op}: input has {xd.shape[1]} channels but weight {weight.shape} with groups={groups} "
            f"expects {spec.c_in}")
    if bias is not None and bias.shape != (spec.c_out,):
        raise ValueError(f"{op}: bias shape {bias.shape} != ({spec.c_out},)")
    return spec


def _pad(xd: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return xd
    with span("pad", TENSOR_MANIP):
        return np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_impl(op: str, x: Tensor, weight: Tensor, bias: Tensor | None, groups: int) -> Tensor:
    xd, squeeze = _batched(x, op)
    spec = _check_conv(op, xd, weight, bias, groups)
    n, c, h, w = xd.shape
    g = groups
    co, cg, kh, kw = weight.shape
    cog = co // g
    ph, pw = kh // 2, kw // 2
    wd = weight.data
    record = _recording(x, weight, bias)

    if kh == 1 and kw == 1:
        cols = xd.reshape(n, g, cg, h * w)
        out = np.matmul(wd.reshape(g, cog, cg), cols)
    elif cg == 1 and cog == 1:
        # depthwise: accumulate one shifted slice per tap
        xp = _pad(xd, ph, pw)
        out = np.zeros((n, c, h, w), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + h, j:j + w] * wd[:, 0, i, j][None, :, None, None]
        cols = xp
    else:
        xp = _pad(xd, ph, pw)
        with span("im2col", TENSOR_MANIP):
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
            cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, g, cg * kh * kw, h * w)
        out = np.matmul(wd.reshape(g, cog, cg * kh * kw), cols)
    out = out.reshape(n, co, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]
    if not record:
        return Tensor(out)

    def vjp(gout):
        go = gout[None] if squeeze else gout
        gb = go.sum(axis=(0, 2, 3)) if bias is not None else None
        if kh == 1 and kw == 1:
            gg = go.reshape(n, g, cog, h * w)
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gx = np.matmul(np.swapaxes(wd.reshape(g, cog, cg), -1, -2), gg).reshape(n, c, h, w)
        elif cg == 1 and cog == 1:
            gw = np.zeros_like(wd)
            gxp = np.zeros_like(cols)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", go, cols[:, :, i:i + h, j:j + w])
                    gxp[:, :, i:i + h, j:j + w] += go * wd[:, 0, i, j][None, :, None, None]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        else:
            gg = go.reshape(n, g, cog, h * w)
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(np.swapaxes(wd.reshape(g, cog, cg * kh * kw), -1, -2), gg)
            gcols = gcols.reshape(n, c, kh, kw, h, w)
            gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gout.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    return _result(op, out, (x, weight, bias), vjp)


@primitive("conv2d", CORE)
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Grouped cross-correlation, stride 1, zero same-padding.

    ``weight`` has shape ``(C_out, C_in // groups, k_h, k_w)`` with odd kernel extents.
    """
    return _conv_impl("conv2d", x, weight, bias, groups)


@primitive("depthwise_conv2d", CORE)
def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel spatial convolution; ``weight`` is ``(C, 1, k_h, k_w)``."""
    c = x.shape[-3]
    if weight.ndim != 4 or weight.shape[:2] != (c, 1):
        raise ValueError(f"depthwise weight must be ({c}, 1, k_h, k_w), got {weight.shape}")
    return _conv_impl("depthwise_conv2d", x, weight, bias, c)


@primitive("pointwise_group_conv", CORE)
def pointwise_group_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """1x1 convolution mixing channels only within each of ``groups`` groups."""
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ValueError(f"pointwise weight must be (C_out, C_in/g, 1, 1), got {weight.shape}")
    return _conv_impl("pointwise_group_conv", x, weight, bias, groups)


def channel_shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """Source channel index for each output channel."""
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


@primitive("channel_shuffle", TENSOR_MANIP)
def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """View channels as (groups, C/groups), transpose, flatten back."""
    xd, squeeze = _batched(x, "channel_shuffle")
    n, c, h, w = xd.shape
    if groups < 1 or c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
    out = np.ascontiguousarray(
        xd.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)).reshape(n, c, h, w)
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        back = gd.reshape(n, c // groups, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
        return (back[0] if squeeze else back,)

    return _result("channel_shuffle", out, (x,), vjp)


# ---------------------------------------------------------------------- pooling

@primitive("avg_pool2d", CORE)
def avg_pool2d(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    """Non-overlapping mean pooling; extents must divide exactly."""
    xd, squeeze = _batched(x, "avg_pool2d")
    n, c, h, w = xd.shape
    if h % pool_h or w % pool_w:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by pool {pool_h}x{pool_w}")
    scale = 1.0 / (pool_h * pool_w)
    out = None
    for i in range(pool_h):
        for j in range(pool_w):
            part = xd[:, :, i::pool_h, j::pool_w]
            out = part.copy() if out is None else out + part
    if scale != 1.0:
        out *= scale
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        up = np.repeat(np.repeat(gd, pool_h, axis=2), pool_w, axis=3) * scale
        return (up[0] if squeeze else up,)

    return _result("avg_pool2d", out, (x,), vjp)


@primitive("global_avg_pool", CORE)
def global_avg_pool(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,) or (N, C, H, W) -> (N, C)."""
    if x.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool: expected rank 3 or 4, got {x.shape}")
    out = x.data.mean(axis=(-2, -1))
    shape = x.shape
    hw = shape[-1] * shape[-2]
    return _result("global_avg_pool", out, (x,),
                   lambda g: (np.broadcast_to(g[..., None, None] / hw, shape).copy(),))


# ---------------------------------------------------------------- normalization

@primitive("batch_norm", CORE)
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool = False,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place: ``new = (1 - momentum) * old + momentum * batch``
    (unbiased batch variance for the running estimate).
    """
    xd, squeeze = _batched(x, "batch_norm")
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm: channel count {c} does not match parameters "
                         f"gamma{gamma.shape} beta{beta.shape} stats{running_mean.shape}")
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        out = gd * xhat + bd
    else:
        rm = running_mean.copy()
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma.data * inv
        out = xd * scale[None, :, None, None] + (beta.data - rm * scale)[None, :, None, None]
        xhat = None
    if squeeze:
        out = out[0]
    if not _recording(x, gamma, beta):
        return Tensor(out)
    if xhat is None:
        xhat = (xd - rm[None, :, None, None]) * inv[None, :, None, None]

    def vjp(g):
        go = g[None] if squeeze else g
        ggamma = (go * xhat).sum(axis=(0, 2, 3))
        gbeta = go.sum(axis=(0, 2, 3))
        gxhat = go * gd
        if training:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return (gx[0] if squeeze else gx), ggamma, gbeta

    return _result("batch_norm", out, (x, gamma, beta), vjp)


# ------------------------------------------------------------------------ dense

@primitive("linear", CORE)
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape (D_in,) or (N, D_in)."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ wd
        gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        gb = None if bias is None else (g if g.ndim == 1 else g.sum(axis=0))
        return gx, gw, gb

    return _result("linear", out, (x, weight, bias), vjp)
