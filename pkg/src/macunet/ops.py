"""Forward primitives with their backward rules.

Every function takes and returns :class:`~macunet.tensor.Tensor` objects and
preserves the floating dtype of its inputs. Feature maps are ``[N, C, H, W]``.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

Pad = Union[int, tuple[int, int]]


def _pair(v: Pad) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D [N,C,H,W] tensor, got shape {x.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- convolution ------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: Pad = 0) -> Tensor:
    """Cross-correlation with symmetric zero padding.

    ``weight`` is ``[out, in, kh, kw]``. Implemented as im2col followed by one
    batched matmul per call.
    """
    _check4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if min(co, ci, kh, kw) <= 0:
        raise ShapeError(f"conv2d: kernel dims must be positive, got {weight.shape}")
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    ph, pw = _pair(padding)
    ho = conv_output_size(h, kh, stride, ph)
    wo = conv_output_size(w, kw, stride, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}")

    s = stride
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if kh == 1 and kw == 1:
        cols = xd[:, :, ::s, ::s][:, :, :ho, :wo].reshape(n, ci, ho * wo)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        # [N, C, kh, kw, H', W'] -> rows ordered like weight.reshape(co, -1)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, ci * kh * kw, ho * wo)
    wm = weight.data.reshape(co, ci * kh * kw)
    out = wm @ cols
    if bias is not None:
        out += bias.data.reshape(1, co, 1)
    result = out.reshape(n, co, ho, wo)

    def backward(g: np.ndarray):
        g3 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (wm.T @ g3).reshape(n, ci, kh, kw, ho, wo)
            gxp = np.zeros(xd.shape, dtype=g.dtype)
            hs, ws = (ho - 1) * s + 1, (wo - 1) * s + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:s, j:j + ws:s] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(result, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: Pad = 0) -> Tensor:
    """Transposed convolution (the input-gradient of :func:`conv2d`).

    ``weight`` is ``[out, in, kh, kw]`` like :func:`conv2d`. Output side is
    ``(H-1)*stride - 2*pad + k``; with ``k == stride`` and no padding this is
    exactly ``stride*H``.
    """
    _check4d(x, "conv_transpose2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d: kernel must be 4-D, got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    if stride < 1:
        raise ShapeError("conv_transpose2d: stride must be positive")
    ph, pw = _pair(padding)
    s = stride
    hf, wf = (h - 1) * s + kh, (w - 1) * s + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")

    xd, wd = x.data, weight.data
    xt = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))  # [N, H, W, C]
    tiled = kh == s and kw == s
    if tiled:
        # non-overlapping blocks: one matmul, then interleave the kernel offsets
        wm = wd.transpose(1, 0, 2, 3).reshape(ci, co * kh * kw)
        blocks = (xt.reshape(-1, ci) @ wm).reshape(n, h, w, co, kh, kw)
        full = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, hf, wf)
    else:
        acc = np.zeros((n, hf, wf, co), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                acc[:, i:i + (h - 1) * s + 1:s, j:j + (w - 1) * s + 1:s, :] += xt @ wd[:, :, i, j].T
        full = acc.transpose(0, 3, 1, 2)
    out = full[:, :, ph:ph + ho, pw:pw + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    result = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        gfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        gfull[:, :, ph:ph + ho, pw:pw + wo] = g
        gx = gw = gb = None
        if tiled:
            gblk = gfull.reshape(n, co, h, kh, w, kw).transpose(0, 2, 4, 1, 3, 5)
            gblk = gblk.reshape(n * h * w, co * kh * kw)
            if x.requires_grad:
                wm = wd.transpose(1, 0, 2, 3).reshape(ci, co * kh * kw)
                gx = np.ascontiguousarray((gblk @ wm.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
            if weight.requires_grad:
                gwm = xt.reshape(-1, ci).T @ gblk  # [ci, co*kh*kw]
                gw = np.ascontiguousarray(gwm.reshape(ci, co, kh, kw).transpose(1, 0, 2, 3))
        else:
            gft = gfull.transpose(0, 2, 3, 1)
            if x.requires_grad:
                gxt = np.zeros(xt.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxt += gft[:, i:i + (h - 1) * s + 1:s, j:j + (w - 1) * s + 1:s, :] @ wd[:, :, i, j]
                gx = np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))
            if weight.requires_grad:
                gw = np.empty_like(wd)
                xs = xt.reshape(-1, ci)
                for i in range(kh):
                    for j in range(kw):
                        gs = gft[:, i:i + (h - 1) * s + 1:s, j:j + (w - 1) * s + 1:s, :].reshape(-1, co)
                        gw[:, :, i, j] = gs.T @ xs
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(result, parents, backward, "conv_transpose2d")


# -- pooling ----------------------------------------------------------------------

def maxpool2d(x: Tensor, k: int, s: int | None = None) -> Tensor:
    """Non-overlapping max pooling (window == stride).

    Ties route the gradient to the first maximum in row-major window order.
    """
    _check4d(x, "maxpool2d")
    s = k if s is None else s
    if k != s:
        raise ShapeError("maxpool2d: only window == stride is supported")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2d")


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce each channel map to one value: ``[N, C, H, W] -> [N, C, 1, 1]``."""
    _check4d(x, "global_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_pool: empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=-1).reshape(n, c, 1, 1)

        def backward(g: np.ndarray):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)
    elif mode == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

        def backward(g: np.ndarray):
            gf = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gf, idx[..., None], g.reshape(n, c, 1), axis=-1)
            return (gf.reshape(x.shape),)
    else:
        raise ValueError(f"global_pool: unknown mode {mode!r}")
    return Tensor._make(out, (x,), backward, f"global_{mode}_pool")


# -- normalization ----------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization without activation.

    Training mode normalizes with the biased batch variance over ``N*H*W``
    and updates ``running_mean``/``running_var`` in place.
    """
    _check4d(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but parameters of shape {gamma.shape}")
    xd = x.data
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        xc = xd - mean.reshape(1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = xc * inv
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


# -- pointwise --------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; numpy broadcasting covers per-channel ``[1,C,1,1]`` terms."""
    try:
        out = x.data + y.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} do not broadcast") from exc

    def backward(g: np.ndarray):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return Tensor._make(out, (x, y), backward, "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product with broadcasting (attention weights onto features)."""
    try:
        out = x.data * y.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {x.shape} and {y.shape} do not broadcast") from exc

    def backward(g: np.ndarray):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return Tensor._make(out, (x, y), backward, "mul")


def elementwise(kind: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add`` or ``mul``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if y is None:
        raise ShapeError(f"{kind} needs two operands")
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def affine_channels(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale[c] + shift[c]`` per channel."""
    c = x.shape[1]
    return add(mul(x, reshape(scale, (1, c, 1, 1))), reshape(shift, (1, c, 1, 1)))


# -- shape ------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: no inputs")
    for p in parts:
        _check4d(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {p.shape} does not match {parts[0].shape}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._make(out, tuple(parts), backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4d(x, "slice_channels")
    out = x.data[:, start:stop].copy()

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor._make(out, (x,), backward, "slice")


# -- reductions and heads ---------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor._make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor._make(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    _check4d(x, "softmax_channels")
    p = _softmax(x.data)

    def backward(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``.

    ``target`` is an integer ``[N, H, W]`` array of class indices.
    """
    _check4d(logits, "cross_entropy")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {(n, h, w)}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = np.take_along_axis(z, target[:, None].astype(np.intp), axis=1)[:, 0]
    m = n * h * w
    out = np.asarray((lse - picked).sum() / m, dtype=z.dtype)

    def backward(g: np.ndarray):
        grad = _softmax(z)
        np.put_along_axis(grad, target[:, None].astype(np.intp),
                          np.take_along_axis(grad, target[:, None].astype(np.intp), axis=1) - 1.0,
                          axis=1)
        return (grad * (g / m),)

    return Tensor._make(out, (logits,), backward, "cross_entropy")
