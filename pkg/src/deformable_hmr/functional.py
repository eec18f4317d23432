"""Differentiable kernels used by the decoder: each has a hand-written backward."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, ParameterError
from .tensor import DTYPE, Tensor, as_tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
        out = out + bias.data
        parents.append(bias)
    xd, wd = x.data, weight.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis then apply a per-channel affine map."""
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({n},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return Tensor._make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def grouped_conv2d(x, weight, bias=None, groups=1, stride=1, padding=0):
    """Grouped 2D cross-correlation with zero padding.

    ``x`` is (B, C_in, H, W); ``weight`` is (C_out, C_in // groups, kh, kw).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"grouped_conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(f"grouped_conv2d: channels {c_in}->{c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise DimensionError(f"grouped_conv2d: weight {weight.shape} expects {cg * groups} input channels, got {c_in}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"grouped_conv2d: output extent ({ho}, {wo}) is not positive")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c_in, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(b, groups, cg * kh * kw, ho * wo)
    wmat = weight.data.reshape(groups, c_out // groups, cg * kh * kw)
    out = (wmat[None] @ cols).reshape(b, c_out, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"grouped_conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gm = g.reshape(b, groups, c_out // groups, ho * wo)
        gw = (gm @ np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gcols = (np.swapaxes(wmat, -1, -2)[None] @ gm).reshape(b, c_in, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def _axis_weights(p, extent):
    """Continuous index, lower/upper cell and blend factor for one axis.

    Normalized ``p`` maps to index ``(p + 1) / 2 * extent``, clamped to
    ``[0, extent - 1]``; ``dindex`` is zero where clamping is active.
    Indices within a few ulps of an integer are snapped to it.
    """
    idx = (p + 1.0) * 0.5 * extent
    # 2i/H - 1 does not always invert to exactly i; snap rounding residue so grid nodes sample exactly
    nearest = np.rint(idx)
    idx = np.where(np.abs(idx - nearest) <= 8 * np.finfo(np.float64).eps * max(extent, 1), nearest, idx)
    inside = (idx >= 0.0) & (idx <= extent - 1)
    idx = np.clip(idx, 0.0, extent - 1)
    lo = np.clip(np.floor(idx), 0, max(extent - 2, 0)).astype(np.intp)
    hi = np.minimum(lo + 1, extent - 1)
    frac = idx - lo
    dindex = np.where(inside, 0.5 * extent, 0.0) if extent > 1 else np.zeros_like(p)
    return lo, hi, frac, dindex


def bilinear_sample(x, pos):
    """Bilinearly sample ``x`` (N, C, H, W) at normalized positions ``pos`` (N, 2, Hs, Ws).

    ``pos[:, 0]`` addresses rows and ``pos[:, 1]`` columns. Positions outside
    the grid are clamped to the border. Differentiable in both arguments.
    """
    x, pos = as_tensor(x), as_tensor(pos)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_sample: input must be (N, C, H, W), got {x.shape}")
    if pos.ndim != 4 or pos.shape[1] != 2 or pos.shape[0] != x.shape[0]:
        raise DimensionError(f"bilinear_sample: positions must be ({x.shape[0]}, 2, Hs, Ws), got {pos.shape}")
    n, c, h, w = x.shape
    hs, ws = pos.shape[2:]
    s = hs * ws
    py = pos.data[:, 0].reshape(n, s)
    px = pos.data[:, 1].reshape(n, s)
    y0, y1, fy, dy = _axis_weights(py, h)
    x0, x1, fx, dx = _axis_weights(px, w)

    flat = x.data.reshape(n, c, h * w)
    rows = np.arange(n)[:, None]

    def gather(yi, xi):
        # (N, S) indices -> (N, C, S) values
        return flat[rows, :, yi * w + xi].transpose(0, 2, 1)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    wy0, wx0 = (1.0 - fy)[:, None], (1.0 - fx)[:, None]
    wy1, wx1 = fy[:, None], fx[:, None]
    out = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)

    def backward(g):
        g = g.reshape(n, c, s)
        gx = np.zeros((n * h * w, c), dtype=DTYPE)
        base = (np.arange(n) * h * w)[:, None]
        for yi, xi, wgt in (
            (y0, x0, wy0 * wx0),
            (y0, x1, wy0 * wx1),
            (y1, x0, wy1 * wx0),
            (y1, x1, wy1 * wx1),
        ):
            np.add.at(gx, (base + yi * w + xi).ravel(), (g * wgt).transpose(0, 2, 1).reshape(-1, c))
        gx = gx.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        d_fy = wx0 * (v10 - v00) + wx1 * (v11 - v01)
        d_fx = wy0 * (v01 - v00) + wy1 * (v11 - v10)
        gpy = (g * d_fy).sum(axis=1) * dy
        gpx = (g * d_fx).sum(axis=1) * dx
        gpos = np.stack([gpy, gpx], axis=1).reshape(pos.shape)
        return gx, gpos

    return Tensor._make(out.reshape(n, c, hs, ws), (x, pos), backward)


def mse(pred, target):
    """Mean squared error averaged over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred - target
    return (diff * diff).mean()
