"""Differentiable neural-network operators on NCHW tensors."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    is_deterministic,
    make_result,
)

IGNORE_LABEL = 255


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    groups: int = 1

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ContractError(f"channel counts must be positive: {self}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"bad stride/padding: {self}")
        if self.groups not in (1, self.in_channels):
            raise ContractError("groups must be 1 (dense) or in_channels (depthwise)")
        if self.groups != 1 and self.out_channels != self.in_channels:
            raise ContractError("depthwise convolution needs out_channels == in_channels")

    @property
    def depthwise(self) -> bool:
        return self.groups != 1

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + tuple(self.kernel)

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if h + 2 * self.padding < kh or w + 2 * self.padding < kw or ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def param_count(self) -> int:
        kh, kw = self.kernel
        n = self.out_channels * (self.in_channels // self.groups) * kh * kw
        return n + (self.out_channels if self.has_bias else 0)

    def macs(self, ho: int, wo: int) -> int:
        kh, kw = self.kernel
        return ho * wo * self.out_channels * (self.in_channels // self.groups) * kh * kw


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def conv2d(x: Tensor, params: ConvParams, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded cross-correlation, dense or depthwise.

    In deterministic mode every output element is accumulated tap by tap in
    (channel, row, column) order, then the bias is added, which is exactly the
    order of a naive nested-loop convolution.
    """
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"conv2d expects {params.in_channels} input channels, got {c}")
    if weight.shape != params.weight_shape:
        raise ShapeError(f"conv2d weight shape {weight.shape} != {params.weight_shape}")
    if params.has_bias != (bias is not None):
        raise ContractError("bias presence does not match ConvParams.has_bias")
    ho, wo = params.output_hw(h, w)
    kh, kw = params.kernel
    s, p = params.stride, params.padding
    o = params.out_channels
    xp = _pad(x.data, p)
    wd = weight.data
    dt = x.dtype

    out = np.zeros((n, o, ho, wo), dtype=dt)
    if params.depthwise:
        for i in range(kh):
            for j in range(kw):
                out += _tap(xp, i, j, s, ho, wo) * wd[None, :, 0, i, j, None, None]
    elif is_deterministic():
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                    out += patch[:, None] * wd[None, :, ci, i, j, None, None]
    else:
        flat = out.reshape(n, o, ho * wo)
        for i in range(kh):
            for j in range(kw):
                patch = _tap(xp, i, j, s, ho, wo).reshape(n, c, ho * wo)
                flat += np.matmul(wd[:, :, i, j], patch)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        if params.depthwise:
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None),
                          slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                    gxp[sl] += g * wd[None, :, 0, i, j, None, None]
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        else:
            gflat = g.reshape(n, o, ho * wo)
            g2 = gflat.transpose(1, 0, 2).reshape(o, n * ho * wo)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None),
                          slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                    gxp[sl] += np.matmul(wd[:, :, i, j].T, gflat).reshape(n, c, ho, wo)
                    patch = xp[sl].reshape(n, c, ho * wo).transpose(1, 0, 2).reshape(c, -1)
                    gw[:, :, i, j] = g2 @ patch.T
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.astype(dt, copy=False), "conv2d", inputs, back)


def conv2d_reference(x: np.ndarray, params: ConvParams, weight: np.ndarray,
                     bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Six nested loops over (n, o, y, x, c, ky, kx); slow, for verification only."""
    n, c, h, w = x.shape
    ho, wo = params.output_hw(h, w)
    kh, kw = params.kernel
    s, p = params.stride, params.padding
    cg = params.in_channels // params.groups
    out = np.zeros((n, params.out_channels, ho, wo), dtype=x.dtype)
    zero = x.dtype.type(0)
    for b in range(n):
        for oc in range(params.out_channels):
            base = oc if params.depthwise else 0
            for y in range(ho):
                for xx in range(wo):
                    acc = zero
                    for ci in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = y * s + ky - p
                                ix = xx * s + kx - p
                                v = x[b, base + ci, iy, ix] if 0 <= iy < h and 0 <= ix < w else zero
                                acc = acc + v * weight[oc, ci, ky, kx]
                    if bias is not None:
                        acc = acc + bias.reshape(-1)[oc]
                    out[b, oc, y, xx] = acc
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("running statistics do not match channel count")
    xd, gd = x.data, gamma.data
    dt = x.dtype
    if training:
        m = n * h * w
        if m == 0:
            raise ShapeError("batchnorm over an empty batch")
        mean = xd.mean(axis=(0, 2, 3), keepdims=True, dtype=dt)
        centered = xd - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True, dtype=dt)
        inv = 1.0 / np.sqrt(var + dt.type(eps))
        xhat = centered * inv
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def back(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv / m * (m * gxhat - s1 - xhat * s2)
            return (gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                    g.sum(axis=(0, 2, 3), keepdims=True))
    else:
        mean = running_mean.astype(dt).reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(running_var.astype(dt) + dt.type(eps))).reshape(1, c, 1, 1)
        xhat = (xd - mean) * inv

        def back(g):
            return (g * gd * inv, (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                    g.sum(axis=(0, 2, 3), keepdims=True))

    out = (xhat * gd + beta.data).astype(dt, copy=False)
    return make_result(out, "batchnorm", (x, gamma, beta), back)


@functools.lru_cache(maxsize=256)
def interp_matrix(in_size: int, out_size: int, dtype: str = "float32") -> np.ndarray:
    """(out_size, in_size) bilinear weights with half-pixel centers.

    Source coordinate of output index d is (d + 0.5) * in/out - 0.5, clamped
    to [0, in - 1].
    """
    m = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == 0:
        return m.astype(dtype)
    ratio = in_size / out_size
    for d in range(out_size):
        src = min(max((d + 0.5) * ratio - 0.5, 0.0), in_size - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    m.setflags(write=False)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    mh = interp_matrix(h, out_h, x.dtype.name)
    mw = interp_matrix(w, out_w, x.dtype.name)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_result(out, "bilinear", (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ContractError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    _, _, h, w = x.shape
    return resize_bilinear(x, h * factor, w * factor)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w == 0:
        raise ContractError("global_avg_pool over an empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)
    area = h * w
    return make_result(out, "global_avg_pool", (x,),
                       lambda g: (np.broadcast_to(g / area, x.shape).copy(),))


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = W x + b for x of shape (N,C,1,1); weight is (K,C,1,1), bias (1,K,1,1)."""
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ContractError(f"fully_connected needs 1x1 spatial input, got {h}x{w}")
    k = weight.shape[0]
    if weight.shape != (k, c, 1, 1):
        raise ShapeError(f"fc weight {weight.shape} does not match {c} input features")
    wm = weight.data.reshape(k, c)
    xm = x.data.reshape(n, c)
    out = xm @ wm.T
    if bias is not None:
        out = out + bias.data.reshape(1, k)

    def back(g):
        gm = g.reshape(n, k)
        grads = [(gm @ wm).reshape(n, c, 1, 1), (gm.T @ xm).reshape(k, c, 1, 1)]
        if bias is not None:
            grads.append(gm.sum(axis=0).reshape(1, k, 1, 1))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.reshape(n, k, 1, 1), "fully_connected", inputs, back)


def check_labels(labels: np.ndarray, num_classes: int, ignore: int = IGNORE_LABEL) -> None:
    bad = (labels != ignore) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise LabelError(f"label {int(labels[pos])} at pixel {pos} outside [0, {num_classes})")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore: int = IGNORE_LABEL) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels (0 when none remain)."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    check_labels(labels, k, ignore)
    z = logits.data
    dt = z.dtype
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    valid = labels != ignore
    count = int(valid.sum())
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = np.log(denom[:, 0]) - picked
    loss = (nll * valid).sum(dtype=np.float64) / count if count else 0.0

    def back(g):
        if not count:
            return (np.zeros_like(z),)
        prob = exp / denom
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (prob - onehot) * valid[:, None] * (g.reshape(()) / count)
        return (grad.astype(dt, copy=False),)

    return make_result(np.full((1, 1, 1, 1), loss, dtype=dt), "softmax_cross_entropy", (logits,), back)
