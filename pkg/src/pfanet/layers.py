"""Convolution, pooling and resampling layers with exact backward rules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import ShapeError, Tensor, make_op, register_backward


class Module:
    """A block with named parameters and named child blocks."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: Tensor) -> Tensor:
        value.requires_grad = True
        self._params[name] = value
        return value

    def add_child(self, name: str, child: Module) -> Module:
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of an NCHW batch with zero "same" padding.

    Padding is ``dilation * (k - 1) // 2`` on every side, which keeps the
    spatial size at stride 1 and halves it (rounding up) at stride 2.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    out_c, in_c, k, k2 = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_c}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    pad = dilation * (k - 1) // 2
    out_h = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out_w = (w + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k}, dilation {dilation}")
    w2 = weight.data.reshape(out_c, -1)
    if k == 1 and stride == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = kernels.im2col(xp, k, dilation, stride, out_h, out_w).reshape(n, c * k * k, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out.reshape(n, out_c, out_h, out_w), inputs,
                   cols=cols, pad=pad, stride=stride, dilation=dilation, k=k)


@register_backward("conv2d")
def _conv2d_bw(g, node):
    x, weight = node.inputs[:2]
    s = node.saved
    n, c, h, w = x.shape
    out_c = weight.shape[0]
    g2 = g.reshape(n, out_c, -1)
    cols = s["cols"]
    gw = gb = gx = None
    if weight.requires_grad:
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    if len(node.inputs) == 3 and node.inputs[2].requires_grad:
        gb = g2.sum(axis=(0, 2))
    if x.requires_grad:
        gcols = np.matmul(weight.data.reshape(out_c, -1).T, g2)
        k, pad = s["k"], s["pad"]
        if k == 1 and s["stride"] == 1:
            gx = gcols.reshape(x.shape)
        else:
            out_h, out_w = g.shape[2:]
            gxp = kernels.col2im(gcols.reshape(n, c, k, k, out_h, out_w),
                                 (n, c, h + 2 * pad, w + 2 * pad), k, s["dilation"], s["stride"])
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
    return (gx, gw) if len(node.inputs) == 2 else (gx, gw, gb)


class Conv2d(Module):
    """k x k convolution (k in {1, 3}) with "same" padding.

    Weights are drawn uniformly from +-sqrt(6 / fan_in); biases start at zero.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, stride: int = 1,
                 dilation: int = 1, rng: np.random.Generator | None = None, dtype=None):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {kernel}")
        if stride < 1 or dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.dilation = kernel, stride, dilation
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or T.get_default_dtype()
        fan_in = in_channels * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel))
        self.weight = self.add_param("weight", Tensor(w, dtype=dtype))
        self.bias = self.add_param("bias", Tensor(np.zeros(out_channels), dtype=dtype))

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation)


# -- pooling ----------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    return T.mean(x, axes=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    return T.max(x, axes=(2, 3), keepdims=True)


# -- resampling -------------------------------------------------------------


@dataclass(frozen=True)
class ResampleSpec:
    mode: str  # "nearest" or "bilinear"
    factor: Fraction

    def __post_init__(self):
        if self.mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown resample mode {self.mode!r}")
        f = Fraction(self.factor)
        object.__setattr__(self, "factor", f)
        if f <= 0 or (f.numerator != 1 and f.denominator != 1):
            raise ValueError(f"resample factor must be an integer k or 1/k, got {f}")


def resample(x: Tensor, spec: ResampleSpec) -> Tensor:
    f = spec.factor
    if f == 1:
        return x
    if f.denominator == 1:
        k = f.numerator
        return nearest_up(x, k) if spec.mode == "nearest" else bilinear_up(x, k)
    if spec.mode != "nearest":
        raise ValueError("only nearest-neighbour downsampling is supported")
    return nearest_down(x, f.denominator)


def nearest_up(x: Tensor, k: int) -> Tensor:
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return make_op("nearest_up", out, (x,), k=k)


@register_backward("nearest_up")
def _nearest_up_bw(g, node):
    k = node.saved["k"]
    n, c, h, w = node.inputs[0].shape
    return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)


def nearest_down(x: Tensor, k: int) -> Tensor:
    """Keep pixel (i*k, j*k) for output (i, j), the floor index map."""
    h, w = x.shape[2:]
    if h % k or w % k:
        raise ShapeError(f"cannot downsample {h}x{w} by {k}: not divisible")
    return make_op("nearest_down", x.data[:, :, ::k, ::k].copy(), (x,), k=k)


@register_backward("nearest_down")
def _nearest_down_bw(g, node):
    k = node.saved["k"]
    gx = np.zeros(node.inputs[0].shape, dtype=g.dtype)
    gx[:, :, ::k, ::k] = g
    return (gx,)


def bilinear_matrix(size: int, k: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (size*k, size) interpolation matrix, align_corners=False."""
    out = size * k
    m = np.zeros((out, size), dtype=np.float64)
    for dst in range(out):
        src = max((dst + 0.5) / k - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m.astype(dtype)


def bilinear_up(x: Tensor, k: int) -> Tensor:
    h, w = x.shape[2:]
    mh = bilinear_matrix(h, k, x.dtype)
    mw = bilinear_matrix(w, k, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_op("bilinear_up", out, (x,), mh=mh, mw=mw)


@register_backward("bilinear_up")
def _bilinear_up_bw(g, node):
    mh, mw = node.saved["mh"], node.saved["mw"]
    return (np.matmul(np.matmul(mh.T, g), mw),)


class UpConv(Module):
    """Bilinear x2 upsampling, then a 3x3 convolution and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng=None, dtype=None):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(in_channels, out_channels, 3, rng=rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv(bilinear_up(x, 2)))
