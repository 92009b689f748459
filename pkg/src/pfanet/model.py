"""Pyramid feature attention network for monocular depth.

Topology: a five-block strided encoder; E3..E5 fused at H/8, widened by a
dense atrous pyramid and refined by dual-scale channel attention; E1 and E2
fused at H/4 and refined by spatial pyramid attention; both paths are
up-convolved to full resolution, concatenated and mapped to a depth map in
(0, max_depth).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module, UpConv, bilinear_up, global_avg_pool, global_max_pool
from .layers import nearest_down, nearest_up
from .tensor import ShapeError, Tensor

ASPP_RATES = (3, 6, 12, 18, 24)
PYRAMID_SCALES = (1, 2, 4)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    block_channels: tuple = (16, 32, 64, 128, 256)
    convs_per_block: int = 2
    c_high: int = 64
    c_low: int = 32
    reduction: int = 16
    growth: int = 0          # 0 -> c_high // 4
    bottleneck: int = 0      # 0 -> 2 * growth
    head_channels: int = 0   # 0 -> width of the concatenated decoder features
    max_depth: float = 80.0
    seed: int = 0

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 5:
            raise ConfigError(f"encoder needs 5 block widths, got {self.block_channels}")
        if self.growth == 0:
            self.growth = max(self.c_high // 4, 1)
        if self.bottleneck == 0:
            self.bottleneck = 2 * self.growth
        if self.head_channels == 0:
            self.head_channels = self.high_out + self.low_out

    @property
    def high_out(self) -> int:
        return max(self.c_high // 8, 1)

    @property
    def low_out(self) -> int:
        return max(self.c_low // 4, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


TINY = dict(block_channels=(8, 16, 32, 64, 64), c_high=32, c_low=16, growth=8)


def tiny_config(**overrides) -> ModelConfig:
    """About 0.2M parameters; the desk-scale training configuration."""
    return ModelConfig(**{**TINY, **overrides})


class Encoder(Module):
    """Five stride-2 conv blocks; block i emits H / 2**i."""

    def __init__(self, block_channels, convs_per_block: int, rng, dtype=None):
        super().__init__()
        self.blocks = []
        prev = 3
        for i, width in enumerate(block_channels, start=1):
            block = self.add_child(f"b{i}", Module())
            convs = []
            for j in range(1, convs_per_block + 1):
                conv = Conv2d(prev, width, 3, stride=2 if j == 1 else 1, rng=rng, dtype=dtype)
                convs.append(block.add_child(f"c{j}", conv))
                prev = width
            self.blocks.append(convs)

    def forward(self, rgb: Tensor) -> list[Tensor]:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeError(f"encoder expects N x 3 x H x W, got {rgb.shape}")
        h, w = rgb.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        feats = []
        x = rgb
        for convs in self.blocks:
            for conv in convs:
                x = T.relu(conv(x))
            feats.append(x)
        return feats


class DenseASPP(Module):
    """Densely connected dilated 3x3 convolutions at rates 3, 6, 12, 18, 24."""

    def __init__(self, channels: int, growth: int, bottleneck: int, rng, dtype=None):
        super().__init__()
        self.layers = []
        width = channels
        for k, rate in enumerate(ASPP_RATES, start=1):
            layer = self.add_child(f"l{k}", Module())
            b = layer.add_child("bottleneck", Conv2d(width, bottleneck, 1, rng=rng, dtype=dtype))
            d = layer.add_child("dilated", Conv2d(bottleneck, growth, 3, dilation=rate, rng=rng,
                                                  dtype=dtype))
            self.layers.append((b, d))
            width += growth
        self.concat_channels = width
        self.proj = self.add_child("proj", Conv2d(width, channels, 1, rng=rng, dtype=dtype))

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[2] < 2 or f.shape[3] < 2:
            raise ShapeError(f"dense ASPP needs at least 2x2 maps, got {f.shape[2:]}")
        feats = [f]
        for b, d in self.layers:
            x = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            feats.append(T.relu(d(T.relu(b(x)))))
        return T.relu(self.proj(T.concat(feats, axis=1)))


class DCAM(Module):
    """Dual-scale channel attention with residual recalibration."""

    def __init__(self, channels: int, reduction: int, rng, dtype=None):
        super().__init__()
        if (2 * channels) % reduction or channels % reduction:
            raise ConfigError(
                f"channel attention needs reduction {reduction} to divide C={channels} and 2C")
        self.channels = channels
        self.hidden = 2 * channels // reduction
        glob = self.add_child("global", Module())
        self.g1 = glob.add_child("conv1", Conv2d(2 * channels, self.hidden, 1, rng=rng, dtype=dtype))
        self.g2 = glob.add_child("conv2", Conv2d(self.hidden, channels, 1, rng=rng, dtype=dtype))
        local = self.add_child("local", Module())
        self.l1 = local.add_child("conv1", Conv2d(channels, channels // reduction, 1, rng=rng,
                                                  dtype=dtype))
        self.l2 = local.add_child("conv2", Conv2d(channels // reduction, channels, 1, rng=rng,
                                                  dtype=dtype))
        recal = self.add_child("recal", Module())
        self.f = recal.add_child("f", Conv2d(channels, channels, 1, rng=rng, dtype=dtype))
        self.h = recal.add_child("h", Conv2d(channels, channels, 1, rng=rng, dtype=dtype))

    def global_attention(self, avg: Tensor, peak: Tensor) -> Tensor:
        pooled = T.concat([avg, peak], axis=1)
        return T.relu(self.g2(T.relu(self.g1(pooled))))

    def local_attention(self, x: Tensor) -> Tensor:
        return T.relu(self.l2(T.relu(self.l1(x))))

    def forward(self, x: Tensor) -> Tensor:
        g = self.global_attention(global_avg_pool(x), global_max_pool(x))
        attn = self.local_attention(x) * g
        return T.relu(self.h(T.relu(self.f(x)) * attn)) + x


class SPAM(Module):
    """Spatial attention at scales 1, 1/2, 1/4, summed and squashed into a gate."""

    def __init__(self, channels: int, reduction: int, rng, dtype=None):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.branches = []
        for i in range(1, len(PYRAMID_SCALES) + 1):
            br = self.add_child(f"branch{i}", Module())
            c1 = br.add_child("conv1", Conv2d(channels, hidden, 3, rng=rng, dtype=dtype))
            c2 = br.add_child("conv2", Conv2d(hidden, channels, 3, rng=rng, dtype=dtype))
            self.branches.append((c1, c2))

    def gate(self, y: Tensor) -> Tensor:
        h, w = y.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"spatial pyramid attention needs H, W divisible by 4, got {h}x{w}")
        total = None
        for scale, (c1, c2) in zip(PYRAMID_SCALES, self.branches):
            yi = y if scale == 1 else nearest_down(y, scale)
            s = T.sigmoid(c2(T.relu(c1(yi))))
            if scale > 1:
                s = nearest_up(s, scale)
            total = s if total is None else total + s
        return T.sigmoid(total)

    def forward(self, y: Tensor) -> Tensor:
        return self.gate(y) * y


class PFANet(Module):
    def __init__(self, config: ModelConfig | None = None, dtype=None):
        super().__init__()
        cfg = self.config = config or ModelConfig()
        dtype = np.dtype(dtype or T.get_default_dtype())
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        e = cfg.block_channels
        self.encoder = self.add_child("encoder", Encoder(e, cfg.convs_per_block, rng, dtype))
        self.fuse_high = self.add_child("fuse_high", Conv2d(e[2] + e[3] + e[4], cfg.c_high, 1,
                                                            rng=rng, dtype=dtype))
        self.aspp = self.add_child("aspp", DenseASPP(cfg.c_high, cfg.growth, cfg.bottleneck, rng,
                                                     dtype))
        self.dcam = self.add_child("dcam", DCAM(cfg.c_high, cfg.reduction, rng, dtype))
        self.fuse_low = self.add_child("fuse_low", Conv2d(e[0] + e[1], cfg.c_low, 1, rng=rng,
                                                          dtype=dtype))
        self.spam = self.add_child("spam", SPAM(cfg.c_low, cfg.reduction, rng, dtype))

        up_high = self.add_child("up_high", Module())
        widths = [cfg.c_high, max(cfg.c_high // 2, 1), max(cfg.c_high // 4, 1), cfg.high_out]
        self.up_high = [up_high.add_child(f"u{i}", UpConv(widths[i - 1], widths[i], rng, dtype))
                        for i in range(1, 4)]
        up_low = self.add_child("up_low", Module())
        widths = [cfg.c_low, max(cfg.c_low // 2, 1), cfg.low_out]
        self.up_low = [up_low.add_child(f"u{i}", UpConv(widths[i - 1], widths[i], rng, dtype))
                       for i in range(1, 3)]
        head = self.add_child("head", Module())
        self.head_conv = head.add_child("conv", Conv2d(cfg.high_out + cfg.low_out,
                                                       cfg.head_channels, 3, rng=rng, dtype=dtype))
        self.head_out = head.add_child("out", Conv2d(cfg.head_channels, 1, 1, rng=rng,
                                                     dtype=dtype))

    def fuse_high_level(self, e3: Tensor, e4: Tensor, e5: Tensor) -> Tensor:
        h, w = e3.shape[2:]
        if e4.shape[2:] != (h // 2, w // 2) or e5.shape[2:] != (h // 4, w // 4):
            raise ShapeError(
                f"high-level features must sit at H/8, H/16, H/32; got "
                f"{e3.shape[2:]}, {e4.shape[2:]}, {e5.shape[2:]}")
        x = T.concat([e3, bilinear_up(e4, 2), bilinear_up(e5, 4)], axis=1)
        return T.relu(self.fuse_high(x))

    def fuse_low_level(self, e1: Tensor, e2: Tensor) -> Tensor:
        if e1.shape[2:] != (2 * e2.shape[2], 2 * e2.shape[3]):
            raise ShapeError(f"low-level features must sit at H/2, H/4; got "
                             f"{e1.shape[2:]}, {e2.shape[2:]}")
        return T.relu(self.fuse_low(T.concat([nearest_down(e1, 2), e2], axis=1)))

    def decode(self, feats: list[Tensor]) -> Tensor:
        e1, e2, e3, e4, e5 = feats
        high = self.dcam(self.aspp(self.fuse_high_level(e3, e4, e5)))
        for up in self.up_high:
            high = up(high)
        low = self.spam(self.fuse_low_level(e1, e2))
        for up in self.up_low:
            low = up(low)
        x = T.relu(self.head_conv(T.concat([high, low], axis=1)))
        return self.head_out(x)

    def forward(self, rgb: Tensor) -> Tensor:
        logits = self.decode(self.encoder(rgb))
        eps = float(np.finfo(logits.dtype).eps)
        # keeps the output strictly inside (0, max_depth) even when the sigmoid saturates
        return T.clip(T.sigmoid(logits), eps, 1.0 - eps) * self.config.max_depth

    def predict(self, rgb: np.ndarray) -> np.ndarray:
        """Depth for an N x 3 x H x W (or 3 x H x W) array, no tape recorded."""
        single = rgb.ndim == 3
        x = Tensor(rgb[None] if single else rgb, dtype=self.dtype)
        with T.no_grad():
            out = self.forward(x).data
        return out[0] if single else out
