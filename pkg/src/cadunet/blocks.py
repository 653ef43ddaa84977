"""Residual block, attention gate and the capsule/Unet coupling junction."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Module


class ConvBlock(Module):
    """ReLU(BN(conv3x3(x)))."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(x)))


class ResBlock(Module):
    """Two stacked 3x3 conv blocks plus a 1x1 conv block on the shortcut."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.block1 = ConvBlock(in_ch, out_ch, 3, rng, dtype)
        self.block2 = ConvBlock(out_ch, out_ch, 3, rng, dtype)
        self.shortcut = ConvBlock(in_ch, out_ch, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"ResBlock expects {self.in_ch} input channels, got tensor {x.shape}")
        return ad.add(self.block2(self.block1(x)), self.shortcut(x))


class AttentionGate(Module):
    """Spatial attention from an encoder map ``x`` and a gating map ``g``.

    A single-channel sigmoid map multiplies every channel of ``x``.
    """

    def __init__(self, x_ch: int, g_ch: int, inter_ch: int | None = None, rng=None, dtype=np.float32):
        super().__init__()
        inter_ch = inter_ch or max(x_ch // 2, 1)
        self.w_x = Conv2d(x_ch, inter_ch, 1, rng=rng, dtype=dtype)
        self.bn_x = BatchNorm2d(inter_ch, dtype=dtype)
        self.w_g = Conv2d(g_ch, inter_ch, 1, rng=rng, dtype=dtype)
        self.bn_g = BatchNorm2d(inter_ch, dtype=dtype)
        self.psi = Conv2d(inter_ch, 1, 1, bias=True, rng=rng, dtype=dtype)

    def attention(self, x: Tensor, g: Tensor) -> Tensor:
        if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
            raise ShapeError(f"attention gate: x {x.shape} and g {g.shape} differ spatially")
        hidden = ad.relu(ad.add(self.bn_x(self.w_x(x)), self.bn_g(self.w_g(g))))
        return ad.sigmoid(self.psi(hidden))

    def forward(self, x: Tensor, g: Tensor) -> Tensor:
        return ad.mul(x, self.attention(x, g))


class Coupling(Module):
    """Modulate Unet features by same-resolution capsules, then concatenate.

    The flattened capsules pass through a 1x1 conv and a sigmoid so that the
    gate has the feature map's channel count. ``forward`` returns the
    concatenation ``[gate * features, features]`` and the product term on its
    own, which the capsule pathway consumes.
    """

    def __init__(self, caps_ch: int, feat_ch: int, rng=None, dtype=np.float32):
        super().__init__()
        self.caps_ch, self.feat_ch = caps_ch, feat_ch
        self.proj = Conv2d(caps_ch, feat_ch, 1, bias=True, rng=rng, dtype=dtype)

    def gate(self, caps: Tensor) -> Tensor:
        return ad.sigmoid(self.proj(caps))

    def forward(self, out_prev: Tensor, caps: Tensor) -> tuple[Tensor, Tensor]:
        if out_prev.shape[0] != caps.shape[0] or out_prev.shape[2:] != caps.shape[2:]:
            raise ShapeError(f"couple: features {out_prev.shape} and capsules {caps.shape} differ spatially")
        if caps.shape[1] != self.caps_ch or out_prev.shape[1] != self.feat_ch:
            raise ShapeError(
                f"couple: configured for {self.caps_ch} capsule / {self.feat_ch} feature channels,"
                f" got {caps.shape[1]} / {out_prev.shape[1]}")
        product = ad.mul(self.gate(caps), out_prev)
        return ad.concat_channels([product, out_prev]), product
