"""Composite layers of the dual U-Net.

FLOP accounting convention used by every ``flops`` method: convolutions count
``2 * multiply-accumulates``; batch norm counts 2 per output element; relu,
sigmoid, add and mul count 1 per output element; global average pooling counts
1 per input element. Pooling, resampling and concatenation are free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor


def _require_channels(x: Tensor, expected: int, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D input, got {x.shape}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} channels, got {x.shape[1]}", axis="C")


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    se_ratio: int = 8

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.se_ratio) < 1:
            raise ValueError(f"all extents must be >= 1: {self}")
        if self.out_channels % self.se_ratio:
            raise ValueError(f"out_channels {self.out_channels} not divisible by se_ratio {self.se_ratio}")


@dataclass(frozen=True)
class AttentionGateSpec:
    gate_channels: int
    skip_channels: int
    inter_channels: Optional[int] = None

    @property
    def fint(self) -> int:
        return self.inter_channels if self.inter_channels is not None else max(1, self.skip_channels // 2)

    def __post_init__(self):
        if self.fint < 1:
            raise ValueError(f"inter_channels must be >= 1, got {self.fint}")


@dataclass(frozen=True)
class ASPPSpec:
    in_channels: int
    out_channels: int
    dilation_rates: tuple[int, ...] = (1, 6, 12, 18)

    def __post_init__(self):
        rates = tuple(self.dilation_rates)
        if not rates or rates[0] != 1:
            raise ValueError(f"ASPP rates must start at 1, got {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"ASPP rates must be strictly increasing, got {rates}")


class SqueezeExcite(Module):
    """Channel attention: ``x * sigmoid(W2 relu(W1 gap(x)))``."""

    def __init__(self, rng: np.random.Generator, channels: int, ratio: int = 8):
        hidden = max(1, channels // ratio)
        self.channels = channels
        self.fc1 = Conv2d(rng, channels, hidden, kernel_size=1)
        self.fc2 = Conv2d(rng, hidden, channels, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "squeeze-excite")
        s = ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(x)))))
        return ops.mul(x, s)

    def flops(self, h: int, w: int) -> int:
        c, hid = self.channels, self.fc1.out_channels
        return c * h * w + self.fc1.flops(1, 1) + hid + self.fc2.flops(1, 1) + c + c * h * w


class ConvBlock(Module):
    """Residual encoder/decoder block.

    Main path Conv3x3-BN-ReLU-Conv3x3-BN, shortcut Conv1x1-BN, merged by
    addition and ReLU, then squeeze-excite. With ``residual=False`` the
    shortcut is dropped and the main path ends in its own ReLU.
    """

    def __init__(self, rng: np.random.Generator, spec: ConvBlockSpec, residual: bool = True):
        self.spec = spec
        self.residual = residual
        self.conv1 = Conv2d(rng, spec.in_channels, spec.out_channels, 3, padding=1)
        self.bn1 = BatchNorm2d(spec.out_channels)
        self.conv2 = Conv2d(rng, spec.out_channels, spec.out_channels, 3, padding=1)
        self.bn2 = BatchNorm2d(spec.out_channels)
        if residual:
            self.shortcut = Conv2d(rng, spec.in_channels, spec.out_channels, 1)
            self.shortcut_bn = BatchNorm2d(spec.out_channels)
        self.se = SqueezeExcite(rng, spec.out_channels, spec.se_ratio)

    def pre_se(self, x: Tensor) -> Tensor:
        _require_channels(x, self.spec.in_channels, "conv block")
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.residual:
            y = ops.add(y, self.shortcut_bn(self.shortcut(x)))
        return ops.relu(y)

    def forward(self, x: Tensor) -> Tensor:
        return self.se(self.pre_se(x))

    def flops(self, h: int, w: int) -> int:
        c = self.spec.out_channels
        hw = h * w
        total = self.conv1.flops(h, w) + 2 * c * hw + c * hw + self.conv2.flops(h, w) + 2 * c * hw
        if self.residual:
            total += self.shortcut.flops(h, w) + 2 * c * hw + c * hw
        return total + c * hw + self.se.flops(h, w)


class AttentionGate(Module):
    """Additive attention on a skip connection.

    ``theta_x`` sees the skip at stride 2 when the gating signal has half the
    skip's extent; the resulting coefficients are upsampled back before they
    rescale the skip.
    """

    def __init__(self, rng: np.random.Generator, spec: AttentionGateSpec):
        self.spec = spec
        fint = spec.fint
        self.theta_x = Conv2d(rng, spec.skip_channels, fint, 1, bias=False)
        self.phi_g = Conv2d(rng, spec.gate_channels, fint, 1)
        self.psi = Conv2d(rng, fint, 1, 1)

    def coefficients(self, x_skip: Tensor, g: Tensor) -> Tensor:
        """Attention map ``alpha`` with the skip's spatial extent, values in [0, 1]."""
        _require_channels(x_skip, self.spec.skip_channels, "attention gate skip")
        _require_channels(g, self.spec.gate_channels, "attention gate signal")
        hx, wx = x_skip.shape[2:]
        hg, wg = g.shape[2:]
        if (hg, wg) == (hx, wx):
            halving = False
        elif 2 * hg == hx and 2 * wg == wx:
            halving = True
        else:
            raise ShapeError(
                f"gating extent {(hg, wg)} must equal or halve skip extent {(hx, wx)}",
                axis="H" if 2 * hg != hx and hg != hx else "W",
            )
        theta = self.theta_x(x_skip, stride=2 if halving else 1)
        act = ops.relu(ops.add(theta, self.phi_g(g)))
        alpha = ops.sigmoid(self.psi(act))
        return ops.upsample_bilinear2x(alpha) if halving else alpha

    def forward(self, x_skip: Tensor, g: Tensor) -> Tensor:
        return ops.mul(x_skip, self.coefficients(x_skip, g))

    def flops(self, h: int, w: int, halving: bool = True) -> int:
        hs, ws = (h // 2, w // 2) if halving else (h, w)
        fint = self.spec.fint
        total = self.theta_x.flops(h, w, stride=2 if halving else 1) + self.phi_g.flops(hs, ws)
        total += 2 * fint * hs * ws  # add + relu
        total += self.psi.flops(hs, ws) + hs * ws  # psi + sigmoid
        return total + self.spec.skip_channels * h * w


class ASPP(Module):
    """Atrous spatial pyramid pooling with an image-pooling branch."""

    def __init__(self, rng: np.random.Generator, spec: ASPPSpec):
        self.spec = spec
        cin, cout = spec.in_channels, spec.out_channels
        self.branches = []
        for rate in spec.dilation_rates:
            if rate == 1:
                conv = Conv2d(rng, cin, cout, 1)
            else:
                conv = Conv2d(rng, cin, cout, 3, padding=rate, dilation=rate)
            self.branches.append(_ConvBNReLU(conv, BatchNorm2d(cout)))
        self.pool_branch = _ConvBNReLU(Conv2d(rng, cin, cout, 1), BatchNorm2d(cout))
        n_branches = len(spec.dilation_rates) + 1
        self.fuse = _ConvBNReLU(Conv2d(rng, n_branches * cout, cout, 1), BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.spec.in_channels, "ASPP")
        h, w = x.shape[2:]
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool_branch(ops.global_avg_pool(x))
        outs.append(ops.broadcast_spatial(pooled, h, w))
        return self.fuse(ops.concat_channels(*outs))

    def flops(self, h: int, w: int) -> int:
        total = sum(b.flops(h, w) for b in self.branches)
        total += self.spec.in_channels * h * w + self.pool_branch.flops(1, 1)
        return total + self.fuse.flops(h, w)


class _ConvBNReLU(Module):
    def __init__(self, conv: Conv2d, bn: BatchNorm2d):
        self.conv = conv
        self.bn = bn

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.conv.output_extent(h, w)
        return self.conv.flops(h, w) + 3 * self.conv.out_channels * ho * wo


VGG19_STAGES = (2, 2, 4, 4, 4)
VGG19_WIDTHS = (64, 128, 256, 512, 512)


def vgg_widths(width_mult: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(c * width_mult))) for c in VGG19_WIDTHS)


class VGGEncoder(Module):
    """VGG-19 convolutional topology (16 conv layers) with random weights.

    Returns the pre-pool activations of the first four stages as skips and the
    stage-5 output (at 1/16 extent) as the bottleneck.
    """

    def __init__(self, rng: np.random.Generator, width_mult: float = 1.0, in_channels: int = 3):
        self.widths = vgg_widths(width_mult)
        self.stages = []
        cin = in_channels
        for n_convs, cout in zip(VGG19_STAGES, self.widths):
            stage = _Stage([Conv2d(rng, cin if i == 0 else cout, cout, 3, padding=1) for i in range(n_convs)])
            self.stages.append(stage)
            cin = cout

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        _require_channels(x, self.stages[0].convs[0].in_channels, "VGG encoder")
        h, w = x.shape[2:]
        if h % 16:
            raise ShapeError(f"input height {h} not divisible by 16", axis="H")
        if w % 16:
            raise ShapeError(f"input width {w} not divisible by 16", axis="W")
        skips = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < 4:
                skips.append(x)
                x = ops.maxpool2d(x)
        return x, skips

    def flops(self, h: int, w: int) -> int:
        total = 0
        for i, stage in enumerate(self.stages):
            total += stage.flops(h, w)
            if i < 4:
                h, w = h // 2, w // 2
        return total


class _Stage(Module):
    def __init__(self, convs: list[Conv2d]):
        self.convs = convs

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x

    def flops(self, h: int, w: int) -> int:
        return sum(c.flops(h, w) + c.out_channels * h * w for c in self.convs)


class DecoderBlock(Module):
    """Upsample by 2, concatenate the (optionally gated) skips, then a ConvBlock.

    ``gates`` holds one entry per skip: an :class:`AttentionGate` driven by the
    pre-upsampling decoder input, or ``None`` for an ungated skip.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        skip_channels: Sequence[int],
        out_channels: int,
        se_ratio: int = 8,
        residual: bool = True,
        attention: Sequence[bool] = (),
    ):
        self.in_channels = in_channels
        self.skip_channels = tuple(skip_channels)
        attention = tuple(attention) or (False,) * len(self.skip_channels)
        if len(attention) != len(self.skip_channels):
            raise ValueError("one attention flag per skip is required")
        self.gates = [
            AttentionGate(rng, AttentionGateSpec(in_channels, c)) if gated else None
            for c, gated in zip(self.skip_channels, attention)
        ]
        spec = ConvBlockSpec(in_channels + sum(self.skip_channels), out_channels, se_ratio)
        self.block = ConvBlock(rng, spec, residual=residual)

    def forward(self, x: Tensor, skips: Sequence[Tensor], alphas: Optional[list] = None) -> Tensor:
        """``alphas``, when given, receives the coefficient map of every gate."""
        _require_channels(x, self.in_channels, "decoder block")
        if len(skips) != len(self.skip_channels):
            raise ValueError(f"decoder block expects {len(self.skip_channels)} skips, got {len(skips)}")
        h, w = x.shape[2:]
        parts = [ops.upsample_bilinear2x(x)]
        for skip, gate in zip(skips, self.gates):
            if skip.shape[2:] != (2 * h, 2 * w):
                raise ShapeError(
                    f"skip extent {skip.shape[2:]} must be twice the decoder input extent {(h, w)}",
                    axis="H" if skip.shape[2] != 2 * h else "W",
                )
            if gate is None:
                parts.append(skip)
                continue
            alpha = gate.coefficients(skip, x)
            if alphas is not None:
                alphas.append(alpha)
            parts.append(ops.mul(skip, alpha))
        return self.block(ops.concat_channels(*parts))

    def flops(self, h: int, w: int) -> int:
        """``h, w`` is the extent of the block input (output is twice that)."""
        total = sum(g.flops(2 * h, 2 * w) for g in self.gates if g is not None)
        return total + self.block.flops(2 * h, 2 * w)
