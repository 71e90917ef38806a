"""The attention-gated residual double U-Net."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .blocks import ASPP, ASPPSpec, ConvBlock, ConvBlockSpec, DecoderBlock, VGGEncoder, vgg_widths
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, no_grad

VARIANTS = ("half_attention", "full_attention")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``decoder_widths`` are listed deepest block first and are shared by both
    decoders. ``residual=False`` removes the shortcut path from every
    ConvBlock (the ablation arm without residual connections).
    """

    variant: str = "full_attention"
    width_mult: float = 1.0
    encoder2_widths: tuple[int, ...] = (32, 64, 128, 256)
    decoder_widths: tuple[int, ...] = (256, 128, 64, 32)
    aspp_out: int = 64
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    se_ratio: int = 8
    input_extent: tuple[int, int] = (192, 256)
    residual: bool = True

    def violations(self) -> list[str]:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width_mult <= 0:
            problems.append(f"width_mult must be positive, got {self.width_mult}")
        if len(self.encoder2_widths) != 4:
            problems.append(f"encoder2_widths needs 4 entries, got {len(self.encoder2_widths)}")
        if len(self.decoder_widths) != 4:
            problems.append(f"decoder_widths needs 4 entries, got {len(self.decoder_widths)}")
        if self.se_ratio < 1:
            problems.append(f"se_ratio must be >= 1, got {self.se_ratio}")
        for name in ("encoder2_widths", "decoder_widths"):
            for width in getattr(self, name):
                if width < self.se_ratio or width % max(self.se_ratio, 1):
                    problems.append(f"{name} entry {width} must be a positive multiple of se_ratio {self.se_ratio}")
        if self.aspp_out < 1:
            problems.append(f"aspp_out must be >= 1, got {self.aspp_out}")
        rates = tuple(self.aspp_rates)
        if not rates or rates[0] != 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            problems.append(f"aspp_rates must start at 1 and strictly increase, got {rates}")
        h, w = self.input_extent
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            problems.append(f"input_extent {self.input_extent} must be positive multiples of 16")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


FULL_CONFIG = ModelConfig()
TOY_CONFIG = ModelConfig(
    width_mult=0.125,
    encoder2_widths=(8, 16, 32, 64),
    decoder_widths=(32, 16, 8, 8),
    aspp_out=16,
    aspp_rates=(1, 2, 3),
    input_extent=(64, 64),
)


class AttResDUNet(Module):
    """Encoder1 -> ASPP -> Decoder1 -> (x input) -> Encoder2 -> ASPP -> Decoder2 -> fuse.

    ``forward`` returns ``(out1, out2, final)``, each ``(N, 1, H, W)`` in (0, 1).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        full = config.variant == "full_attention"
        r, dec = config.residual, config.decoder_widths

        self.encoder1 = VGGEncoder(rng, config.width_mult)
        enc1 = self.encoder1.widths
        self.aspp1 = ASPP(rng, ASPPSpec(enc1[4], config.aspp_out, tuple(config.aspp_rates)))
        self.decoder1 = []
        cin = config.aspp_out
        for i in range(4):
            skip = enc1[3 - i]
            self.decoder1.append(
                DecoderBlock(rng, cin, (skip,), dec[i], config.se_ratio, r, attention=(True,))
            )
            cin = dec[i]
        self.head1 = Conv2d(rng, dec[3], 1, 1)

        self.encoder2 = []
        cin = 3
        for width in config.encoder2_widths:
            self.encoder2.append(ConvBlock(rng, ConvBlockSpec(cin, width, config.se_ratio), residual=r))
            cin = width
        self.aspp2 = ASPP(rng, ASPPSpec(cin, config.aspp_out, tuple(config.aspp_rates)))
        self.decoder2 = []
        cin = config.aspp_out
        enc2 = config.encoder2_widths
        for i in range(4):
            skips = (enc1[3 - i], enc2[3 - i])
            self.decoder2.append(
                DecoderBlock(rng, cin, skips, dec[i], config.se_ratio, r, attention=(False, full))
            )
            cin = dec[i]
        self.head2 = Conv2d(rng, dec[3], 1, 1)
        self.final = Conv2d(rng, 2, 1, 1)
        self.assign_names()

    def _check_input(self, image: Tensor) -> None:
        if image.data.ndim != 4:
            raise ShapeError(f"image must be (N,3,H,W), got {image.shape}")
        if image.shape[1] != 3:
            raise ShapeError(f"image must have 3 channels, got {image.shape[1]}", axis="C")
        h, w = self.config.input_extent
        if image.shape[2] != h:
            raise ShapeError(f"image height {image.shape[2]} != configured {h}", axis="H")
        if image.shape[3] != w:
            raise ShapeError(f"image width {image.shape[3]} != configured {w}", axis="W")

    def forward_first(self, image: Tensor, alphas: Optional[list] = None) -> tuple[Tensor, list[Tensor]]:
        """First U-Net only: returns ``out1`` and the encoder-1 skips."""
        self._check_input(image)
        x, skips1 = self.encoder1(image)
        x = self.aspp1(x)
        for i, block in enumerate(self.decoder1):
            x = block(x, [skips1[3 - i]], alphas)
        return ops.sigmoid(self.head1(x)), skips1

    def forward(self, image: Tensor, alphas: Optional[list] = None) -> tuple[Tensor, Tensor, Tensor]:
        """``(out1, out2, final)``; gate coefficient maps are appended to
        ``alphas`` in execution order when it is given."""
        out1, skips1 = self.forward_first(image, alphas)
        x = ops.mul(image, out1)
        skips2 = []
        for block in self.encoder2:
            x = block(x)
            skips2.append(x)
            x = ops.maxpool2d(x)
        x = self.aspp2(x)
        for i, block in enumerate(self.decoder2):
            x = block(x, [skips1[3 - i], skips2[3 - i]], alphas)
        out2 = ops.sigmoid(self.head2(x))
        final = ops.sigmoid(self.final(ops.concat_channels(out1, out2)))
        return out1, out2, final

    def attention_maps(self, image: Tensor) -> list[np.ndarray]:
        """Gate coefficients ``(N, 1, h, w)`` at each gated skip's extent, decoder 1 first."""
        alphas: list = []
        with no_grad():
            self.forward(image, alphas)
        return [a.data for a in alphas]

    def flops(self) -> int:
        h, w = self.config.input_extent
        total = self.encoder1.flops(h, w)
        bh, bw = h // 16, w // 16
        total += self.aspp1.flops(bh, bw)
        for i, block in enumerate(self.decoder1):
            total += block.flops(bh << i, bw << i)
        total += self.head1.flops(h, w) + h * w  # head conv + sigmoid
        total += 3 * h * w  # image * out1
        eh, ew = h, w
        for block in self.encoder2:
            total += block.flops(eh, ew)
            eh, ew = eh // 2, ew // 2
        total += self.aspp2.flops(bh, bw)
        for i, block in enumerate(self.decoder2):
            total += block.flops(bh << i, bw << i)
        total += self.head2.flops(h, w) + h * w
        total += self.final.flops(h, w) + h * w
        return total


def build_model(config: ModelConfig, seed: int = 0) -> AttResDUNet:
    """Deterministically initialised model for ``config``."""
    return AttResDUNet(config, seed)


def count_params_flops(config: ModelConfig) -> tuple[int, int]:
    """Exact trainable-scalar count and per-image FLOPs at the configured extent."""
    model = AttResDUNet(config, seed=0)
    return model.num_parameters(), model.flops()


# published counts for the 192x256 model, for comparison only
REFERENCE_PARAMS = {"half_attention": 35.0e6, "full_attention": 36.5e6}
REFERENCE_GFLOPS = {"half_attention": 90.1, "full_attention": 92.1}


def accounting_report(config: ModelConfig) -> dict:
    params, flops = count_params_flops(config)
    ref_p = REFERENCE_PARAMS[config.variant]
    ref_f = REFERENCE_GFLOPS[config.variant]
    gflops = flops / 1e9
    return {
        "variant": config.variant,
        "input_extent": list(config.input_extent),
        "params": params,
        "params_millions": params / 1e6,
        "gflops": gflops,
        "reference_params_millions": ref_p / 1e6,
        "reference_gflops": ref_f,
        "params_ratio": params / ref_p,
        "gflops_ratio": gflops / ref_f,
        "within_20_percent": abs(params / ref_p - 1) <= 0.2 and abs(gflops / ref_f - 1) <= 0.2,
    }
