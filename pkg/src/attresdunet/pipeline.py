"""Preprocessing (shades-of-gray color constancy, sample-wise centering) and
augmentation.

Order used for training data: color constancy -> augment -> center.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataio import ImageSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ColorConstancyConfig:
    """``p`` is the Minkowski exponent; ``target`` picks the common illuminant
    every channel is scaled to (``"mean"`` of the three estimates, or their
    root-mean-square ``"rms"``)."""

    p: float = 6.0
    target: str = "mean"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"Minkowski exponent must be >= 1, got {self.p}")
        if self.target not in ("mean", "rms"):
            raise ValueError(f"unknown equalization target {self.target!r}")


def illuminant(image: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Per-channel Minkowski mean ``(mean f^p)^(1/p)`` in float64."""
    img = np.asarray(image, dtype=np.float64)
    return np.mean(img.reshape(img.shape[0], -1) ** p, axis=1) ** (1.0 / p)


def shades_of_gray(image: np.ndarray, config: ColorConstancyConfig = ColorConstancyConfig()) -> np.ndarray:
    """Equalize the channel illuminants of a ``(3, H, W)`` image in [0, 1].

    Channel ``c`` is scaled by ``target / e_c`` and the result clamped to [0, 1].
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[1] == 0 or img.shape[2] == 0:
        raise ValueError(f"expected a non-empty (C,H,W) image, got shape {img.shape}")
    e = illuminant(img, config.p)
    if np.any(e <= 0):
        raise ValueError(f"channel(s) {np.flatnonzero(e <= 0).tolist()} are all zero; illuminant undefined")
    target = e.mean() if config.target == "mean" else np.sqrt(np.mean(e**2))
    out = img.astype(np.float64) * (target / e)[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize_center(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the image's own per-channel mean.

    Returns the centered image and the subtracted offsets (add them back to
    recover the input for display).
    """
    img = np.asarray(image, dtype=np.float32)
    offsets = img.reshape(img.shape[0], -1).mean(axis=1, dtype=np.float64)
    centered = img - offsets.astype(np.float32)[:, None, None]
    return centered, offsets.astype(np.float32)


# --------------------------------------------------------------------------
# augmentation

GEOMETRIC_OPS = ("rot90", "hflip", "vflip")
PHOTOMETRIC_OPS = ("brightness_contrast",)
RESERVED_OPS = ("hsv", "histogram_equalization")


@dataclass(frozen=True)
class AugmentPolicy:
    ops: frozenset = frozenset(GEOMETRIC_OPS + PHOTOMETRIC_OPS)
    brightness: float = 0.1
    contrast: float = 0.1
    factor: int = 1
    photometric_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "ops", frozenset(self.ops))
        unknown = self.ops - set(GEOMETRIC_OPS + PHOTOMETRIC_OPS + RESERVED_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if self.factor < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.factor}")
        if not (0 <= self.brightness < 1 and 0 <= self.contrast < 1):
            raise ValueError("brightness/contrast ranges must lie in [0, 1)")
        reserved = self.ops & set(RESERVED_OPS)
        if reserved:
            log.warning("augmentation ops %s are reserved and have no effect", sorted(reserved))


@dataclass(frozen=True)
class AugmentDraw:
    rot90: int = 0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0

    @property
    def geometric_only(self) -> bool:
        return self.brightness == 0.0 and self.contrast == 0.0


def draw_augment(policy: AugmentPolicy, rng: np.random.Generator, square: bool = True) -> AugmentDraw:
    """Sample one set of augmentation parameters.

    Odd quarter-turns would swap height and width, so they are only drawn for
    square images.
    """
    rot = 0
    if "rot90" in policy.ops:
        rot = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    hflip = "hflip" in policy.ops and bool(rng.random() < 0.5)
    vflip = "vflip" in policy.ops and bool(rng.random() < 0.5)
    b = c = 0.0
    if "brightness_contrast" in policy.ops and rng.random() < policy.photometric_prob:
        b = float(rng.uniform(-policy.brightness, policy.brightness))
        c = float(rng.uniform(-policy.contrast, policy.contrast))
    return AugmentDraw(rot, hflip, vflip, b, c)


def apply_geometric(array: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = np.rot90(array, draw.rot90, axes=(1, 2)) if draw.rot90 else array
    if draw.hflip:
        out = out[:, :, ::-1]
    if draw.vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def apply_draw(sample: ImageSample, draw: AugmentDraw, new_id: Optional[str] = None) -> ImageSample:
    image = apply_geometric(sample.image, draw)
    mask = apply_geometric(sample.mask, draw)
    if not draw.geometric_only:
        image = np.clip(image * (1.0 + draw.contrast) + draw.brightness, 0.0, 1.0).astype(np.float32)
    return ImageSample(image, mask, sample.id if new_id is None else new_id)


def augment(sample: ImageSample, policy: AugmentPolicy, seed) -> ImageSample:
    """Random geometric ops on image and mask alike; photometric ops on the image only."""
    h, w = sample.extent
    rng = np.random.default_rng(seed)
    return apply_draw(sample, draw_augment(policy, rng, square=h == w))


def augment_expand(dataset: Sequence[ImageSample], policy: AugmentPolicy, seed: int) -> list[ImageSample]:
    """Originals followed by ``factor - 1`` augmented copies of each sample.

    Copy ``j`` of sample ``i`` is drawn from the seed sequence ``(seed, j, i)``.
    """
    out = list(dataset)
    for j in range(1, policy.factor):
        for i, sample in enumerate(dataset):
            aug = augment(sample, policy, np.random.SeedSequence([seed, j, i]))
            aug.id = f"{sample.id}_aug{j}"
            out.append(aug)
    return out


# --------------------------------------------------------------------------
# batching


@dataclass
class ArrayDataset:
    """Model-ready stacked arrays: centered images and float masks."""

    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, 1, H, W)
    ids: list[str] = field(default_factory=list)
    offsets: Optional[np.ndarray] = None  # (N, 3) centering offsets

    def __len__(self) -> int:
        return len(self.images)


def prepare(
    samples: Sequence[ImageSample],
    cc: Optional[ColorConstancyConfig] = ColorConstancyConfig(),
    policy: Optional[AugmentPolicy] = None,
    seed: int = 0,
) -> ArrayDataset:
    """Color constancy (unless ``cc`` is None), optional expansion, centering."""
    if not samples:
        return ArrayDataset(np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 1, 0, 0), np.float32), [], None)
    processed = [
        ImageSample(shades_of_gray(s.image, cc), s.mask, s.id) if cc is not None else s for s in samples
    ]
    if policy is not None and policy.factor > 1:
        processed = augment_expand(processed, policy, seed)
    centered = [normalize_center(s.image) for s in processed]
    return ArrayDataset(
        np.stack([c for c, _ in centered]),
        np.stack([s.mask for s in processed]).astype(np.float32),
        [s.id for s in processed],
        np.stack([o for _, o in centered]),
    )
