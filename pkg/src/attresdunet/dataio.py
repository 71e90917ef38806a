"""Image/mask I/O, dataset splitting and the synthetic lesion generator."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


@dataclass
class ImageSample:
    """RGB image ``(3, H, W)`` in [0, 1] and binary mask ``(1, H, W)``."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3,H,W), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")

    @property
    def extent(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# --------------------------------------------------------------------------
# PNG I/O


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] reals to uint8 with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image_png(path, image: np.ndarray) -> None:
    Image.fromarray(quantize(np.transpose(image, (1, 2, 0))), mode="RGB").save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-2:])
    Image.fromarray((m > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_image_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.transpose(arr, (2, 0, 1)) / np.float32(255.0)


def read_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)[None]


def load_sample(image_path, mask_path, sample_id: Optional[str] = None) -> ImageSample:
    image = read_image_png(image_path)
    mask = read_mask_png(mask_path)
    if image.shape[1:] != mask.shape[1:]:
        raise ValueError(f"image {image_path} is {image.shape[1:]} but mask {mask_path} is {mask.shape[1:]}")
    return ImageSample(image, mask, sample_id if sample_id is not None else Path(image_path).stem)


def save_sample(sample: ImageSample, image_path, mask_path) -> None:
    write_image_png(image_path, sample.image)
    write_mask_png(mask_path, sample.mask)


def write_dataset(root, samples: Sequence[ImageSample], assignment: Optional[dict[str, str]] = None) -> None:
    """Write ``images/<id>.png``, ``masks/<id>.png`` and ``manifest.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, root / "images" / f"{s.id}.png", root / "masks" / f"{s.id}.png")
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split"])
        for s in samples:
            writer.writerow([s.id, (assignment or {}).get(s.id, "")])


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    with open(path, newline="") as fh:
        return [(row["id"], row["split"]) for row in csv.DictReader(fh)]


def read_dataset(root, split: Optional[str] = None) -> list[ImageSample]:
    root = Path(root)
    return [
        load_sample(root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png", sid)
        for sid, assigned in read_manifest(root)
        if split is None or assigned == split
    ]


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three non-negatives summing to 1, got {self.fractions}")


def split_dataset(dataset: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous ``floor(f_train n) / floor(f_val n) / rest``."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.fractions[0] * n + 1e-9))
    n_val = int(np.floor(spec.fractions[1] * n + 1e-9))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([dataset[i] for i in part] for part in parts)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    softness: float  # edge half-width in pixels

    def radius(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """Normalized radius at pixel centers: < 1 inside, 1 on the boundary."""
        dy, dx = yy - self.cy, xx - self.cx
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = (ca * dx + sa * dy) / self.rx
        v = (-sa * dx + ca * dy) / self.ry
        return np.sqrt(u * u + v * v)


@dataclass
class Scene:
    ellipses: list[Ellipse]
    background: np.ndarray  # (3,) base color
    foreground: np.ndarray  # (3,) lesion color
    tint: np.ndarray  # (3,) global illuminant
    texture_seed: int = 0


MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.40


def _pixel_grid(extent):
    h, w = extent
    return np.meshgrid(np.arange(h, dtype=np.float64) + 0.5, np.arange(w, dtype=np.float64) + 0.5, indexing="ij")


def scene_mask(ellipses: Iterable[Ellipse], extent) -> np.ndarray:
    """Mask from geometry: pixel coverage thresholded at 0.5 (centre inside an ellipse)."""
    yy, xx = _pixel_grid(extent)
    mask = np.zeros(extent, dtype=bool)
    for e in ellipses:
        mask |= e.radius(yy, xx) <= 1.0
    return mask.astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, extent, cells: int) -> np.ndarray:
    h, w = extent
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def draw_scene(rng: np.random.Generator, extent) -> Scene:
    """Random geometry and colors whose mask covers 2%-40% of the image."""
    h, w = extent
    side = min(h, w)
    background = rng.uniform([0.60, 0.50, 0.45], [0.90, 0.80, 0.75])
    # darker, redder lesion; the upper end of the factor range gives low-contrast cases
    darkening = rng.uniform(0.40, 0.75)
    foreground = np.clip(background * darkening * rng.uniform([1.0, 0.7, 0.7], [1.2, 0.95, 0.95]), 0.0, 1.0)
    tint = rng.uniform(0.55, 1.0, size=3)
    tint /= tint.max()
    while True:
        ellipses = []
        for _ in range(int(rng.integers(1, 4))):
            ry, rx = rng.uniform(0.08, 0.30, size=2) * side
            ellipses.append(
                Ellipse(
                    cy=float(rng.uniform(0.15, 0.85) * h),
                    cx=float(rng.uniform(0.15, 0.85) * w),
                    ry=float(ry),
                    rx=float(rx),
                    angle=float(rng.uniform(0, np.pi)),
                    softness=float(rng.uniform(0.75, 2.5)),
                )
            )
        frac = scene_mask(ellipses, extent).mean()
        if MIN_FOREGROUND <= frac <= MAX_FOREGROUND:
            break
    return Scene(ellipses, background, foreground, tint, int(rng.integers(2**31)))


def render_scene(scene: Scene, extent) -> tuple[np.ndarray, np.ndarray]:
    """Image ``(3,H,W)`` in [0, 1] and exact binary mask ``(1,H,W)``."""
    yy, xx = _pixel_grid(extent)
    alpha = np.zeros(extent)
    for e in scene.ellipses:
        # signed distance to the boundary, approximately in pixels; 0.5 coverage on the boundary
        dist = (1.0 - e.radius(yy, xx)) * min(e.ry, e.rx)
        alpha = np.maximum(alpha, np.clip(0.5 + 0.5 * dist / e.softness, 0.0, 1.0))
    rng = np.random.default_rng(scene.texture_seed)
    texture = 0.06 * _smooth_noise(rng, extent, 6) + 0.02 * rng.standard_normal(extent)
    lesion_texture = 0.04 * _smooth_noise(rng, extent, 10)
    bg = scene.background[:, None, None] * (1.0 + texture)[None]
    fg = scene.foreground[:, None, None] * (1.0 + lesion_texture)[None]
    image = (bg * (1.0 - alpha) + fg * alpha) * scene.tint[:, None, None]
    return np.clip(image, 0.0, 1.0).astype(np.float32), scene_mask(scene.ellipses, extent)[None]


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def gen_synthetic(n: int, extent=(64, 64), seed: int = 0) -> list[ImageSample]:
    """``n`` tinted lesion-like samples, deterministic in ``seed``.

    Each sample depends only on ``(seed, index)``, so generation can be split
    across workers without changing the result.
    """
    h, w = extent
    if h % 16 or w % 16:
        raise ValueError(f"extent {extent} must be divisible by 16")
    samples = []
    for i in range(n):
        scene = draw_scene(np.random.default_rng(sample_seed(seed, i)), extent)
        image, mask = render_scene(scene, extent)
        samples.append(ImageSample(image, mask, f"syn{i:05d}"))
    return samples


def synthetic_scene(seed: int, index: int, extent=(64, 64)) -> Scene:
    """The geometry behind sample ``index`` of ``gen_synthetic(.., seed)``."""
    return draw_scene(np.random.default_rng(sample_seed(seed, index)), extent)
