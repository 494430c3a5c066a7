"""Image and mask I/O, normalization, and corruption synthesis.

Conventions used everywhere in this package:

- images are float32 arrays of shape (C, H, W) with values in [-1, 1];
- masks are float32 arrays of shape (H, W) with values in {0.0, 1.0},
  where 1 marks a known pixel and 0 a missing one;
- masks persist as 8-bit grayscale PNG (255 = known, 0 = missing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .exceptions import InvalidInputError, MaskGenerationError

# Evaluation-protocol corruption buckets: four irregular ratio ranges plus
# two fixed center-mask area fractions.
IRREGULAR_BUCKETS = ((0.2, 0.3), (0.3, 0.4), (0.4, 0.5), (0.5, 0.6))
CENTER_RATIOS = (0.25, 0.50)

_MAX_STROKE_ATTEMPTS = 1000


@dataclass(frozen=True)
class MaskSpec:
    """Recipe for one synthetic mask.

    ``ratio_lo``/``ratio_hi`` bound the corruption ratio bucket ``(lo, hi]``.
    For ``kind="center"`` the two may coincide, in which case ``ratio_hi`` is
    the exact area fraction of the hole.
    """

    kind: str
    ratio_lo: float
    ratio_hi: float
    seed: int

    def __post_init__(self) -> None:
        if self.kind not in ("center", "irregular"):
            raise InvalidInputError(f"unknown mask kind {self.kind!r}")
        if not (0.0 <= self.ratio_lo <= self.ratio_hi <= 1.0):
            raise InvalidInputError(
                f"ratio bounds must satisfy 0 <= lo <= hi <= 1, got "
                f"({self.ratio_lo}, {self.ratio_hi})"
            )
        if self.kind == "irregular" and self.ratio_lo >= self.ratio_hi:
            raise InvalidInputError("irregular masks need ratio_lo < ratio_hi")


def validate_image(img: np.ndarray, tol: float = 1e-6) -> None:
    """Check the (C, H, W) layout, finiteness and [-1, 1] range of an image."""
    if img.ndim != 3:
        raise InvalidInputError(f"image must be (C, H, W), got shape {img.shape}")
    c, h, w = img.shape
    if h < 8 or w < 8:
        raise InvalidInputError(f"image sides must be >= 8, got {h}x{w}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    if img.min() < -1.0 - tol or img.max() > 1.0 + tol:
        raise InvalidInputError("image values outside [-1, 1]")


def validate_mask(mask: np.ndarray, require_hole: bool = False) -> None:
    """Check that a mask is binary (H, W) with at least one known pixel."""
    if mask.ndim != 2:
        raise InvalidInputError(f"mask must be (H, W), got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidInputError("mask entries must be exactly 0 or 1")
    if not np.any(mask == 1.0):
        raise InvalidInputError("mask has no known pixels")
    if require_hole and not np.any(mask == 0.0):
        raise InvalidInputError("mask has no missing pixels")


def load_image(path: str | Path, target_side: int) -> np.ndarray:
    """Load a PNG/JPEG, resize its shorter side to ``target_side`` keeping the
    aspect ratio, center-crop to a square, and map pixel values to [-1, 1].
    """
    if target_side < 8:
        raise InvalidInputError(f"target_side must be >= 8, got {target_side}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        if min(w, h) < 8:
            raise InvalidInputError(f"source image too small: {w}x{h}")
        scale = target_side / min(w, h)
        new_w = max(target_side, round(w * scale))
        new_h = max(target_side, round(h * scale))
        im = im.resize((new_w, new_h), Image.BICUBIC)
        left = (new_w - target_side) // 2
        top = (new_h - target_side) // 2
        im = im.crop((left, top, left + target_side, top + target_side))
        arr = np.asarray(im, dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def read_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG at its stored size, mapped to [-1, 1], shape (C, H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write a [-1, 1] image to an 8-bit PNG/JPEG file."""
    validate_image(img)
    arr = np.clip((img + 1.0) * 127.5, 0.0, 255.0)
    arr = np.rint(arr).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale mask PNG; values >= 128 count as known."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Write a binary mask as 8-bit grayscale PNG (255 = known, 0 = missing)."""
    validate_mask(mask)
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def generate_center_mask(h: int, w: int, ratio: float) -> np.ndarray:
    """Mask with a centered square hole of side ``round(min(h, w) * sqrt(ratio))``."""
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"center-mask ratio must be in (0, 1), got {ratio}")
    side = max(1, round(min(h, w) * math.sqrt(ratio)))
    side = min(side, min(h, w))
    mask = np.ones((h, w), dtype=np.float32)
    top = (h - side) // 2
    left = (w - side) // 2
    mask[top : top + side, left : left + side] = 0.0
    return mask


def _draw_stroke(canvas: np.ndarray, rng: np.random.Generator, max_thickness: int) -> None:
    """Rasterize one random brush stroke (zeros) onto a uint8 canvas in place."""
    h, w = canvas.shape
    reach = max(4, min(h, w) // 4)
    n_segments = int(rng.integers(2, 9))
    thickness = int(rng.integers(5, max_thickness + 1)) if max_thickness > 5 else 5
    thickness = min(thickness, max(1, min(h, w) - 1))
    x = float(rng.uniform(0, w))
    y = float(rng.uniform(0, h))
    angle = float(rng.uniform(0, 2 * math.pi))
    for _ in range(n_segments):
        angle += float(rng.uniform(-math.pi / 2, math.pi / 2))
        length = float(rng.uniform(reach / 4, reach))
        nx = float(np.clip(x + length * math.cos(angle), 0, w - 1))
        ny = float(np.clip(y + length * math.sin(angle), 0, h - 1))
        cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 0, thickness)
        cv2.circle(canvas, (int(nx), int(ny)), thickness // 2, 0, -1)
        x, y = nx, ny


def generate_irregular_mask(h: int, w: int, spec: MaskSpec) -> np.ndarray:
    """Seeded free-form brush-stroke mask whose corruption ratio falls in
    the bucket ``(spec.ratio_lo, spec.ratio_hi]``.

    Strokes are added one at a time; a stroke that overshoots the bucket is
    undone and retried with a thinner brush. Raises
    :class:`MaskGenerationError` after 1000 failed adjustments.
    """
    if spec.kind != "irregular":
        raise InvalidInputError(f"expected an irregular MaskSpec, got {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    canvas = np.ones((h, w), dtype=np.uint8)
    lo, hi = spec.ratio_lo, spec.ratio_hi
    for _ in range(_MAX_STROKE_ATTEMPTS):
        ratio = 1.0 - float(canvas.sum()) / (h * w)
        if lo < ratio <= hi:
            return canvas.astype(np.float32)
        # Brush size shrinks as the remaining deficit shrinks, so late strokes
        # make fine adjustments instead of overshooting.
        remaining = max(1.0, (hi - ratio) * h * w)
        max_thickness = max(5, min(40, int(math.sqrt(remaining) / 2)))
        before = canvas.copy()
        _draw_stroke(canvas, rng, max_thickness)
        ratio = 1.0 - float(canvas.sum()) / (h * w)
        if ratio > hi:
            canvas = before
    raise MaskGenerationError(
        f"could not reach bucket ({lo}, {hi}] on a {h}x{w} mask "
        f"after {_MAX_STROKE_ATTEMPTS} stroke adjustments (seed {spec.seed})"
    )


def generate_mask(h: int, w: int, spec: MaskSpec) -> np.ndarray:
    """Dispatch on ``spec.kind``; center masks use ``ratio_hi`` as the ratio."""
    if spec.kind == "center":
        return generate_center_mask(h, w, spec.ratio_hi)
    return generate_irregular_mask(h, w, spec)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out missing pixels (0 is mid-gray in the [-1, 1] range)."""
    validate_image(img)
    validate_mask(mask)
    if img.shape[1:] != mask.shape:
        raise InvalidInputError(
            f"image {img.shape} and mask {mask.shape} spatial sizes differ"
        )
    return (img * mask[None, :, :]).astype(img.dtype, copy=False)


def composite(pred: np.ndarray, input_img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend: known pixels from ``input_img``, hole pixels from ``pred``."""
    validate_image(pred)
    validate_image(input_img)
    validate_mask(mask)
    if pred.shape != input_img.shape or pred.shape[1:] != mask.shape:
        raise InvalidInputError(
            f"shape mismatch: pred {pred.shape}, input {input_img.shape}, "
            f"mask {mask.shape}"
        )
    m = mask[None, :, :]
    return m * input_img + (1.0 - m) * pred


def corruption_ratio(mask: np.ndarray) -> float:
    """Fraction of missing (zero) pixels."""
    validate_mask(mask)
    return float((mask == 0.0).sum()) / mask.size
