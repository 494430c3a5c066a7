"""Full-reference image quality metrics and the directory evaluation protocol.

All metrics take [-1, 1] images of shape (C, H, W) and internally map them to
[0, 1]. Each accepts an optional boolean ``region`` mask (H, W) restricting
the evaluation to selected pixels (used for hole-only scoring); ``None``
means the full image.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import InvalidInputError
from .imaging import corruption_ratio, load_mask, read_image

PSNR_CAP_DB = 100.0
REPORT_VERSION = 1

# Named plug-in slot for additional full-reference metrics (e.g. a learned
# perceptual metric backed by externally pre-trained weights). Registered
# callables receive ([-1,1] pred, gt, region) and return a float; they are
# picked up automatically by evaluate_dirs. Ships empty.
EXTRA_METRICS: dict[str, Callable[[np.ndarray, np.ndarray, np.ndarray | None], float]] = {}


def register_metric(
    name: str,
    fn: Callable[[np.ndarray, np.ndarray, np.ndarray | None], float],
) -> None:
    EXTRA_METRICS[name] = fn


def _to_unit(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float64) + 1.0) / 2.0


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise InvalidInputError(f"expected (C, H, W) images, got {pred.shape}")


def psnr(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1] images, capped at 100."""
    _check_pair(pred, gt)
    sq = (_to_unit(pred) - _to_unit(gt)) ** 2
    if region is not None:
        if not region.any():
            raise InvalidInputError("empty evaluation region")
        sq = sq[:, region]
    mse = float(sq.mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _filter_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.einsum("ijkl,kl->ij", windows, kernel)


def ssim(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1; mean over the valid map and over channels."""
    _check_pair(pred, gt)
    size = 11
    if min(pred.shape[1:]) < size:
        raise InvalidInputError(f"image smaller than the {size}x{size} SSIM window")
    kernel = _gaussian_kernel(size, 1.5)
    c1 = 0.01**2
    c2 = 0.03**2
    pad = size // 2
    x_all = _to_unit(pred)
    y_all = _to_unit(gt)
    region_valid = None
    if region is not None:
        region_valid = region[pad:-pad, pad:-pad]
        if not region_valid.any():
            raise InvalidInputError("evaluation region has no valid SSIM centers")
    vals = []
    for ch in range(pred.shape[0]):
        x, y = x_all[ch], y_all[ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        vals.append(
            float(ssim_map[region_valid].mean() if region_valid is not None
                  else ssim_map.mean())
        )
    return float(np.mean(vals))


def ncc(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Normalized cross correlation (cosine form, no mean removal) on [0, 1]
    pixels, computed per channel and averaged."""
    _check_pair(pred, gt)
    x_all = _to_unit(pred)
    y_all = _to_unit(gt)
    if region is not None:
        if not region.any():
            raise InvalidInputError("empty evaluation region")
        x_all = x_all[:, region]
        y_all = y_all[:, region]
    vals = []
    for ch in range(pred.shape[0]):
        x = x_all[ch].ravel()
        y = y_all[ch].ravel()
        y_energy = float(np.dot(y, y))
        if y_energy == 0.0:
            raise InvalidInputError("ground-truth channel has zero energy")
        x_energy = float(np.dot(x, x))
        if x_energy == 0.0:
            vals.append(0.0)
            continue
        vals.append(float(np.dot(x, y)) / math.sqrt(x_energy * y_energy))
    return float(np.mean(vals))


def _window_starts(extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)  # flush window so edges are covered
    return starts


def lmse(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None,
         window: int = 20, stride: int = 10) -> float:
    """Local (windowed, scale-invariant) mean squared error: per 20x20 window
    with stride 10, the best single scale factor is fitted to the prediction
    and the residual is accumulated, normalized by the ground-truth energy."""
    _check_pair(pred, gt)
    h, w = pred.shape[1:]
    if min(h, w) < window:
        raise InvalidInputError(f"image smaller than the {window}x{window} LMSE window")
    x_all = _to_unit(pred)
    y_all = _to_unit(gt)
    resid_total = 0.0
    energy_total = 0.0
    for ch in range(pred.shape[0]):
        for top in _window_starts(h, window, stride):
            for left in _window_starts(w, window, stride):
                sl = (slice(top, top + window), slice(left, left + window))
                p = x_all[ch][sl]
                g = y_all[ch][sl]
                if region is not None:
                    sel = region[sl]
                    if not sel.any():
                        continue
                    p, g = p[sel], g[sel]
                pp = float(np.dot(p.ravel(), p.ravel()))
                pg = float(np.dot(p.ravel(), g.ravel()))
                alpha = pg / pp if pp > 0.0 else 0.0
                resid = alpha * p - g
                resid_total += float(np.dot(resid.ravel(), resid.ravel()))
                energy_total += float(np.dot(g.ravel(), g.ravel()))
    if energy_total == 0.0:
        return 0.0
    return resid_total / energy_total


def bucket_label(ratio: float) -> str:
    """Decile corruption bucket label, e.g. 0.22 -> "(0.2,0.3]"."""
    k = max(1, min(10, math.ceil(ratio * 10.0 - 1e-9)))
    return f"({(k - 1) / 10:.1f},{k / 10:.1f}]"


@dataclass(frozen=True)
class MetricsReport:
    """Mean metric values over a set of image pairs."""

    psnr: float
    ssim: float
    ncc: float
    lmse: float
    n_images: int
    bucket: str

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "ncc": self.ncc,
                "lmse": self.lmse, "n_images": self.n_images, "bucket": self.bucket}


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _image_names(directory: Path) -> set[str]:
    return {p.name for p in directory.iterdir()
            if p.suffix.lower() in _IMAGE_SUFFIXES}


def evaluate_pair(pred: np.ndarray, gt: np.ndarray,
                  region: np.ndarray | None = None) -> dict[str, float]:
    row = {
        "psnr": psnr(pred, gt, region),
        "ssim": ssim(pred, gt, region),
        "ncc": ncc(pred, gt, region),
        "lmse": lmse(pred, gt, region),
    }
    for name, fn in EXTRA_METRICS.items():
        row[name] = fn(pred, gt, region)
    return row


def evaluate_dirs(
    pred_dir: str | Path,
    gt_dir: str | Path,
    mask_dir: str | Path,
    region: str = "full",
) -> tuple[MetricsReport, dict[str, MetricsReport], list[dict]]:
    """Score every matched filename in the three directories.

    Returns the overall report, a per-corruption-bucket breakdown (buckets
    derived from the stored masks), and the per-image rows.
    """
    if region not in ("full", "hole"):
        raise InvalidInputError(f"region must be 'full' or 'hole', got {region!r}")
    pred_dir, gt_dir, mask_dir = Path(pred_dir), Path(gt_dir), Path(mask_dir)
    names = _image_names(pred_dir)
    for other, label in ((gt_dir, "gt"), (mask_dir, "mask")):
        other_names = _image_names(other)
        if other_names != names:
            raise InvalidInputError(
                f"filename sets differ between pred and {label} directories: "
                f"{sorted(names ^ other_names)[:8]}"
            )
    if not names:
        raise InvalidInputError("no images to evaluate")

    rows = []
    for name in sorted(names):
        pred = read_image(pred_dir / name)
        gt = read_image(gt_dir / name)
        mask = load_mask(mask_dir / name)
        if pred.shape != gt.shape or mask.shape != pred.shape[1:]:
            raise InvalidInputError(f"shape mismatch for {name}")
        sel = (mask == 0.0) if region == "hole" else None
        row = {"file": name, "bucket": bucket_label(corruption_ratio(mask))}
        row.update(evaluate_pair(pred, gt, sel))
        rows.append(row)

    metric_names = [k for k in rows[0] if k not in ("file", "bucket")]

    def summarize(group: list[dict], bucket: str) -> MetricsReport:
        means = {m: float(np.mean([r[m] for r in group])) for m in metric_names}
        return MetricsReport(psnr=means["psnr"], ssim=means["ssim"],
                             ncc=means["ncc"], lmse=means["lmse"],
                             n_images=len(group), bucket=bucket)

    overall = summarize(rows, "all")
    buckets = {}
    for bucket in sorted({r["bucket"] for r in rows}):
        buckets[bucket] = summarize([r for r in rows if r["bucket"] == bucket], bucket)
    return overall, buckets, rows


def write_report_json(path: str | Path, overall: MetricsReport,
                      buckets: dict[str, MetricsReport], region: str) -> None:
    """Versioned JSON document shaped {metric -> {bucket -> value}}."""
    metrics: dict[str, dict[str, float]] = {}
    for name in ("psnr", "ssim", "ncc", "lmse"):
        col = {"overall": getattr(overall, name)}
        for bucket, report in buckets.items():
            col[bucket] = getattr(report, name)
        metrics[name] = col
    doc = {
        "version": REPORT_VERSION,
        "region": region,
        "n_images": overall.n_images,
        "metrics": metrics,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_per_image_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise InvalidInputError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
