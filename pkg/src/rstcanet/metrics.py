"""Color PSNR and SSIM, plus the dataset benchmark runner and CSV report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.signal import fftconvolve

from .bayer import mosaic_rggb
from .data import list_images, load_rgb

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def cpsnr(ref: np.ndarray, test: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """10*log10(1/MSE) with the MSE pooled over all three channels.

    Inputs are [3,H,W] in [0,1]; identical images report the cap.
    """
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    mse = np.mean((ref - test) ** 2)
    if mse == 0.0:
        return cap
    return min(cap, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean structural similarity, per channel then averaged.

    Gaussian window 11x11, sigma 1.5, K1=0.01, K2=0.03, dynamic range 1;
    statistics use the valid interior only.  Symmetric in its arguments.
    """
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.ndim != 3:
        raise ValueError(f"expected [C,H,W] images, got {ref.shape}")
    _, h, w = ref.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image ({h},{w}) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def filt(img):
        return fftconvolve(img, kernel, mode="valid")

    values = []
    for c in range(ref.shape[0]):
        x, y = ref[c], test[c]
        mu_x, mu_y = filt(x), filt(y)
        xx = filt(x * x) - mu_x**2
        yy = filt(y * y) - mu_y**2
        xy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass
class MetricReport:
    """Per-image and mean quality numbers for one method on one dataset."""

    method: str
    dataset: str
    per_image: list[tuple[str, float, float]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_cpsnr(self) -> float:
        return float(np.mean([r[1] for r in self.per_image])) if self.per_image else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.per_image])) if self.per_image else float("nan")


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def evaluate_dataset(
    demosaicer: Callable[[np.ndarray], np.ndarray],
    dataset_dir,
    method: str = "model",
    crop: int = 0,
    quantize: bool = False,
    self_test: bool = False,
) -> MetricReport:
    """Mosaic every image, demosaic with ``demosaicer``, score against ground truth.

    Images are processed in filename order; unreadable files are recorded as
    skipped and the run continues.  ``crop`` trims a border before scoring,
    ``quantize`` rounds outputs to 8-bit first, ``self_test`` scores the
    ground truth against itself.
    """
    paths = list_images(dataset_dir)
    if not paths:
        raise FileNotFoundError(f"no images in {dataset_dir}")
    report = MetricReport(method=method, dataset=str(dataset_dir))
    for path in paths:
        try:
            rgb = load_rgb(path)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            report.skipped.append(path.name)
            continue
        if self_test:
            out = rgb
        else:
            out = np.clip(demosaicer(mosaic_rggb(rgb)), 0.0, 1.0)
        if quantize:
            out = quantize_8bit(out)
        if crop:
            rgb = rgb[:, crop:-crop, crop:-crop]
            out = out[:, crop:-crop, crop:-crop]
        report.per_image.append((path.name, cpsnr(rgb, out), ssim(rgb, out)))
    return report


def write_report_csv(report: MetricReport, path) -> None:
    """CSV rows at 4 decimals; the MEAN row averages the rows as printed,
    so re-parsing the file and averaging reproduces it exactly."""
    lines = ["image,cpsnr_db,ssim"]
    rounded = [(name, round(p, 4), round(s, 4)) for name, p, s in report.per_image]
    for name, p, s in rounded:
        lines.append(f"{name},{p:.4f},{s:.4f}")
    mean_p = round(float(np.mean([p for _, p, _ in rounded])), 4)
    mean_s = round(float(np.mean([s for _, _, s in rounded])), 4)
    lines.append(f"MEAN,{mean_p:.4f},{mean_s:.4f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report_csv(path) -> tuple[list[tuple[str, float, float]], tuple[float, float]]:
    rows = []
    mean = (float("nan"), float("nan"))
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "image,cpsnr_db,ssim":
            raise ValueError(f"unexpected report header: {header!r}")
        for line in fh:
            name, p, s = line.strip().split(",")
            if name == "MEAN":
                mean = (float(p), float(s))
            else:
                rows.append((name, float(p), float(s)))
    return rows, mean
