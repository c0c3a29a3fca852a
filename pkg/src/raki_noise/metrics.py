"""Reference-based image quality on magnitude images inside a region of interest."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


@dataclass(frozen=True)
class MetricsReport:
    nmse: float
    ssim: float
    psnr: float
    psnr_infinite: bool
    roi_voxels: int

    def to_dict(self) -> dict:
        return asdict(self)


def _prep(x, ref, roi):
    x, ref = np.abs(np.asarray(x)), np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    roi = np.ones(ref.shape, bool) if roi is None else np.asarray(roi, bool)
    if roi.shape != ref.shape:
        raise ValueError("ROI shape does not match the images")
    return x, ref, roi


def nmse(x, ref, roi=None) -> float:
    x, ref, roi = _prep(x, ref, roi)
    energy = np.sum(ref[roi] ** 2)
    if energy == 0:
        raise ValueError("reference has zero energy inside the ROI")
    return float(np.sum((x[roi] - ref[roi]) ** 2) / energy)


def psnr(x, ref, roi=None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical magnitudes."""
    x, ref, roi = _prep(x, ref, roi)
    mse = np.mean((x[roi] - ref[roi]) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(ref[roi].max() ** 2 / mse))


def ssim_map(x, ref, data_range: float, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    """Local SSIM with a Gaussian window and reflecting borders."""
    radius = cfg.window // 2
    blur = lambda im: gaussian_filter(im, cfg.sigma, mode="reflect", truncate=radius / cfg.sigma)
    c1, c2 = (cfg.k1 * data_range) ** 2, (cfg.k2 * data_range) ** 2
    mx, my = blur(x), blur(ref)
    vx = blur(x * x) - mx * mx
    vy = blur(ref * ref) - my * my
    cov = blur(x * ref) - mx * my
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, ref, roi=None, cfg: SSIMConfig = SSIMConfig(), data_range: float | None = None) -> float:
    """Mean local SSIM over the ROI; the dynamic range defaults to the ROI maximum of ``ref``."""
    x, ref, roi = _prep(x, ref, roi)
    rows, cols = np.nonzero(roi)
    if rows.size == 0 or np.ptp(rows) + 1 < cfg.window or np.ptp(cols) + 1 < cfg.window:
        raise ValueError(f"ROI is smaller than the {cfg.window}x{cfg.window} window")
    L = float(ref[roi].max()) if data_range is None else float(data_range)
    return float(ssim_map(x, ref, L, cfg)[roi].mean())


def report(x, ref, roi=None, cfg: SSIMConfig = SSIMConfig()) -> MetricsReport:
    _, _, roi_ = _prep(x, ref, roi)
    p = psnr(x, ref, roi)
    return MetricsReport(nmse(x, ref, roi), ssim(x, ref, roi, cfg), p, bool(np.isinf(p)), int(roi_.sum()))
