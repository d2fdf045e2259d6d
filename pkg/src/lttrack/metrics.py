"""Tracking and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

PX_THRESHOLDS = (4, 8, 16, 32, 64)
MM_THRESHOLDS = (2, 4, 8, 16, 32)
PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    epe_2d: float = float("nan")
    epe_3d: float = float("nan")
    median_epe_2d: float = float("nan")
    median_epe_3d: float = float("nan")
    delta_px: dict = field(default_factory=dict)
    delta_mm: dict = field(default_factory=dict)
    psnr: float | None = None
    ssim: float | None = None
    wall_time: float | None = None
    n_points: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def delta_accuracy(errors, thresholds):
    """Percentage of errors strictly below each threshold (NaN counts as a miss)."""
    errors = np.asarray(errors, float)
    if errors.size == 0:
        return {n: float("nan") for n in thresholds}
    ok = np.where(np.isfinite(errors), errors, np.inf)
    return {n: 100.0 * float(np.mean(ok < n)) for n in thresholds}


def psnr(img, ref, data_range=1.0):
    mse = float(np.mean((np.asarray(img, float) - np.asarray(ref, float)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(img, ref, data_range=1.0, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM with a Gaussian window over the valid (fully covered) region.

    Colour images are scored per channel and averaged.
    """
    img = np.asarray(img, float)
    ref = np.asarray(ref, float)
    if img.ndim == 3:
        return float(np.mean([ssim(img[..., c], ref[..., c], data_range, size, sigma, k1, k2)
                              for c in range(img.shape[2])]))
    w = gaussian_window(size, sigma)

    def filt(a):
        return fftconvolve(a, w, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(img), filt(ref)
    sxx = filt(img * img) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(img * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def track_errors(pred, truth):
    """Per-(query, time) 2D and 3D end-point errors from aligned TrackResult lists.

    Only entries visible in the truth are scored; invalid predictions get NaN.
    """
    truth_by_id = {t.query_id: t for t in truth}
    pred_ids = {p.query_id for p in pred}
    if pred_ids != set(truth_by_id):
        missing = sorted(set(truth_by_id) ^ pred_ids)
        raise KeyError(f"track/truth query ids do not match: {missing[:10]}")
    e2, e3 = [], []
    for p in pred:
        g = truth_by_id[p.query_id]
        if not np.array_equal(p.times, g.times):
            raise KeyError(f"query {p.query_id}: target times differ between tracks and truth")
        use = g.valid
        d2 = np.linalg.norm(p.pixels - g.pixels, axis=1)
        d3 = np.linalg.norm(p.points - g.points, axis=1)
        d2 = np.where(p.valid, d2, np.nan)
        d3 = np.where(p.valid, d3, np.nan)
        e2.append(d2[use])
        e3.append(d3[use])
    return np.concatenate(e2) if e2 else np.zeros(0), np.concatenate(e3) if e3 else np.zeros(0)


def evaluate_metrics(tracks, truth, images=None, wall_time=None):
    """Build a :class:`MetricsReport`; ``images`` is an optional list of (rendered, reference)."""
    e2, e3 = track_errors(tracks, truth)
    rep = MetricsReport(wall_time=wall_time, n_points=int(e2.size))
    if e2.size:
        rep.epe_2d = float(np.nanmean(e2)) if np.isfinite(e2).any() else float("nan")
        rep.epe_3d = float(np.nanmean(e3)) if np.isfinite(e3).any() else float("nan")
        rep.median_epe_2d = float(np.median(np.where(np.isfinite(e2), e2, np.inf)))
        rep.median_epe_3d = float(np.median(np.where(np.isfinite(e3), e3, np.inf)))
    rep.delta_px = delta_accuracy(e2, PX_THRESHOLDS)
    rep.delta_mm = delta_accuracy(e3, MM_THRESHOLDS)
    if images:
        rep.psnr = float(np.mean([psnr(a, b) for a, b in images]))
        rep.ssim = float(np.mean([ssim(a, b) for a, b in images]))
    return rep
