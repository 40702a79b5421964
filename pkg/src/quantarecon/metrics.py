"""Frame-wise PSNR / SSIM and hot-pixel correction.

Both volumes are divided by their own global mean before comparison. PSNR
uses the peak of the normalized ground truth over the whole volume and is
capped at 99 dB. SSIM uses an 11x11 Gaussian window (sigma 1.5),
k1 = 0.01, k2 = 0.03 and the same peak as dynamic range, averaged over the
fully-covered ("valid") window positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import DenseVolume, VolumeError

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @staticmethod
    def _summary(xs):
        a = np.asarray(xs, np.float64)
        if a.size == 0:
            return {}
        return {"mean": float(a.mean()), "std": float(a.std()),
                "min": float(a.min()), "max": float(a.max())}

    def summary(self) -> dict:
        return {
            "frames": len(self.psnr),
            "psnr": self._summary(self.psnr),
            "ssim": self._summary(self.ssim),
            "settings": {"normalization": "global mean, independent",
                         "peak": "max of normalized ground truth",
                         "psnr_cap_db": PSNR_CAP, "ssim_window": SSIM_WIN,
                         "ssim_sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2},
        }


def _values(v) -> np.ndarray:
    return (v.values if isinstance(v, DenseVolume) else np.asarray(v)).astype(np.float64)


def normalize_pair(pred, gt) -> tuple[np.ndarray, np.ndarray, float]:
    """Unit-mean copies of both volumes and the normalized ground-truth peak."""
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise VolumeError(f"shape mismatch: {p.shape} vs {g.shape}")
    gm = g.mean()
    if not gm > 0:
        raise VolumeError("ground truth mean must be positive")
    pm = p.mean()
    g = g / gm
    if pm != 0:
        p = p / pm
    return p, g, float(g.max())


def psnr_frames(pred, gt) -> list[float]:
    p, g, peak = normalize_pair(pred, gt)
    out = []
    for pf, gf in zip(p, g):
        mse = float(np.mean((pf - gf) ** 2))
        if mse == 0:
            out.append(PSNR_CAP)
        else:
            out.append(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))
    return out


def _gaussian_kernel() -> np.ndarray:
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_frame(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise VolumeError(f"frame {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a * mu_a
    sbb = _filter_valid(b * b, k) - mu_b * mu_b
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim_frames(pred, gt) -> list[float]:
    p, g, peak = normalize_pair(pred, gt)
    return [ssim_frame(pf, gf, peak) for pf, gf in zip(p, g)]


def evaluate(pred, gt) -> MetricReport:
    return MetricReport(psnr_frames(pred, gt), ssim_frames(pred, gt))


def hot_pixel_correct(v: DenseVolume, z_threshold: float = 8.0):
    """Detect pixels whose temporal mean is far above their neighbourhood.

    A pixel is flagged when its temporal mean exceeds the 3x3 median of the
    temporal-mean image by more than ``z_threshold`` robust deviations
    (1.4826 * MAD of that residual over the image, floored by the Poisson
    standard error of a temporal mean of counts). Flagged pixels are
    replaced, in every frame, by the median of their 8 neighbours.
    Returns the corrected volume and the flagged ``(y, x)`` coordinates.
    """
    if v.shape.t < 2:
        raise VolumeError("hot pixel detection needs at least two frames")
    vals = v.values.astype(np.float64)
    mean = vals.mean(axis=0)
    local = ndimage.median_filter(mean, size=3, mode="reflect")
    resid = mean - local
    mad = 1.4826 * np.median(np.abs(resid - np.median(resid)))
    # sparse photon data often has MAD = 0; the shot noise of a temporal mean
    # of counts, sqrt(rate / t), then sets the scale instead
    shot = np.sqrt(np.maximum(local, max(float(mean.mean()), 0.0)) / v.shape.t)
    scale = np.maximum(np.maximum(mad, shot), 1e-6 * max(float(np.abs(mean).max()), 1e-12))
    hot = resid > z_threshold * scale
    coords = [tuple(int(i) for i in yx) for yx in np.argwhere(hot)]
    if not coords:
        return v, coords
    ring = np.ones((1, 3, 3), bool)
    ring[0, 1, 1] = False
    med = ndimage.median_filter(vals, footprint=ring, mode="reflect")
    out = vals.copy()
    out[:, hot] = med[:, hot]
    return DenseVolume(v.shape, out), coords
