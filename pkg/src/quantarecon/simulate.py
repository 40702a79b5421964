"""Simulate 1-bit quanta stacks from dense reference videos."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BitVolume, DenseVolume, RandomSource, Shape3, VolumeError
from .stats import activation_prob


@dataclass(frozen=True)
class SimConfig:
    mean_rate: float
    seed: int = 0

    def __post_init__(self):
        if not self.mean_rate > 0:
            raise ValueError(f"mean rate must be > 0, got {self.mean_rate}")


def rate_scale(reference: DenseVolume, mean_rate: float) -> float:
    """Factor ``q`` such that ``q * reference`` has mean ``mean_rate``."""
    mean = float(np.mean(reference.values, dtype=np.float64))
    if not mean > 0:
        raise VolumeError("reference mean must be positive")
    return mean_rate / mean


def rate_map(reference: DenseVolume, mean_rate: float) -> np.ndarray:
    """Per-voxel Poisson rates (float64)."""
    return rate_scale(reference, mean_rate) * reference.values.astype(np.float64)


def simulate_quanta(reference: DenseVolume, cfg: SimConfig,
                    rng: RandomSource | None = None, workers: int = 1) -> BitVolume:
    """Sample each voxel as Bernoulli(1 - exp(-q n_i)).

    Frame ``t`` draws from stream ``rng.child(t)`` so results do not depend on
    how frames are scheduled. An all-zero reference yields an all-zero stack.
    """
    if np.any(reference.values < 0):
        raise VolumeError("reference contains negative values")
    rng = rng if rng is not None else RandomSource(cfg.seed)
    if not np.any(reference.values):
        return BitVolume.zeros(reference.shape)
    prob = activation_prob(rate_map(reference, cfg.mean_rate))
    out = np.empty(reference.shape.as_tuple(), np.uint8)

    def frame(t: int) -> None:
        out[t] = rng.child(t).generator().random(prob[t].shape) < prob[t]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(frame, range(reference.shape.t)))
    else:
        for t in range(reference.shape.t):
            frame(t)
    return BitVolume.from_array(out)


def toy_scene(frames: int = 128, h: int = 64, w: int = 64,
              velocity: tuple[float, float] = (0.35, 0.6), blob_sigma: float = 4.0,
              blob_amplitude: float = 3.0, seed: int = 0) -> DenseVolume:
    """Moving Gaussian blob over a static smooth texture.

    The blob starts near the centre and bounces off the borders with the
    given (dy, dx) velocity in pixels per frame. Values are non-negative.
    """
    gen = RandomSource(seed, (0x70E,)).generator()
    noise = gen.standard_normal((h, w))
    texture = ndimage.gaussian_filter(noise, 2.0, mode="wrap")
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * xx / 16.0)
    background = 0.2 + 0.6 * texture + 0.2 * stripes * (yy > h // 2)

    def bounce(pos, lo, hi):
        span = hi - lo
        r = np.mod(pos - lo, 2 * span)
        return lo + np.where(r > span, 2 * span - r, r)

    margin = 1.5 * blob_sigma
    t = np.arange(frames)
    cy = bounce(h / 2 + velocity[0] * t, margin, h - 1 - margin)
    cx = bounce(w / 3 + velocity[1] * t, margin, w - 1 - margin)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    blob = blob_amplitude * np.exp(-d2 / (2 * blob_sigma**2))
    return DenseVolume(Shape3(frames, h, w), background[None] + blob)
