"""Tiled whole-volume inference and multi-shot averaging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as M
from .core import BitVolume, CropSpec, DenseVolume, RandomSource, Shape3, VolumeError
from .stats import thin_array


@dataclass(frozen=True)
class InferConfig:
    tile: Shape3 = field(default_factory=lambda: Shape3(16, 64, 64))
    overlap: float = 0.5
    shots: int = 1
    shot_p: float = 1.0
    combine: str = "mean"
    blend: str = "uniform"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tile", Shape3.of(self.tile))
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if not 0.0 < self.shot_p <= 1.0:
            raise ValueError(f"shot_p must lie in (0, 1], got {self.shot_p}")
        if self.combine not in ("mean", "median"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.blend not in ("uniform", "cosine"):
            raise ValueError(f"unknown blend mode {self.blend!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _axis_starts(length: int, tile: int, overlap: float) -> list[int]:
    stride = max(1, int(tile * (1.0 - overlap)))
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def tile_plan(shape, cfg: InferConfig) -> list[CropSpec]:
    """Tiles in (t, y, x) raster order; the last tile on each axis is clamped
    to the boundary so every voxel is covered."""
    shape = Shape3.of(shape)
    if any(s > d for s, d in zip(cfg.tile, shape)):
        raise VolumeError(f"tile {cfg.tile.as_tuple()} larger than volume {shape.as_tuple()}")
    axes = [_axis_starts(d, s, cfg.overlap) for s, d in zip(cfg.tile, shape)]
    return [CropSpec((t, y, x), cfg.tile) for t in axes[0] for y in axes[1] for x in axes[2]]


def logits_to_intensity(logits, photon_count: float) -> np.ndarray:
    """Softmax over all voxels scaled so the result sums to ``photon_count``."""
    if photon_count < 0:
        raise ValueError("photon_count must be >= 0")
    lg = torch.as_tensor(logits).detach().to(torch.float64)
    p = torch.softmax(lg.reshape(-1), dim=0).reshape(lg.shape)
    return (p * float(photon_count)).numpy()


def _cosine_window(tile: Shape3) -> np.ndarray:
    ws = [np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2 if n > 1 else np.ones(1)
          for n in tile]
    return np.einsum("i,j,k->ijk", *ws) + 1e-6


def _predict_array(m: M.ModelState, inp: np.ndarray, raw: np.ndarray,
                   cfg: InferConfig) -> np.ndarray:
    tiles = tile_plan(inp.shape, cfg)
    m.config.check_input(cfg.tile.as_tuple())

    def run(c: CropSpec) -> np.ndarray:
        sl = c.slices()
        x = torch.from_numpy(inp[sl][None, None].astype(np.float32))
        logits = M.forward(m, x)[0, 0]
        return logits_to_intensity(logits, float(raw[sl].sum()))

    with M.kernel_threads(1):
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                outs = list(pool.map(run, tiles))
        else:
            outs = [run(c) for c in tiles]

    acc = np.zeros(inp.shape, np.float64)
    weight = np.zeros(inp.shape, np.float64)
    win = _cosine_window(cfg.tile) if cfg.blend == "cosine" else np.ones(cfg.tile.as_tuple())
    for c, out in zip(tiles, outs):
        sl = c.slices()
        acc[sl] += win * out
        weight[sl] += win
    return acc / weight


def predict(m: M.ModelState, raw: BitVolume, cfg: InferConfig,
            rng: RandomSource | None = None) -> DenseVolume:
    """Tiled prediction of the per-voxel detection intensity.

    With ``shot_p == 1`` the raw bits are the network input; otherwise a
    single thinning at ``shot_p`` (drawn from ``rng``) is used. Each tile's
    softmax is scaled by the raw photon count of that tile, and overlapping
    tiles are averaged.
    """
    arr = raw.to_array()
    if cfg.shot_p < 1.0:
        rng = rng if rng is not None else RandomSource(0)
        inp, _ = thin_array(arr, cfg.shot_p, rng.generator())
    else:
        inp = arr
    return DenseVolume(raw.shape, _predict_array(m, inp, arr, cfg))


def multi_shot(m: M.ModelState, raw: BitVolume, cfg: InferConfig,
               rng: RandomSource | None = None) -> DenseVolume:
    """Combine ``cfg.shots`` predictions from independent thinnings at ``shot_p``.

    Shot ``k`` thins with stream ``rng.child(k)``; predictions are combined
    voxel-wise by mean (or median).
    """
    rng = rng if rng is not None else RandomSource(0)
    arr = raw.to_array()
    shots = []
    for k in range(cfg.shots):
        if cfg.shot_p < 1.0:
            inp, _ = thin_array(arr, cfg.shot_p, rng.child(k).generator())
        else:
            inp = arr
        shots.append(_predict_array(m, inp, arr, cfg))
    stack = np.stack(shots)
    out = np.median(stack, axis=0) if cfg.combine == "median" else stack.mean(axis=0)
    return DenseVolume(raw.shape, out)
