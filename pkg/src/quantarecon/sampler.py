"""Training triples from binary stacks: random crop, p-thinning, complement mask."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BitVolume, CropSpec, RandomSource, Shape3, VolumeError
from .stats import thin_array

P_MAX_DEFAULT = 1.0 - 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    crop: Shape3 = field(default_factory=lambda: Shape3(16, 64, 64))
    p_min: float = 0.0
    p_max: float = P_MAX_DEFAULT
    p_mode: str = "uniform"
    augment_flip_transpose: bool = False

    def __post_init__(self):
        object.__setattr__(self, "crop", Shape3.of(self.crop))
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ValueError(f"need 0 <= p_min <= p_max <= 1, got [{self.p_min}, {self.p_max}]")
        if self.p_mode not in ("uniform", "fixed"):
            raise ValueError(f"unknown p_mode {self.p_mode!r}")

    @classmethod
    def paper(cls) -> "SamplerConfig":
        return cls(crop=Shape3(32, 256, 256))


@dataclass(frozen=True)
class SplitTriple:
    input: BitVolume
    target: BitVolume
    mask: BitVolume


def draw_p(cfg: SamplerConfig, gen: np.random.Generator) -> float:
    """Uniform on ``[p_min, p_max]``, or ``p_max`` in fixed mode (no draw)."""
    if cfg.p_mode == "fixed":
        return cfg.p_max
    return float(cfg.p_min + (cfg.p_max - cfg.p_min) * gen.random())


def draw_crop(shape: Shape3, size: Shape3, gen: np.random.Generator) -> CropSpec:
    """Origin uniform over all in-bounds positions."""
    if any(s > d for s, d in zip(size, shape)):
        raise VolumeError(f"crop {size.as_tuple()} larger than data {shape.as_tuple()}")
    origin = tuple(int(gen.integers(0, d - s + 1)) for s, d in zip(size, shape))
    return CropSpec(origin, size)


def spatial_op(a: np.ndarray, flip_y: bool, flip_x: bool, transpose: bool) -> np.ndarray:
    if flip_y:
        a = a[..., ::-1, :]
    if flip_x:
        a = a[..., :, ::-1]
    if transpose:
        if a.shape[-1] != a.shape[-2]:
            raise VolumeError("transpose requires a square spatial crop")
        a = np.swapaxes(a, -1, -2)
    return np.ascontiguousarray(a)


def sample_arrays(data: np.ndarray, cfg: SamplerConfig, gen: np.random.Generator):
    """Array-level sampling on an unpacked (t, h, w) 0/1 ``uint8`` stack.

    Returns ``(input, target, mask, p, crop)`` with ``mask = 1 - input``.
    Draw order: crop origin, p, thinning, then the augmentation flags.
    """
    c = draw_crop(Shape3.of(data.shape), cfg.crop, gen)
    p = draw_p(cfg, gen)
    raw = data[c.slices()]
    inp, tar = thin_array(raw, p, gen)
    if cfg.augment_flip_transpose:
        fy, fx = bool(gen.integers(2)), bool(gen.integers(2))
        tr = bool(gen.integers(2)) if cfg.crop.h == cfg.crop.w else False
        inp, tar = spatial_op(inp, fy, fx, tr), spatial_op(tar, fy, fx, tr)
    return inp, tar, 1 - inp, p, c


def sample_triple(data: BitVolume, cfg: SamplerConfig, rng: RandomSource):
    """Draw one training triple; returns ``(SplitTriple, p, CropSpec)``."""
    inp, tar, mask, p, c = sample_arrays(data.to_array(), cfg, rng.generator())
    triple = SplitTriple(*(BitVolume.from_array(a) for a in (inp, tar, mask)))
    return triple, p, c


def augment(t: SplitTriple, rng: RandomSource | None = None, *, flip_y=None,
            flip_x=None, transpose=None) -> SplitTriple:
    """Apply one random (or explicitly given) flip/transpose to all three volumes."""
    gen = rng.generator() if rng is not None else None

    def pick(v):
        if v is not None:
            return bool(v)
        return bool(gen.integers(2)) if gen is not None else False

    fy, fx = pick(flip_y), pick(flip_x)
    square = t.input.shape.h == t.input.shape.w
    tr = pick(transpose) if (square or transpose is not None) else False
    return SplitTriple(*(BitVolume.from_array(spatial_op(v.to_array(), fy, fx, tr))
                         for v in (t.input, t.target, t.mask)))
