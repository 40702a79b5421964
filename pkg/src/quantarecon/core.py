"""Value types shared across the package.

Binary volumes are stored bit-packed, LSB first within each byte, with voxels
linearized as ``t * (h * w) + y * w + x``. Any padding bits in the final byte
are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np


class VolumeError(ValueError):
    """Raised for invalid shapes, indices or crops."""


@dataclass(frozen=True)
class Shape3:
    t: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("t", "h", "w"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise VolumeError(f"shape dimension {name}={v!r} must be an integer >= 1")
            object.__setattr__(self, name, int(v))

    @classmethod
    def of(cls, shape) -> "Shape3":
        if isinstance(shape, Shape3):
            return shape
        t, h, w = shape
        return cls(t, h, w)

    @property
    def size(self) -> int:
        return self.t * self.h * self.w

    @property
    def nbytes_packed(self) -> int:
        return (self.size + 7) // 8

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    def __iter__(self) -> Iterator[int]:
        return iter(self.as_tuple())


@dataclass(frozen=True)
class CropSpec:
    origin: tuple[int, int, int]
    size: Shape3

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "size", Shape3.of(self.size))
        if any(o < 0 for o in self.origin):
            raise VolumeError(f"negative crop origin {self.origin}")

    def check_inside(self, parent: Shape3) -> None:
        for o, s, p in zip(self.origin, self.size, parent):
            if o + s > p:
                raise VolumeError(f"crop {self} does not fit inside volume {parent.as_tuple()}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


@dataclass(frozen=True)
class RandomSource:
    """Seeded, splittable random stream.

    Identical ``(seed, stream)`` pairs produce identical draws; distinct
    stream ids give statistically independent generators (via
    :class:`numpy.random.SeedSequence` spawn keys).
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        s = self.stream
        if isinstance(s, (int, np.integer)):
            s = (int(s),)
        object.__setattr__(self, "stream", tuple(int(x) for x in s))
        object.__setattr__(self, "seed", int(self.seed))

    def child(self, *ids: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


def _check_index(shape: Shape3, t: int, y: int, x: int) -> int:
    if not (0 <= t < shape.t and 0 <= y < shape.h and 0 <= x < shape.w):
        raise VolumeError(f"index ({t}, {y}, {x}) out of range for shape {shape.as_tuple()}")
    return (t * shape.h + y) * shape.w + x


@dataclass(frozen=True, eq=False)
class BitVolume:
    """Bit-packed binary (t, h, w) volume.

    ``bits`` is a read-only ``uint8`` array of length ``ceil(t*h*w / 8)``.
    """

    shape: Shape3
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = Shape3.of(self.shape)
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8).reshape(-1)
        if bits.size != shape.nbytes_packed:
            raise VolumeError(
                f"packed buffer has {bits.size} bytes, expected {shape.nbytes_packed}"
            )
        tail = shape.size % 8
        if tail and bits[-1] >> tail:
            raise VolumeError("nonzero padding bits in packed buffer")
        if bits.flags.writeable:
            bits = bits.copy()
            bits.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def zeros(cls, shape) -> "BitVolume":
        shape = Shape3.of(shape)
        return cls(shape, np.zeros(shape.nbytes_packed, np.uint8))

    @classmethod
    def from_array(cls, arr) -> "BitVolume":
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {arr.shape}")
        if arr.dtype != bool and np.any((arr != 0) & (arr != 1)):
            raise VolumeError("binary volume values must be 0 or 1")
        packed = np.packbits(arr.astype(bool).reshape(-1), bitorder="little")
        return cls(Shape3.of(arr.shape), packed)

    def to_array(self) -> np.ndarray:
        """Unpack to a ``uint8`` array of shape (t, h, w)."""
        flat = np.unpackbits(self.bits, count=self.shape.size, bitorder="little")
        return flat.reshape(self.shape.as_tuple())

    def get(self, t: int, y: int, x: int) -> int:
        i = _check_index(self.shape, t, y, x)
        return int((self.bits[i >> 3] >> (i & 7)) & 1)

    def set(self, t: int, y: int, x: int, b: int) -> "BitVolume":
        i = _check_index(self.shape, t, y, x)
        if b not in (0, 1):
            raise VolumeError(f"bit value must be 0 or 1, got {b!r}")
        bits = self.bits.copy()
        if b:
            bits[i >> 3] |= np.uint8(1 << (i & 7))
        else:
            bits[i >> 3] &= np.uint8(~(1 << (i & 7)) & 0xFF)
        return BitVolume(self.shape, bits)

    def popcount(self) -> int:
        return int(np.bitwise_count(self.bits).sum(dtype=np.int64))

    def frames(self, start: int, stop: int) -> "BitVolume":
        return crop(self, CropSpec((start, 0, 0), Shape3(stop - start, self.shape.h, self.shape.w)))

    def __eq__(self, other):
        if not isinstance(other, BitVolume):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True, eq=False)
class DenseVolume:
    """Real-valued (t, h, w) volume stored as float32."""

    shape: Shape3
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        shape = Shape3.of(self.shape) if self.shape is not None else Shape3.of(values.shape)
        values = np.ascontiguousarray(values.reshape(shape.as_tuple()))
        if not np.all(np.isfinite(values)):
            raise VolumeError("dense volume contains non-finite values")
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, arr) -> "DenseVolume":
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {arr.shape}")
        return cls(Shape3.of(arr.shape), arr)

    def require_nonnegative(self) -> "DenseVolume":
        if np.any(self.values < 0):
            raise VolumeError("rate map contains negative values")
        return self

    def __eq__(self, other):
        if not isinstance(other, DenseVolume):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)


Volume = Union[BitVolume, DenseVolume]


def bit_get(v: BitVolume, t: int, y: int, x: int) -> int:
    return v.get(t, y, x)


def bit_set(v: BitVolume, t: int, y: int, x: int, b: int) -> BitVolume:
    return v.set(t, y, x, b)


def popcount(v: BitVolume) -> int:
    return v.popcount()


def crop(v: Volume, c: CropSpec) -> Volume:
    """Extract ``c`` from ``v``; the crop must lie fully inside the volume."""
    c.check_inside(v.shape)
    if isinstance(v, BitVolume):
        if c.size == v.shape:
            return v
        return BitVolume.from_array(v.to_array()[c.slices()])
    if isinstance(v, DenseVolume):
        return DenseVolume(c.size, v.values[c.slices()])
    raise TypeError(f"cannot crop {type(v).__name__}")
