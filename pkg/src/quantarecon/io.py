"""Binary container formats and PGM frame import/export.

QBS (binary stack), 20-byte little-endian header::

    offset  size  field
    0       4     magic b"QBS1"
    4       2     version (u16, = 1)
    6       2     reserved (u16, = 0)
    8       4     t (u32)
    12      4     h (u32)
    16      4     w (u32)
    20      ...   ceil(t*h*w / 8) bytes, the packed bitstream of BitVolume

QDS (dense stack) uses the same layout with magic b"QDS1", the u16 at
offset 6 holding the dtype code (0 = float32 little-endian) and a payload of
t*h*w values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .core import BitVolume, DenseVolume, Shape3

QBS_MAGIC = b"QBS1"
QDS_MAGIC = b"QDS1"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHHIII")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class PaddingError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


def _read_header(f, magic: bytes, path) -> tuple[int, Shape3]:
    head = f.read(HEADER_SIZE)
    if head[:4] != magic[:len(head)] or not head:
        raise BadMagicError(f"{path}: bad magic {head[:4]!r}, expected {magic!r}")
    if len(head) < HEADER_SIZE:
        raise TruncatedError(f"{path}: truncated header")
    got, version, code, t, h, w = _HEADER.unpack(head)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    try:
        shape = Shape3(t, h, w)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return code, shape


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def encode_qbs(v: BitVolume) -> bytes:
    s = v.shape
    return _HEADER.pack(QBS_MAGIC, VERSION, 0, s.t, s.h, s.w) + v.bits.tobytes()


def write_qbs(v: BitVolume, path) -> None:
    _write_atomic(path, encode_qbs(v))


def read_qbs(path) -> BitVolume:
    with open(path, "rb") as f:
        _, shape = _read_header(f, QBS_MAGIC, path)
        payload = f.read()
    n = shape.nbytes_packed
    if len(payload) < n:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {n}")
    if len(payload) > n:
        raise FormatError(f"{path}: {len(payload) - n} trailing bytes after payload")
    bits = np.frombuffer(payload, np.uint8)
    tail = shape.size % 8
    if tail and bits[-1] >> tail:
        raise PaddingError(f"{path}: nonzero padding bits")
    return BitVolume(shape, bits)


def read_qbs_shape(path) -> Shape3:
    with open(path, "rb") as f:
        return _read_header(f, QBS_MAGIC, path)[1]


def read_qbs_frames(path, start: int, stop: int) -> BitVolume:
    """Read frames ``[start, stop)`` touching only the bytes that hold them."""
    with open(path, "rb") as f:
        _, shape = _read_header(f, QBS_MAGIC, path)
        if not 0 <= start < stop <= shape.t:
            raise IndexError(f"frame range [{start}, {stop}) outside 0..{shape.t}")
        plane = shape.h * shape.w
        b0, b1 = start * plane, stop * plane
        byte0, byte1 = b0 // 8, (b1 + 7) // 8
        f.seek(HEADER_SIZE + byte0)
        chunk = f.read(byte1 - byte0)
    if len(chunk) < byte1 - byte0:
        raise TruncatedError(f"{path}: truncated payload")
    bits = np.unpackbits(np.frombuffer(chunk, np.uint8), bitorder="little")
    off = b0 - 8 * byte0
    sub = bits[off: off + (b1 - b0)]
    return BitVolume.from_array(sub.reshape(stop - start, shape.h, shape.w))


def encode_qds(v: DenseVolume) -> bytes:
    s = v.shape
    head = _HEADER.pack(QDS_MAGIC, VERSION, DTYPE_F32, s.t, s.h, s.w)
    return head + v.values.astype("<f4").tobytes()


def write_qds(v: DenseVolume, path) -> None:
    _write_atomic(path, encode_qds(v))


def read_qds(path) -> DenseVolume:
    with open(path, "rb") as f:
        code, shape = _read_header(f, QDS_MAGIC, path)
        if code != DTYPE_F32:
            raise UnsupportedDtypeError(f"{path}: unsupported dtype code {code}")
        payload = f.read()
    n = 4 * shape.size
    if len(payload) < n:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {n}")
    if len(payload) > n:
        raise FormatError(f"{path}: {len(payload) - n} trailing bytes after payload")
    values = np.frombuffer(payload, "<f4").reshape(shape.as_tuple())
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: non-finite value in payload")
    return DenseVolume(shape, values)


# --- PGM -------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise FormatError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM into a float64 array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, start = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval <= 65535:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * dtype.itemsize
    raster = data[start:start + n]
    if len(raster) < n:
        raise TruncatedError(f"{path}: truncated PGM raster")
    img = np.frombuffer(raster, dtype).reshape(h, w)
    return img.astype(np.float64) / maxval


def import_pgm_sequence(paths) -> DenseVolume:
    """Stack PGM frames (in the given order) into a DenseVolume."""
    frames = [read_pgm(p) for p in paths]
    if not frames:
        raise FormatError("no frames given")
    if any(f.shape != frames[0].shape for f in frames):
        raise FormatError("PGM frames have mixed dimensions")
    return DenseVolume.from_array(np.stack(frames))


def export_pgm_frame(v: DenseVolume, t: int, path, maxval: int = 255,
                     normalize: bool = False) -> None:
    """Write frame ``t`` as P5. Values are clipped to [0, 1] unless
    ``normalize`` rescales the frame by its maximum first."""
    if not 0 < maxval <= 65535:
        raise ValueError(f"invalid maxval {maxval}")
    frame = v.values[t].astype(np.float64)
    if normalize:
        top = frame.max()
        frame = frame / top if top > 0 else frame
    q = np.rint(np.clip(frame, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    head = f"P5\n{v.shape.w} {v.shape.h}\n{maxval}\n".encode()
    _write_atomic(path, head + q.astype(dtype).tobytes())
