"""Model checkpoint container.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"QCK1"
    4       2     version (u16, = 1)
    6       2     dtype code (u16, 0 = float32)
    8       4     header length n (u32)
    12      n     UTF-8 JSON header (sorted keys)
    12+n    ...   float32 parameter payload, tensors in header order

The JSON header holds ``config`` (ModelConfig fields), ``fingerprint``,
``seed``, ``step``, ``init`` and ``tensors``: a list of
``{"name", "shape", "offset"}`` entries with offsets counted in values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from typing import Optional

import numpy as np
import torch

from .io import BadMagicError, FormatError, TruncatedError, UnsupportedDtypeError, _write_atomic
from .model import ModelConfig, ModelState, ResUNet

MAGIC = b"QCK1"
VERSION = 1
_HEAD = struct.Struct("<4sHHI")


class FingerprintMismatchError(FormatError):
    pass


def encode_checkpoint(m: ModelState, step: int = 0, extra: Optional[dict] = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, p in m.net.named_parameters():
        arr = p.detach().cpu().to(torch.float32).numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "config": asdict(m.config),
        "fingerprint": m.fingerprint(),
        "seed": m.seed,
        "step": int(step),
        "init": "fan-in uniform kernels, zero biases, unit norm scale",
        "tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    return _HEAD.pack(MAGIC, VERSION, 0, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(m: ModelState, path, step: int = 0, extra: Optional[dict] = None) -> None:
    _write_atomic(path, encode_checkpoint(m, step, extra))


def decode_checkpoint(data: bytes, expect: Optional[ModelConfig] = None) -> tuple[ModelState, dict]:
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    _, version, dtype, n = _HEAD.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if dtype != 0:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    if len(data) < _HEAD.size + n:
        raise TruncatedError("truncated checkpoint header")
    header = json.loads(data[_HEAD.size:_HEAD.size + n].decode())
    cfg = ModelConfig(**header["config"])
    if expect is not None and expect.fingerprint() != cfg.fingerprint():
        raise FingerprintMismatchError("checkpoint was written for a different architecture")
    payload = np.frombuffer(data, "<f4", offset=_HEAD.size + n)
    state = ModelState(cfg, ResUNet(cfg), header.get("seed"))
    if state.fingerprint() != header["fingerprint"]:
        raise FingerprintMismatchError("architecture fingerprint mismatch")
    params = state.named_parameters()
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(params):
        raise FingerprintMismatchError("parameter names do not match the architecture")
    with torch.no_grad():
        for name, p in params.items():
            e = entries[name]
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            if e["offset"] + count > payload.size:
                raise TruncatedError("truncated checkpoint payload")
            vals = payload[e["offset"]:e["offset"] + count].reshape(e["shape"])
            p.copy_(torch.from_numpy(vals.copy()))
    return state, header


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> tuple[ModelState, dict]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), expect)
