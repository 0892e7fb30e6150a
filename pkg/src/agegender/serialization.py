"""AAGW weight-file format.

Layout (all integers little-endian)::

    magic      4 bytes  b"AAGW"
    version    u32
    header     u32 byte length + UTF-8 JSON (model spec and metadata)
    count      u32 number of tensor records
    records    per tensor:
                 u32 name length, UTF-8 dotted name,
                 u8  dtype code (1 float32, 2 float64, 3 int64),
                 u32 rank, rank x u32 dims,
                 raw little-endian payload

Files are self-describing: a model can be rebuilt from the header alone.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AAGW"
VERSION = 1

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


class WeightFormatError(ValueError):
    """The bytes are not a valid AAGW file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hdr = canonical_json(header).encode("utf-8")
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        nm = name.encode("utf-8")
        parts += [struct.pack("<I", len(nm)), nm, struct.pack("<BI", code, arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise WeightFormatError(f"unsupported AAGW version {version} (this build reads {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"corrupt header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"corrupt tensor name: {exc}") from exc
        code, rank = r.unpack("<BI")
        if code not in _CODES:
            raise WeightFormatError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _CODES[code]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} trailing bytes after last tensor record")
    return header, tensors


def write_weight_file(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, tensors))


def read_weight_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save_model(path, model, extra: Mapping | None = None) -> None:
    """Weights-only file: spec in the header, parameters then BN buffers as tensors."""
    header = {"kind": "weights", "model": model.spec.to_dict()}
    if extra:
        header.update(extra)
    write_weight_file(path, header, model.state_dict())


def model_from_state(header: Mapping, tensors: Mapping[str, np.ndarray]):
    from .models import MultiTaskModel, MultiTaskModelSpec

    if "model" not in header:
        raise WeightFormatError("header carries no model spec")
    model = MultiTaskModel(MultiTaskModelSpec.from_dict(header["model"]))
    names = set(model.state_dict())
    try:
        model.load_state_dict({k: v for k, v in tensors.items() if k in names})
    except (KeyError, ValueError) as exc:
        raise WeightFormatError(f"tensors do not fit the declared model: {exc}") from exc
    return model


def load_model(path):
    """Rebuild a model (architecture and weights) from an AAGW file."""
    header, tensors = read_weight_file(path)
    return model_from_state(header, tensors)
