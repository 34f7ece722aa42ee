"""Binary model files.

Layout (little-endian throughout)::

    b"LRNT"
    u32   format version (1)
    u32   length of the network spec text, then the network spec as canonical JSON (UTF-8)
    u32   tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  dtype code (1 = float32, 2 = float64)
        u8  rank, then rank x u32 dimensions
        raw values in row-major order
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from learnet.networks import NetworkSpec, ParamSet

MAGIC = b"LRNT"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MAX_RANK = 8


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class BadMagic(ModelFormatError):
    pass


class UnsupportedVersion(ModelFormatError):
    pass


class Truncated(ModelFormatError):
    pass


class DuplicateName(ModelFormatError):
    pass


class BadDimension(ModelFormatError):
    pass


class BadDtype(ModelFormatError):
    pass


def spec_text(spec: NetworkSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))


def dumps(spec: NetworkSpec, params: Mapping) -> bytes:
    spec_bytes = spec_text(spec).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(spec_bytes)), spec_bytes, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise BadDtype(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise BadDimension(f"tensor {name!r}: rank {arr.ndim} exceeds {MAX_RANK}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def save(spec: NetworkSpec, params: Mapping, path):
    """Write atomically: the target either keeps its old content or gets the new file."""
    data = dumps(spec, params)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".lrnt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes):
    """Parse model bytes into ``(spec, ParamSet)``."""
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}; not a model file")
    r.pos = 4
    (version,) = r.unpack("<I", "format version")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported format version {version} (this build reads {VERSION})")
    (spec_len,) = r.unpack("<I", "spec length")
    try:
        spec_dict = json.loads(r.take(spec_len, "spec text").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable spec text: {exc}") from None
    spec = NetworkSpec.from_dict(spec_dict)
    (count,) = r.unpack("<I", "tensor count")
    params = ParamSet()
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor #{i}")
        try:
            name = r.take(name_len, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError(f"tensor #{i}: name is not UTF-8") from None
        if name in params:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        code, rank = r.unpack("<BB", f"header of tensor {name!r}")
        if code not in CODE_DTYPES:
            raise BadDtype(f"tensor {name!r}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise BadDimension(f"tensor {name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}I", f"dimensions of tensor {name!r}")
        if any(d == 0 for d in dims):
            raise BadDimension(f"tensor {name!r}: zero-length dimension in {dims}")
        dt = CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(n * dt.itemsize, f"values of tensor {name!r}")
        params[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return spec, params


def load(path):
    return loads(Path(path).read_bytes())
