"""Binary model checkpoints.

Layout (all integers little-endian):
  magic "HIEN" | u32 format version | u32 json length | config JSON (UTF-8)
  | named-array table (parameters) | named-array table (EMA parameters)
  | 8-byte blake2b checksum of everything before it.

A named-array table is: u32 count, then per array u32 name length, UTF-8
name, u8 element type code (0 = float64), u32 rank, u32 dims, raw
little-endian float64 payload. Loading validates magic, version, and
checksum and reproduces arrays bit-identically.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .potential import ModelConfig

MAGIC = b"HIEN"
FORMAT_VERSION = 1
_F64 = 0


class CheckpointError(ValueError):
    pass


def _pack_table(arrays):
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", _F64))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]


def _unpack_table(reader):
    arrays = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        code = reader.u8()
        if code != _F64:
            raise CheckpointError(f"unsupported element type code {code}")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = reader.take(8 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return arrays


def save_checkpoint(path, config: ModelConfig, params, ema_params, covered_elements=None):
    meta = {
        "model": config.to_dict(),
        "covered_elements": sorted(int(z) for z in (covered_elements or [])),
    }
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION)
            + struct.pack("<I", len(encoded)) + encoded
            + _pack_table(params) + _pack_table(ema_params))
    digest = hashlib.blake2b(body, digest_size=8).digest()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body + digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns (config, params, ema_params, covered_elements)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError("checksum mismatch")
    reader = _Reader(body)
    reader.take(4)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    params = _unpack_table(reader)
    ema_params = _unpack_table(reader)
    config = ModelConfig.from_dict(meta["model"])
    covered = set(meta.get("covered_elements", []))
    return config, params, ema_params, covered or None
