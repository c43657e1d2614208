"""Named-tensor checkpoint container.

Layout (little-endian): magic ``UMTK``, u16 version, u32 tensor count, then per
tensor u16 name length, name bytes, u8 dtype, u8 rank, u32 dims[rank], u64 byte
length, raw payload; a trailing u32 CRC32 covers every preceding byte.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError

MAGIC = b"UMTK"
VERSION = 1

DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.int32: 4,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<i4"}


def encode_tensors(tensors: dict, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<HI", version, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = DTYPE_CODES[t.dtype]
        payload = t.numpy().astype(_NP[code], copy=False).tobytes()
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{t.ndim}I", code, t.ndim, *t.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes, source="<bytes>") -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < 14:
        raise CheckpointError(f"{source}: truncated header")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version} is not supported (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise CheckpointError(f"{source}: checksum mismatch")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode()
            off += n
            code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            (nbytes,) = struct.unpack_from("<Q", blob, off)
            off += 8
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{source}: unknown dtype code {code} for {name}")
            arr = np.frombuffer(blob, dtype=_NP[code], count=int(np.prod(dims, dtype=np.int64)), offset=off)
            if arr.nbytes != nbytes:
                raise CheckpointError(f"{source}: {name} declares {nbytes} bytes for shape {dims}")
            off += nbytes
            out[name] = torch.from_numpy(arr.copy()).reshape(dims)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{source}: truncated ({e})") from e
    if off != len(blob) - 4:
        raise CheckpointError(f"{source}: trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes(), source=str(path))


def match_tensors(expected: dict, found: dict, strict: bool = True):
    """Compare name -> shape maps; raise listing every mismatch.

    Returns the names present in ``expected`` but absent from ``found``
    (only when ``strict`` is False).
    """
    missing = sorted(set(expected) - set(found))
    bad = [f"{k}: checkpoint {tuple(found[k].shape)} vs model {tuple(expected[k].shape)}"
           for k in sorted(set(expected) & set(found)) if found[k].shape != expected[k].shape]
    problems = []
    if strict and missing:
        problems.append("missing: " + ", ".join(missing))
    if bad:
        problems.append("shape mismatch: " + "; ".join(bad))
    if problems:
        raise CheckpointError(" | ".join(problems))
    return missing


def bytes_tensor(data: bytes) -> torch.Tensor:
    return torch.frombuffer(bytearray(data), dtype=torch.uint8)


def tensor_bytes(t: torch.Tensor) -> bytes:
    return bytes(t.numpy().tobytes())
