"""Seeding, hashing and a small versioned binary container used for every artifact."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DYNAMITE"


class ArtifactError(Exception):
    """Raised when an artifact file is missing, corrupt, or of the wrong version."""


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary parts (order-sensitive)."""
    text = "|".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt_eps(eps: float) -> str:
    return format(float(eps), "g")


# Container layout:
#   MAGIC | u16 name length | name | u32 version | u64 header length | JSON header
#   | raw little-endian array blocks (row-major) | 32-byte sha256 of everything before it
def write_container(path, kind: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    blocks = []
    layout = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        layout.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blocks.append(arr.tobytes(order="C"))
    header = canonical_json({"meta": meta, "arrays": layout}).encode()
    name = kind.encode()
    body = b"".join(
        [MAGIC, struct.pack("<H", len(name)), name, struct.pack("<I", version),
         struct.pack("<Q", len(header)), header, *blocks]
    )
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_container(path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 32 or not raw.startswith(MAGIC):
        raise ArtifactError(f"{path}: not a {kind} container (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ArtifactError(f"{path}: checksum mismatch (file truncated or corrupt)")
    pos = len(MAGIC)
    (nlen,) = struct.unpack_from("<H", body, pos)
    pos += 2
    found_kind = body[pos:pos + nlen].decode()
    pos += nlen
    if found_kind != kind:
        raise ArtifactError(f"{path}: expected a {kind!r} container, found {found_kind!r}")
    (found_version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if found_version != version:
        raise ArtifactError(
            f"{path}: format version mismatch: file has v{found_version}, reader expects v{version}"
        )
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(body):
            raise ArtifactError(f"{path}: array block {spec['name']!r} truncated")
        arrays[spec["name"]] = np.frombuffer(body, dtype=dtype, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += nbytes
    if pos != len(body):
        raise ArtifactError(f"{path}: trailing bytes after array blocks")
    return header["meta"], arrays
