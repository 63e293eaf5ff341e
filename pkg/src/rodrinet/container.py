"""RDNT container: the on-disk format for datasets and checkpoints.

Layout (all integers little-endian):

    bytes 0-3    magic "RDNT"
    bytes 4-5    u16 version (currently 1)
    bytes 6-7    u16 flags (reserved, 0)
    bytes 8-11   u32 metadata byte length
    ...          UTF-8 JSON metadata (canonical: sorted keys, no spaces)
    ...          raw IEEE-754 array data in metadata["arrays"] order
    last 8       u64 FNV-1a checksum of every preceding byte

The metadata declares each array's name, shape, and dtype ("f4"/"f8"), plus
a "kind" tag ("dataset" or "checkpoint") and task-specific fields. Writing
is canonical, so identical content produces identical bytes.
"""

import json

import numpy as np

from .errors import FormatError
from .rng import fnv1a64

MAGIC = b"RDNT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _dtype_tag(a: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if a.dtype == dt:
            return tag
    raise FormatError(f"unsupported array dtype {a.dtype}; use float32 or float64", 0)


def container_bytes(kind: str, metadata: dict, arrays) -> bytes:
    """Serialize; ``arrays`` is an ordered list of (name, ndarray)."""
    meta = dict(metadata)
    meta["kind"] = kind
    meta["arrays"] = [
        {"name": name, "shape": list(a.shape), "dtype": _dtype_tag(np.ascontiguousarray(a))}
        for name, a in arrays
    ]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC,
        VERSION.to_bytes(2, "little"),
        (0).to_bytes(2, "little"),
        len(meta_bytes).to_bytes(4, "little"),
        meta_bytes,
    ]
    for _, a in arrays:
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + fnv1a64(body).to_bytes(8, "little")


def write_container(path, kind: str, metadata: dict, arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(container_bytes(kind, metadata, arrays))


def parse_container(blob: bytes, expect_kind: str = None):
    """Validate and decode; returns (metadata, {name: array})."""
    if len(blob) < 12:
        raise FormatError("file shorter than the fixed header", len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    version = int.from_bytes(blob[4:6], "little")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    if len(blob) < 20:
        raise FormatError("file truncated before checksum", len(blob))
    stored = int.from_bytes(blob[-8:], "little")
    if fnv1a64(blob[:-8]) != stored:
        raise FormatError("checksum mismatch", len(blob) - 8)
    meta_len = int.from_bytes(blob[8:12], "little")
    if 12 + meta_len > len(blob) - 8:
        raise FormatError("metadata extends past end of file", 12)
    try:
        meta = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid UTF-8 JSON", 12) from None
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise FormatError(
            f"container kind is {meta.get('kind')!r}, expected {expect_kind!r}", 12
        )
    offset = 12 + meta_len
    arrays = {}
    for rec in meta.get("arrays", []):
        dt = _DTYPES[rec["dtype"]]
        count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(blob) - 8:
            raise FormatError(f"array {rec['name']!r} extends past end of file", offset)
        arrays[rec["name"]] = (
            np.frombuffer(blob, dtype=dt, count=count, offset=offset)
            .reshape(rec["shape"])
            .copy()
        )
        offset += nbytes
    if offset != len(blob) - 8:
        raise FormatError("trailing bytes after declared arrays", offset)
    return meta, arrays


def read_container(path, expect_kind: str = None):
    with open(path, "rb") as fh:
        return parse_container(fh.read(), expect_kind)
