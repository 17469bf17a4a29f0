"""Self-describing binary container: JSON header + float64 blocks.

Layout: 4-byte magic, uint32 little-endian header length, UTF-8 JSON header,
then the raw little-endian float64 array data in the order declared by the
header's "arrays" manifest. Both the dataset and checkpoint files use this.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"TOPC"


class StorageError(Exception):
    pass


class SchemaError(StorageError):
    pass


def write_container(path, header, arrays):
    """Atomically write header plus named float64 arrays.

    arrays is an ordered list of (name, ndarray); the manifest records each
    shape so reads can verify sizes before touching the data.
    """
    manifest = []
    blocks = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        manifest.append({"name": name, "shape": list(arr.shape)})
        blocks.append(arr.tobytes())
    full = dict(header)
    full["arrays"] = manifest
    payload = json.dumps(full).encode("utf-8")

    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            for block in blocks:
                fh.write(block)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, kind, version):
    """Read and validate a container; returns (header, {name: array}).

    Raises SchemaError on magic/kind/version mismatch and StorageError on a
    truncated or malformed file. Never returns partial data.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise SchemaError(f"{path}: not a container file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise StorageError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"{path}: malformed header ({exc})") from None

    if header.get("kind") != kind:
        raise SchemaError(
            f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    if header.get("format_version") != version:
        raise SchemaError(
            f"{path}: expected format_version {version}, "
            f"found {header.get('format_version')!r}")

    arrays = {}
    off = 8 + hlen
    for item in header.get("arrays", []):
        shape = tuple(int(s) for s in item["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if off + nbytes > len(blob):
            raise StorageError(f"{path}: truncated data block {item['name']!r}")
        arrays[item["name"]] = np.frombuffer(
            blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise StorageError(f"{path}: {len(blob) - off} trailing bytes")
    return header, arrays
