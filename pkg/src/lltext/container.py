"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw array data. Arrays are stored in header order as row-major
little-endian float32, so the format is readable from any language. Writing
is fully deterministic: the same arrays and metadata produce byte-identical
files.
"""

import json
import struct

import numpy as np

MAGIC = b"LLTXCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be read."""


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint has an unsupported format version."""


def save_arrays(path, arrays, meta=None):
    """Write named float32 arrays plus a JSON metadata dict to ``path``."""
    names = sorted(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_arrays(path):
    """Read a container written by :func:`save_arrays`.

    Returns ``(arrays, meta)``. Rejects unknown magic or format versions.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint format version {version!r}, "
                f"expected {FORMAT_VERSION}: {path}"
            )
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"truncated checkpoint: {path}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return arrays, header["meta"]
