"""Single-file parameter checkpoints.

Layout: an 8-byte little-endian header length, a JSON manifest (tensor names,
shapes, dtypes, byte offsets plus free-form metadata), then the raw
little-endian array bytes in manifest order.  Tensors are sorted by name so
identical contents produce identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ValidationError

_FORMAT = "coroflow-checkpoint"
_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def save_checkpoint(path, arrays, meta=None):
    """Write a name -> ndarray mapping (float32/float64) plus JSON metadata."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = {"float64": "<f8", "float32": "<f4"}.get(arr.dtype.name)
        if code is None:
            raise ValidationError(f"checkpoint tensor {name!r} has dtype {arr.dtype}, "
                                  "only float32/float64 are stored")
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": _FORMAT, "version": _VERSION,
                "meta": meta or {}, "tensors": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read back (arrays, meta); inverse of save_checkpoint, bit exact."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(hlen).decode())
        if manifest.get("format") != _FORMAT:
            raise ValidationError(f"{path}: not a {_FORMAT} file")
        payload = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ValidationError(f"{path}: unsupported dtype {entry['dtype']!r}")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {})
