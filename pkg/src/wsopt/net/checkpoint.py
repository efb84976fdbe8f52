"""Named-tensor checkpoint container.

Binary layout (little-endian throughout):

    bytes 0..3   magic b"WTC1"
    bytes 4..7   u32 length of the JSON header
    header       UTF-8 JSON with sorted keys:
                   {"config": network config echo,
                    "meta": free-form string/number map,
                    "tensors": [{"name", "shape", "offset"}, ...]}
    payload      concatenated tensor data, float32, C order, in the order
                 listed under "tensors"; offsets are payload-relative counts
                 of bytes

Tensors are always stored as float32 regardless of the training precision,
so a checkpoint's bytes are a pure function of (params, config, meta).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import NetworkConfig

MAGIC = b"WTC1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, cfg: NetworkConfig, meta: dict | None = None) -> None:
    tensors = []
    payload = bytearray()
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(data.tobytes())
    header = {
        "config": cfg.to_dict(),
        "meta": meta or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (params dict of float32 arrays, NetworkConfig, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    cfg = NetworkConfig.from_dict(header["config"])
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[spec["name"]] = arr.reshape(shape).astype(np.float32)
    return params, cfg, header["meta"]
