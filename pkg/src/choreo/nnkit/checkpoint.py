"""Model checkpoint file format.

Layout: magic ``NNCK``, u32 version, u32 header length, JSON header,
then concatenated float32 little-endian parameter blobs in manifest
order. The header carries the architecture descriptor, the parameter
manifest (name and shape per blob), optional normalization stats, and
the training seed, so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NNCK"
VERSION = 1


def save_checkpoint(path, arch: dict, params: dict[str, np.ndarray],
                    norm_stats: dict | None = None,
                    seed: int | None = None,
                    extra: dict | None = None) -> None:
    manifest = [{"name": name, "shape": list(np.asarray(p).shape)}
                for name, p in params.items()]
    header = {
        "arch": arch,
        "params": manifest,
        "norm_stats": norm_stats,
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", MAGIC, VERSION, len(blob)))
        f.write(blob)
        for p in params.values():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Returns {"arch", "params", "norm_stats", "seed", "extra"}; params is
    an ordered name -> float32 array dict. Rejects bad magic, unsupported
    versions, and payload/manifest size mismatches."""
    with open(path, "rb") as f:
        head = f.read(struct.calcsize("<4sII"))
        if len(head) < struct.calcsize("<4sII"):
            raise ValueError(f"truncated checkpoint {path}")
        magic, version, hlen = struct.unpack("<4sII", head)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()

    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = 4 * int(np.prod(shape)) if shape else 4
        chunk = payload[offset:offset + size]
        if len(chunk) != size:
            raise ValueError(
                f"checkpoint parameter {entry['name']!r} truncated: expected "
                f"{size} bytes, got {len(chunk)}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += size
    if offset != len(payload):
        raise ValueError(f"checkpoint has {len(payload) - offset} trailing bytes")
    return {
        "arch": header["arch"],
        "params": params,
        "norm_stats": header.get("norm_stats"),
        "seed": header.get("seed"),
        "extra": header.get("extra"),
    }
