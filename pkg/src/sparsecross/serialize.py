"""Model persistence: textual config, tensor manifest, flat binary blob.

A saved model is a directory with three files:

* ``config.json``   -- the EncoderConfig fields (window ``"inf"`` encodes
  full attention, since JSON has no infinity literal).
* ``manifest.json`` -- ``{"byte_order": "little", "tensors": [...]}`` where
  each tensor entry lists name, shape, element type (``"f4"``/``"f8"``),
  and byte offset into the blob.
* ``weights.bin``   -- the tensors' little-endian C-order bytes, packed
  back to back in manifest order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoder import CrossEncoder, EncoderConfig

_ELEMENT_TYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"


class SerializationError(ValueError):
    pass


def config_to_dict(config: EncoderConfig) -> dict:
    d = asdict(config)
    if math.isinf(d["window"]):
        d["window"] = "inf"
    return d


def config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    if d.get("window") == "inf":
        d["window"] = math.inf
    return EncoderConfig(**d)


def save_model(model: CrossEncoder, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, array in model.weights.items():
        element = "f4" if array.dtype == np.float32 else "f8"
        raw = np.ascontiguousarray(array, dtype=_ELEMENT_TYPES[element]).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": element,
                "offset_bytes": offset,
            }
        )
        offset += len(raw)
        chunks.append(raw)
    manifest = {"byte_order": "little", "total_bytes": offset, "tensors": tensors}
    (directory / CONFIG_FILE).write_text(
        json.dumps(config_to_dict(model.config), indent=2) + "\n", encoding="utf-8"
    )
    (directory / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    (directory / WEIGHTS_FILE).write_bytes(b"".join(chunks))


def load_model(directory) -> CrossEncoder:
    directory = Path(directory)
    config = config_from_dict(
        json.loads((directory / CONFIG_FILE).read_text(encoding="utf-8"))
    )
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    if manifest.get("byte_order") != "little":
        raise SerializationError("unsupported byte order in manifest")
    blob = (directory / WEIGHTS_FILE).read_bytes()
    if manifest.get("total_bytes") not in (None, len(blob)):
        raise SerializationError(
            f"blob has {len(blob)} bytes, manifest expects {manifest['total_bytes']}"
        )
    weights = {}
    for entry in manifest["tensors"]:
        dtype = _ELEMENT_TYPES.get(entry["dtype"])
        if dtype is None:
            raise SerializationError(f"unknown element type {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset_bytes"]
        stop = start + count * dtype.itemsize
        if stop > len(blob):
            raise SerializationError(f"tensor {entry['name']!r} overruns the blob")
        array = np.frombuffer(blob[start:stop], dtype=dtype).reshape(shape)
        weights[entry["name"]] = array.astype(config.dtype, copy=True)
    return CrossEncoder(config, weights)
