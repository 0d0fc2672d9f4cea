"""Single-file weight container.

Layout (all integers little-endian)::

    u64        header length n
    n bytes    UTF-8 JSON header, space-padded to a multiple of 8
    ...        payload: raw tensor bytes, tensors back to back

The header maps each tensor name to ``{"dtype", "shape", "offset"}`` where
``offset`` counts bytes from the start of the payload, plus a
``__metadata__`` entry holding the model config. Tensors are ``F32``;
a tensor that is not exactly float32-representable is written as ``F64``
so that load(save(w)) is always bit-exact. See docs/FORMATS.md.
"""

from __future__ import annotations

import json
import struct
import warnings
from typing import Dict

import numpy as np

from .vit import ModelConfig, ModelWeights, weight_shapes

FORMAT = "attnguide-weights"
VERSION = 1
DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}


class WeightFormatError(ValueError):
    """Base class for container problems."""


class HeaderError(WeightFormatError):
    """Header is unreadable or inconsistent (bad JSON, offsets, dtypes)."""


class MissingTensorError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


def _pick_dtype(arr: np.ndarray) -> str:
    as32 = arr.astype(np.float32)
    return "F32" if np.array_equal(as32.astype(np.float64), arr) else "F64"


def to_bytes(w: ModelWeights) -> bytes:
    header: Dict[str, object] = {
        "__metadata__": {"format": FORMAT, "version": VERSION, "config": w.config.to_dict()}
    }
    chunks = []
    offset = 0
    for name in weight_shapes(w.config):
        arr = np.asarray(w.params[name], dtype=np.float64)
        dt = _pick_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dt]).tobytes()
        header[name] = {"dtype": dt, "shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def save_weights(w: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(w))


def _parse_header(buf: bytes):
    if len(buf) < 8:
        raise TruncatedPayloadError("file shorter than the 8-byte header-length prefix")
    (n,) = struct.unpack("<Q", buf[:8])
    if 8 + n > len(buf):
        raise TruncatedPayloadError(f"header declares {n} bytes but only {len(buf) - 8} follow")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    meta = header.pop("__metadata__", None)
    if not isinstance(meta, dict) or meta.get("format") != FORMAT:
        raise HeaderError("missing or foreign __metadata__ block")
    if meta.get("version") != VERSION:
        raise HeaderError(f"unsupported container version {meta.get('version')!r}")
    return meta, header, buf[8 + n:]


def from_bytes(buf: bytes) -> ModelWeights:
    meta, header, payload = _parse_header(buf)
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"bad config in header: {exc}") from None

    spans = []
    for name, ent in header.items():
        try:
            dt = DTYPES[ent["dtype"]]
            shape = tuple(int(s) for s in ent["shape"])
            off = int(ent["offset"])
        except (KeyError, TypeError, ValueError):
            raise HeaderError(f"malformed entry for tensor {name!r}") from None
        if off < 0 or any(s < 0 for s in shape):
            raise HeaderError(f"negative offset or dimension for tensor {name!r}")
        spans.append((off, int(np.prod(shape, dtype=np.int64)) * dt.itemsize, name, dt, shape))
    spans.sort()
    end = 0
    for off, nbytes, name, _, _ in spans:
        if off != end:
            raise HeaderError(f"tensor {name!r} declares offset {off}, expected {end} "
                              "(gap or overlap in payload)")
        end = off + nbytes
    if len(payload) < end:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header needs {end}")
    if len(payload) > end:
        raise HeaderError(f"{len(payload) - end} trailing bytes after the last tensor")

    expected = weight_shapes(cfg)
    params = {}
    for off, nbytes, name, dt, shape in spans:
        if name not in expected:
            continue
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        params[name] = arr.reshape(shape).astype(np.float64)
    extras = sorted(set(header) - set(expected))
    if extras:
        warnings.warn(f"ignoring unknown tensors: {', '.join(extras)}", stacklevel=3)
    for name, shape in expected.items():
        if name not in params:
            raise MissingTensorError(f"tensor {name!r} missing from container")
        if params[name].shape != shape:
            raise ShapeMismatchError(f"tensor {name!r} stored as {params[name].shape}, "
                                     f"config needs {shape}")
    return ModelWeights(cfg, params)


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
