import json
import struct

import numpy as np
import pytest

from attnguide.container import (HeaderError, MissingTensorError, ShapeMismatchError,
                                 TruncatedPayloadError, from_bytes, load_weights, save_weights,
                                 to_bytes)
from attnguide.synthetic import planted
from attnguide.vit import weight_shapes


def _split(buf):
    (n,) = struct.unpack("<Q", buf[:8])
    return json.loads(buf[8:8 + n]), buf[8 + n:]


def _join(header, payload):
    text = json.dumps(header).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + payload


def _same(a, b):
    return a.config == b.config and set(a.params) == set(b.params) and all(
        a[k].tobytes() == b[k].tobytes() for k in a.params)


def test_roundtrip_bitwise(tiny_weights, tmp_path):
    p = tmp_path / "w.bin"
    save_weights(tiny_weights, p)
    assert _same(load_weights(p), tiny_weights)


def test_roundtrip_planted(tmp_path):
    w = planted(2)
    p = tmp_path / "w.bin"
    save_weights(w, p)
    assert _same(load_weights(p), w)
    save_weights(load_weights(p), tmp_path / "w2.bin")
    assert p.read_bytes() == (tmp_path / "w2.bin").read_bytes()


def test_non_float32_tensor_kept_exact(tiny_weights):
    w = tiny_weights.with_params({"head.bias": np.full(10, 0.1)})   # 0.1 is not an f32 value
    buf = to_bytes(w)
    header, _ = _split(buf)
    assert header["head.bias"]["dtype"] == "F64"
    assert header["head.weight"]["dtype"] == "F32"
    assert _same(from_bytes(buf), w)


def test_layout_bytes(tiny_weights):
    buf = to_bytes(tiny_weights)
    (n,) = struct.unpack("<Q", buf[:8])
    assert n % 8 == 0
    header, payload = _split(buf)
    assert header["__metadata__"]["config"] == tiny_weights.config.to_dict()
    ent = header["cls_token"]
    raw = payload[ent["offset"]:ent["offset"] + 4 * tiny_weights.config.embed_dim]
    assert np.array_equal(np.frombuffer(raw, "<f4"), tiny_weights["cls_token"].astype(np.float32))
    # tensors are packed back to back in naming-scheme order
    names = list(weight_shapes(tiny_weights.config))
    offs = [header[k]["offset"] for k in names]
    assert offs == sorted(offs) and offs[0] == 0


def test_wrong_offset(tiny_weights):
    header, payload = _split(to_bytes(tiny_weights))
    header["cls_token"]["offset"] += 4
    with pytest.raises(HeaderError):
        from_bytes(_join(header, payload))


def test_truncated_payload(tiny_weights):
    buf = to_bytes(tiny_weights)
    with pytest.raises(TruncatedPayloadError):
        from_bytes(buf[:-4])
    with pytest.raises(TruncatedPayloadError):
        from_bytes(buf[:5])


def test_missing_tensor(tiny_weights):
    w = tiny_weights
    header, payload = _split(to_bytes(w))
    # drop the last tensor in the payload so offsets stay contiguous
    last = max((k for k in header if k != "__metadata__"), key=lambda k: header[k]["offset"])
    cut = header.pop(last)["offset"]
    with pytest.raises(MissingTensorError):
        from_bytes(_join(header, payload[:cut]))


def test_shape_mismatch(tiny_weights):
    header, payload = _split(to_bytes(tiny_weights))
    header["pos_embed"]["shape"] = [tiny_weights.config.embed_dim, 17]
    with pytest.raises(ShapeMismatchError):
        from_bytes(_join(header, payload))


def test_extra_tensor_warns_and_is_ignored(tiny_weights):
    header, payload = _split(to_bytes(tiny_weights))
    header["future.thing"] = {"dtype": "F32", "shape": [2], "offset": len(payload)}
    payload += np.array([1, 2], "<f4").tobytes()
    with pytest.warns(UserWarning, match="future.thing"):
        w = from_bytes(_join(header, payload))
    assert "future.thing" not in w.params
    assert _same(w, tiny_weights)


@pytest.mark.parametrize("mutate", [
    lambda h: h.pop("__metadata__"),
    lambda h: h["__metadata__"].update(version=99),
    lambda h: h["cls_token"].update(dtype="I8"),
])
def test_header_errors(tiny_weights, mutate):
    header, payload = _split(to_bytes(tiny_weights))
    mutate(header)
    with pytest.raises(HeaderError):
        from_bytes(_join(header, payload))


def test_garbage_header():
    with pytest.raises(HeaderError):
        from_bytes(struct.pack("<Q", 8) + b"not json")


def test_trailing_bytes(tiny_weights):
    with pytest.raises(HeaderError):
        from_bytes(to_bytes(tiny_weights) + b"\0\0\0\0")
