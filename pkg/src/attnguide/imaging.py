"""Image codecs, preprocessing and signed heatmap rendering.

Codecs: binary PPM (P6, maxval 255) is handled directly; 8-bit RGB PNG
goes through Pillow. Raw images are ``uint8`` arrays of shape H x W x 3.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .vit import ImageTensor, ModelConfig

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

IMAGENET_HALF = (0.5, 0.5, 0.5)


class ImageFormatError(ValueError):
    """File is not a supported image format."""


class CorruptImageError(ValueError):
    """File has a supported signature but its stream is damaged."""


# ---------------------------------------------------------------- codecs

def _ppm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens after the magic."""
    pos, out = 2, []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptImageError("truncated PPM header")
        out.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise CorruptImageError("malformed PPM header")
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6)")
    toks, pos = _ppm_tokens(buf, 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise CorruptImageError("non-numeric PPM header field") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise CorruptImageError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    need = w * h * 3
    body = buf[pos:pos + need]
    if len(body) != need:
        raise CorruptImageError(f"PPM payload has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = _as_rgb8(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_png(buf: bytes) -> np.ndarray:
    from PIL import Image

    if buf[:8] != PNG_MAGIC:
        raise ImageFormatError("not a PNG")
    try:
        with Image.open(io.BytesIO(buf)) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageFormatError(f"unsupported PNG mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageFormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for damaged streams
        raise CorruptImageError(f"corrupt PNG stream: {exc}") from None
    return arr.copy()


def encode_png(img: np.ndarray) -> bytes:
    from PIL import Image

    bio = io.BytesIO()
    Image.fromarray(_as_rgb8(img), mode="RGB").save(bio, format="PNG", optimize=False)
    return bio.getvalue()


def _as_rgb8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 H x W x 3, got {img.dtype} {img.shape}")
    return np.ascontiguousarray(img)


def decode_bytes(buf: bytes) -> np.ndarray:
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    if buf[:8] == PNG_MAGIC:
        return decode_png(buf)
    raise ImageFormatError("unknown image format (expected PPM P6 or PNG)")


def decode_image(path) -> np.ndarray:
    """Decode a PPM (P6) or 8-bit RGB PNG file to a uint8 H x W x 3 array."""
    with open(path, "rb") as fh:
        return decode_bytes(fh.read())


def encode_image(img: np.ndarray, path) -> None:
    """Write ``img`` as PNG or PPM depending on the file extension."""
    ext = os.path.splitext(str(path))[1].lower()
    data = encode_ppm(img) if ext in (".ppm", ".pnm") else encode_png(img)
    with open(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------- resampling

def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping, float64 out."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if height < 1 or width < 1:
        raise ValueError("output size must be positive")
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        out = img.copy()
    else:
        y0, y1, fy = _axis_weights(h, height)
        x0, x1, fx = _axis_weights(w, width)
        rows = img[y0] * (1.0 - fy)[:, None, None] + img[y1] * fy[:, None, None]
        out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return out[..., 0] if squeeze else out


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    ys = (np.arange(height) * h) // height
    xs = (np.arange(width) * w) // width
    return img[ys][:, xs]


# ---------------------------------------------------------------- preprocessing

def preprocess(raw: np.ndarray, cfg: ModelConfig, mean: Sequence[float] = IMAGENET_HALF,
               std: Sequence[float] = IMAGENET_HALF, source=None) -> ImageTensor:
    """Resize to the model resolution, scale to [0, 1], then ``(x - mean) / std``."""
    raw = np.asarray(raw)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if np.any(std <= 0):
        raise ValueError("std must be positive per channel")
    x = resize_bilinear(raw, cfg.image_size, cfg.image_size) / 255.0
    x = (x - mean) / std
    prov = {
        "source": None if source is None else str(source),
        "original_dims": [int(raw.shape[0]), int(raw.shape[1])],
        "resize": "bilinear-half-pixel" if raw.shape[:2] != (cfg.image_size,) * 2 else "none",
        "mean": mean.tolist(),
        "std": std.tolist(),
    }
    return ImageTensor(x, prov)


def pixel_bounds(image: ImageTensor) -> Tuple[np.ndarray, np.ndarray]:
    """Model-space values of raw pixels 0 and 255 per channel."""
    mean = np.asarray(image.provenance.get("mean", IMAGENET_HALF), dtype=np.float64)
    std = np.asarray(image.provenance.get("std", IMAGENET_HALF), dtype=np.float64)
    return (0.0 - mean) / std, (1.0 - mean) / std


def to_raw(image: ImageTensor) -> np.ndarray:
    """Undo normalisation and quantise to uint8 (round half up, clipped)."""
    mean = np.asarray(image.provenance.get("mean", IMAGENET_HALF), dtype=np.float64)
    std = np.asarray(image.provenance.get("std", IMAGENET_HALF), dtype=np.float64)
    x = (image.data * std + mean) * 255.0
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class RenderSpec:
    """``alpha`` is the weight of the base image laid over the heatmap."""

    alpha: float = 0.5
    upsample: str = "nearest"
    colorbar: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError("upsample must be 'nearest' or 'bilinear'")


def diverging_rgb(v) -> np.ndarray:
    """Blue (-1) -> white (0) -> red (+1), float RGB in [0, 255]."""
    v = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
    pos = np.maximum(v, 0.0)
    negm = np.maximum(-v, 0.0)
    r = 255.0 * (1.0 - negm)
    g = 255.0 * (1.0 - pos - negm)
    b = 255.0 * (1.0 - pos)
    return np.stack([r, g, b], axis=-1)


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def colorbar_strip(width: int, height: int) -> np.ndarray:
    v = np.linspace(-1.0, 1.0, width)
    row = round_half_up(diverging_rgb(v)).astype(np.uint8)
    return np.repeat(row[None], height, axis=0)


def render_heatmap(sal, base: np.ndarray, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """Overlay ``base`` (alpha) on the signed heatmap (1 - alpha).

    The patch grid is upsampled to the base image size; a degenerate or
    all-zero map renders as plain white. With ``spec.colorbar`` a strip
    mapping -1..+1 left to right is appended below the image.
    """
    base = _as_rgb8(base)
    H, W = base.shape[:2]
    grid = np.zeros(sal.grid) if sal.degenerate else sal.as_grid(normalized=True)
    if spec.upsample == "nearest":
        vals = resize_nearest(grid, H, W)
    else:
        vals = resize_bilinear(grid, H, W)
    heat = diverging_rgb(vals)
    out = spec.alpha * base.astype(np.float64) + (1.0 - spec.alpha) * heat
    out = np.clip(round_half_up(out), 0, 255).astype(np.uint8)
    if spec.colorbar:
        bar_h = max(4, H // 10)
        gap = np.full((2, W, 3), 255, dtype=np.uint8)
        out = np.concatenate([out, gap, colorbar_strip(W, bar_h)], axis=0)
    return out
