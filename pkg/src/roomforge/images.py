"""PNG encoding for control maps and artifacts.

Label maps are single-channel indexed PNG (16-bit when ids exceed 255);
depth maps are 16-bit single-channel PNG in millimeters with 0 = invalid;
color frames are 8-bit RGB.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

DEPTH_INVALID = 0
_MM_MAX = 65535


def encode_labels(labels: np.ndarray, palette=None) -> bytes:
    """Indexed label PNG; `palette` maps ids to display colors when given."""
    labels = np.asarray(labels)
    buf = io.BytesIO()
    if labels.max(initial=0) > 255:
        Image.fromarray(labels.astype(np.uint16)).save(buf, format="PNG")
    else:
        img = Image.fromarray(labels.astype(np.uint8), mode="P")
        table = np.zeros((256, 3), dtype=np.uint8)
        if palette is not None:
            for cid, _, color in palette.entries:
                table[cid] = color
        img.putpalette(table.reshape(-1).tolist())
        img.save(buf, format="PNG")
    return buf.getvalue()


def decode_labels(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    return np.asarray(img).astype(np.int32)


def encode_depth_mm(depth_m: np.ndarray, valid: np.ndarray | None = None) -> bytes:
    """Depth in meters -> 16-bit millimeter PNG (0 marks invalid pixels)."""
    mm = np.rint(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    mm = np.clip(mm, 1, _MM_MAX).astype(np.uint16)
    if valid is not None:
        mm = np.where(valid, mm, DEPTH_INVALID).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(mm).save(buf, format="PNG")
    return buf.getvalue()


def decode_depth_mm(data: bytes) -> np.ndarray:
    """16-bit millimeter PNG -> meters; invalid pixels come back as 0."""
    img = Image.open(io.BytesIO(data))
    mm = np.asarray(img, dtype=np.float64)
    return mm / 1000.0


def encode_rgb(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(img)


def encode_gray(gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def depth_to_preview(depth_m: np.ndarray, max_depth: float | None = None) -> np.ndarray:
    """Normalized grayscale visualization for depth maps."""
    depth = np.asarray(depth_m, dtype=np.float64)
    top = max_depth if max_depth else max(float(depth.max()), 1e-6)
    return np.clip(depth / top * 255.0, 0, 255).astype(np.uint8)


def colorize_labels(labels: np.ndarray, palette) -> np.ndarray:
    """Label map -> RGB via the palette (unknown ids fall back to a hash color)."""
    labels = np.asarray(labels)
    out = np.zeros((*labels.shape, 3), dtype=np.uint8)
    for cid in np.unique(labels):
        try:
            color = palette.color_of(int(cid))
        except KeyError:
            color = tuple(int(x) for x in _hash_color(int(cid)))
        out[labels == cid] = color
    return out


def _hash_color(value: int) -> np.ndarray:
    rng = np.random.default_rng(np.uint64(value * 2654435761 % (2**32)))
    return rng.integers(40, 220, size=3, dtype=np.int64).astype(np.uint8)
