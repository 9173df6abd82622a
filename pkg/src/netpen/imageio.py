"""Portable graymap/pixmap I/O and a few drawing helpers.

Images throughout the package are 2-D ``uint8`` arrays indexed ``[row, col]``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .records import CLASS_CODES

# one color per defect class, in class-code order
CLASS_COLORS = np.array(
    [[40, 200, 40], [230, 40, 40], [40, 120, 255], [240, 200, 0]], dtype=np.uint8
)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("graymap needs a 2-D array")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8) if img.dtype != np.uint8 else img
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb).tobytes())


def _read_header(data):
    # tokens: magic, width, height, maxval; comments start with '#'
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path):
    data = Path(path).read_bytes()
    tokens, pos = _read_header(data)
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit maps are supported")
    if magic == b"P5":
        return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w).copy()
    if magic == b"P6":
        return np.frombuffer(data, np.uint8, w * h * 3, pos).reshape(h, w, 3).copy()
    raise ValueError(f"unsupported map type {magic!r}")


read_pgm = read_pnm


def to_gray8(arr):
    """Rescale an arbitrary non-negative array to 0..255 (heatmaps, accumulators)."""
    arr = np.asarray(arr, dtype=float)
    top = arr.max() if arr.size else 0.0
    if top <= 0:
        return np.zeros(arr.shape, np.uint8)
    return np.rint(255.0 * arr / top).astype(np.uint8)


def draw_rect(rgb, bbox, color, thickness=1):
    """Burn an axis-aligned rectangle outline into ``rgb`` in place."""
    h, w, _ = rgb.shape
    x0, y0, x1, y1 = (int(round(c)) for c in bbox)
    x0, x1 = max(0, min(w - 1, x0)), max(0, min(w - 1, x1))
    y0, y1 = max(0, min(h - 1, y0)), max(0, min(h - 1, y1))
    for k in range(thickness):
        rgb[min(y0 + k, y1), x0:x1 + 1] = color
        rgb[max(y1 - k, y0), x0:x1 + 1] = color
        rgb[y0:y1 + 1, min(x0 + k, x1)] = color
        rgb[y0:y1 + 1, max(x1 - k, x0)] = color
    return rgb


def annotate(img, detections, thickness=1):
    rgb = np.repeat(np.asarray(img, np.uint8)[:, :, None], 3, axis=2)
    for det in detections:
        draw_rect(rgb, det.bbox, CLASS_COLORS[CLASS_CODES[det.cls]], thickness)
    return rgb
