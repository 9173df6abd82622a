"""Net-defect detection.

A classical detector that reads the twine mesh as a periodic texture and
flags windows where it is missing (holes), outshone (plastic) or covered
(vegetation, biofouling), plus detector-agnostic post-processing: IoU, NMS
and YOLO-style head decoding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .records import DEFECT_CLASSES, Detection


class NoPeriodicity(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    polarity: str = "dark"  # twine darker ("dark") or brighter ("bright") than water
    window: int | None = None  # adaptive-threshold window; default ~4 mesh periods
    offset: float = 2.0  # gray levels below the local mean to count as twine
    min_correlation: float = 0.25
    hole_energy: float = 0.5  # fraction of the frame's median mesh texture energy
    bright: float = 30.0  # gray levels above the median window mean
    dark: float = 15.0  # gray levels below the median window mean
    texture_split: float = 7.0  # pixel std separating vegetation from biofouling
    band_delta: float = 6.0  # whole tile rows/columns this far off are structure, not defects
    min_tiles: int = 2
    min_window: int = 12  # px; smaller windows make the energy too noisy
    min_hole_periods: float = 1.5  # a hole must span more than one mesh cell each way


# -- binarization and mesh period -------------------------------------------

def binarize_net(img, window=15, offset=2.0, polarity="dark"):
    """Adaptive mean threshold; ``True`` marks twine (and rope) pixels."""
    a = np.asarray(img, np.float32)
    local = ndimage.uniform_filter(a, size=int(window), mode="reflect")
    if polarity == "dark":
        return a < local - offset
    if polarity == "bright":
        return a > local + offset
    raise ValueError(f"unknown polarity {polarity!r}")


def _first_peak(profile, min_corr):
    p = np.asarray(profile, float)
    p = p - p.mean()
    n = len(p)
    if n < 4 or not np.any(p):
        return None
    f = np.fft.rfft(p, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    ac = ac / ac[0]
    top = n // 2
    for lag in range(2, top - 1):
        if ac[lag] >= min_corr and ac[lag] >= ac[lag - 1] and ac[lag] > ac[lag + 1]:
            y0, y1, y2 = ac[lag - 1], ac[lag], ac[lag + 1]
            den = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
            return lag + float(np.clip(shift, -0.5, 0.5))
    return None


def estimate_mesh_period(mask, min_correlation=0.25):
    """Mesh period in pixels from autocorrelation of the row and column sums."""
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("empty mask")
    lags = [l for l in (_first_peak(m.sum(axis=0), min_correlation),
                        _first_peak(m.sum(axis=1), min_correlation)) if l is not None]
    if not lags:
        raise NoPeriodicity("no autocorrelation peak above threshold")
    return float(np.mean(lags))


# -- classical detector -----------------------------------------------------

def _box_sums(a, win, ys, xs):
    """Sums of ``a`` over ``win``x``win`` windows with top-left corners ``ys`` x ``xs``."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    y0, x0 = ys[:, None], xs[None, :]
    return s[y0 + win, x0 + win] - s[y0, x0 + win] - s[y0 + win, x0] + s[y0, x0]


def _bbox_of(mask, region):
    ys, xs = np.nonzero(mask[region])
    if ys.size == 0:
        return None
    r, c = region
    return (float(c.start + xs.min()), float(r.start + ys.min()),
            float(c.start + xs.max() + 1), float(r.start + ys.max() + 1))


def _dilate1(ok_axis):
    # a band that fails also spoils its direct neighbours (windows overlap by half)
    bad = ~ok_axis
    return ~(bad | np.r_[bad[1:], False] | np.r_[False, bad[:-1]])


def detect_classical(img, period, cfg: DetectorConfig = DetectorConfig()):
    """Window-level mesh analysis; returns one Detection per connected anomaly.

    Windows are two mesh periods square with half overlap.  Plastic and
    occlusions show up in the window mean; holes show up as windows whose
    mesh-scale texture energy drops to the sensor noise floor.
    """
    if period < 2:
        raise ValueError("period must be >= 2 px")
    a = np.asarray(img, np.float32)
    h, w = a.shape
    win = max(cfg.min_window, int(round(2 * period)))
    stride = max(2, win // 2)
    if h < win or w < win:
        return []
    k = max(3, int(round(period)))
    smooth = ndimage.uniform_filter(a, size=k, mode="reflect")
    hp = (a - smooth) ** 2
    ys = np.arange(0, h - win + 1, stride)
    xs = np.arange(0, w - win + 1, stride)
    n = float(win * win)
    mean = _box_sums(a.astype(float), win, ys, xs) / n
    energy = _box_sums(hp.astype(float), win, ys, xs) / n

    M = float(np.median(mean))
    E = float(np.median(energy))
    if E <= 0:
        return []
    # structure spanning the frame (ropes, the net border) is not a defect
    band = cfg.band_delta
    e_lim = cfg.hole_energy * E
    col_ok = _dilate1((np.abs(np.median(mean, axis=0) - M) <= band) & (np.median(energy, axis=0) >= e_lim))
    row_ok = _dilate1((np.abs(np.median(mean, axis=1) - M) <= band) & (np.median(energy, axis=1) >= e_lim))
    ok = row_ok[:, None] & col_ok[None, :]

    bright = ok & (mean > M + cfg.bright)
    dark = ok & (mean < M - cfg.dark) & ~bright
    # a hole is at least as bright as the surrounding net
    sparse = ok & (energy < e_lim) & (mean > M - band) & ~bright & ~dark
    near = ndimage.binary_dilation(bright | dark, structure=np.ones((3, 3), bool))
    sparse &= ~near
    score = {
        "plastic": (mean - M) / cfg.bright,
        "occluded": (M - mean) / cfg.dark,
        "net_hole": e_lim / np.maximum(energy, 1e-6),
    }

    # pixel-level evidence used to tighten window-union boxes
    evidence = {
        "plastic": smooth > M + cfg.bright / 2,
        "occluded": smooth < M - cfg.dark / 2,
    }
    if sparse.any():
        evidence["net_hole"] = ndimage.uniform_filter(hp, size=win, mode="reflect") < e_lim

    out = []
    eight = np.ones((3, 3), int)
    for kind, flags in (("plastic", bright), ("occluded", dark), ("net_hole", sparse)):
        labels, count = ndimage.label(flags, structure=eight)
        for lab in range(1, count + 1):
            ti, tj = np.nonzero(labels == lab)
            if ti.size < cfg.min_tiles:
                continue
            y0, y1 = int(ys[ti.min()]), int(ys[ti.max()]) + win
            x0, x1 = int(xs[tj.min()]), int(xs[tj.max()]) + win
            region = (slice(y0, y1), slice(x0, x1))
            bbox = _bbox_of(evidence[kind], region) or (float(x0), float(y0), float(x1), float(y1))
            if kind == "net_hole" and min(bbox[2] - bbox[0], bbox[3] - bbox[1]) < cfg.min_hole_periods * period:
                continue
            conf = float(np.clip(0.5 * score[kind][ti, tj].max(), 0.0, 1.0))
            if kind == "occluded":
                cls = "vegetation" if _interior_std(a, bbox) > cfg.texture_split else "biofouling"
            else:
                cls = kind
            out.append(Detection(cls, bbox, conf))
    out.sort(key=lambda d: (-d.confidence, d.bbox))
    return out


def _interior_std(a, bbox):
    x0, y0, x1, y1 = bbox
    mx, my = (x1 - x0) / 4, (y1 - y0) / 4
    patch = a[int(round(y0 + my)):int(round(y1 - my)), int(round(x0 + mx)):int(round(x1 - mx))]
    return float(patch.std()) if patch.size else 0.0


def detect_frame(img, cfg: DetectorConfig = DetectorConfig(), fallback_period=None):
    """Estimate the mesh period then run the classical detector.

    Returns ``[]`` when no mesh periodicity is visible and no fallback is given.
    """
    a = np.asarray(img)
    try:
        period = estimate_mesh_period(binarize_net(a, 15, cfg.offset, cfg.polarity), cfg.min_correlation)
    except (NoPeriodicity, ValueError):
        if fallback_period is None:
            return []
        period = fallback_period
    if period < 2:
        return []
    return detect_classical(a, period, cfg)


# -- post-processing ---------------------------------------------------------

def iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(dets, iou_threshold):
    """Greedy per-class suppression; survivors keep the global priority order."""
    order = sorted(dets, key=lambda d: (-d.confidence, tuple(d.bbox)))
    kept = []
    for d in order:
        if all(k.cls != d.cls or iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


@dataclass(frozen=True)
class AnchorSpec:
    anchors: tuple  # ((w, h), ...) in pixels
    stride: float

    def __post_init__(self):
        if self.stride <= 0 or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchors and stride must be positive")


@dataclass(frozen=True)
class RawHead:
    """Logits shaped ``(grid_h, grid_w, n_anchors, 5 + n_classes)``:
    tx, ty, tw, th, objectness, then one score per class."""

    logits: np.ndarray

    @property
    def grid_h(self):
        return self.logits.shape[0]

    @property
    def grid_w(self):
        return self.logits.shape[1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_head(head: RawHead, anchors: AnchorSpec, conf_threshold: float):
    """Decode one detection scale with the grid-relative v5 box transform."""
    t = np.asarray(head.logits, float)
    if t.ndim != 4 or t.shape[2] != len(anchors.anchors) or t.shape[3] != 5 + len(DEFECT_CLASSES):
        raise ShapeMismatch(
            f"head {t.shape} does not fit {len(anchors.anchors)} anchors x {5 + len(DEFECT_CLASSES)} values")
    s = _sigmoid(t)
    gh, gw = t.shape[:2]
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    aw = np.array([a[0] for a in anchors.anchors], float)
    ah = np.array([a[1] for a in anchors.anchors], float)
    bx = (2 * s[..., 0] - 0.5 + gx[..., None]) * anchors.stride
    by = (2 * s[..., 1] - 0.5 + gy[..., None]) * anchors.stride
    bw = (2 * s[..., 2]) ** 2 * aw
    bh = (2 * s[..., 3]) ** 2 * ah
    cls_p = s[..., 5:]
    best = cls_p.argmax(axis=-1)
    conf = s[..., 4] * cls_p.max(axis=-1)
    out = []
    for i, j, k in zip(*np.nonzero(conf >= conf_threshold)):
        half_w, half_h = bw[i, j, k] / 2, bh[i, j, k] / 2
        if half_w <= 0 or half_h <= 0:
            continue
        box = (float(bx[i, j, k] - half_w), float(by[i, j, k] - half_h),
               float(bx[i, j, k] + half_w), float(by[i, j, k] + half_h))
        out.append(Detection(DEFECT_CLASSES[best[i, j, k]], box, float(conf[i, j, k])))
    return out


def decode_heads(heads, anchor_specs, conf_threshold):
    if len(heads) != len(anchor_specs):
        raise ShapeMismatch("one anchor spec per head scale")
    out = []
    for h, a in zip(heads, anchor_specs):
        out.extend(decode_head(h, a, conf_threshold))
    return out
