"""Rope-based range and yaw perception: Canny edges, Hough lines, pinhole triangulation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .scene import CameraIntrinsics


class DegenerateObservation(ValueError):
    pass


@dataclass(frozen=True)
class EdgeMap:
    edges: np.ndarray  # bool, [row, col]
    direction: np.ndarray | None = None  # quantized gradient direction 0..3 (0, 45, 90, 135 deg)

    @property
    def width(self):
        return self.edges.shape[1]

    @property
    def height(self):
        return self.edges.shape[0]


@dataclass(frozen=True)
class HoughLine:
    rho: float
    theta: float
    votes: int

    def u_at_row(self, v):
        """Column where the line crosses image row ``v`` (nan for horizontal lines)."""
        c = math.cos(self.theta)
        if abs(c) < 1e-12:
            return math.nan
        return (self.rho - v * math.sin(self.theta)) / c


@dataclass(frozen=True)
class RopePairObservation:
    left_line: HoughLine
    right_line: HoughLine
    pixel_spacing: float
    midpoint_u: float
    distance_est: float | None = None
    yaw_est: float | None = None
    frame_id: int = 0


@dataclass(frozen=True)
class RopeFilterConfig:
    max_tilt: float = 0.1  # rad from vertical
    merge_px: float = 20.0
    min_px: float = 30.0
    max_px: float = 400.0


@dataclass(frozen=True)
class YawConfig:
    max_slope_angle: float = 0.18  # rad from horizontal
    center_band: float = 40.0  # px around cy where slope carries no yaw information
    min_lines: int = 3


@dataclass(frozen=True)
class VisionConfig:
    sigma: float = 1.4
    low: float = 30.0
    high: float = 90.0
    rho_res: float = 1.0
    theta_res: float = math.pi / 360
    min_votes_frac: float = 0.4  # of image height
    mesh_sigma: float = 1.0
    mesh_low: float = 8.0
    mesh_high: float = 14.0
    mesh_theta_res: float = 0.004
    mesh_min_votes_frac: float = 0.15  # of image width
    mesh_strip_frac: float = 0.3  # of image height, searched at top and bottom
    rope: RopeFilterConfig = RopeFilterConfig()
    yaw: YawConfig = YawConfig()


# -- Canny -----------------------------------------------------------------

def gaussian_kernel(sigma):
    half = int(math.ceil(3.0 * sigma))
    x = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with mirrored borders (``d c b a | a b c d``).

    8-bit input gives rounded 8-bit output; float input keeps its float
    type (float32 work stays float32 for speed).
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    work = img.astype(np.float32) if img.dtype in (np.uint8, np.float32) else img.astype(float)
    out = ndimage.correlate1d(work, k, axis=1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def sobel(a):
    a = np.asarray(a)
    p = np.pad(a if a.dtype.kind == "f" else a.astype(float), 1, mode="symmetric")
    # correlation with [[-1,0,1],[-2,0,2],[-1,0,1]] and its transpose
    dx = p[:, 2:] - p[:, :-2]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    dy = p[2:, :] - p[:-2, :]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


_TAN_22 = math.tan(math.radians(22.5))
_TAN_67 = math.tan(math.radians(67.5))


def _quantize_direction(gx, gy):
    """Gradient direction (mod 180 deg) rounded to 0, 45, 90 or 135 deg -> 0..3."""
    ax, ay = np.abs(gx), np.abs(gy)
    d = np.where(gx * gy > 0, np.int8(1), np.int8(3))
    np.putmask(d, ay <= _TAN_22 * ax, np.int8(0))
    np.putmask(d, ay > _TAN_67 * ax, np.int8(2))
    return d


# neighbor offsets (drow, dcol) along the gradient for each quantized direction
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def non_max_suppression(mag, direction):
    """Keep ridge pixels of ``mag`` across the gradient.

    A pixel must be >= its predecessor and strictly > its successor along
    the gradient, so two-pixel plateaus yield a single edge pixel.
    """
    h, w = mag.shape
    p = np.pad(mag, 1)
    keep = np.zeros(mag.shape, bool)
    for d, (dr, dc) in _NMS_OFFSETS.items():
        sel = direction == d
        fwd = p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        back = p[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        keep |= sel & (mag > fwd) & (mag >= back)
    return np.where(keep & (mag > 0), mag, 0)


def hysteresis(nms, low, high):
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), int))
    if n == 0:
        return np.zeros(nms.shape, bool)
    seeds = np.zeros(n + 1, bool)
    seeds[labels[strong]] = True
    seeds[0] = False
    return seeds[labels]


def canny(img, sigma=1.4, low=30.0, high=90.0) -> EdgeMap:
    if not 0 < low <= high:
        raise ValueError("need 0 < low <= high")
    blurred = gaussian_blur(np.asarray(img, np.float32), sigma)
    gx, gy = sobel(blurred)
    mag = np.hypot(gx, gy)
    direction = _quantize_direction(gx, gy)
    edges = hysteresis(_nms_above(mag, direction, low), low, high)
    return EdgeMap(edges, direction)


_DR = np.array([_NMS_OFFSETS[d][0] for d in range(4)])
_DC = np.array([_NMS_OFFSETS[d][1] for d in range(4)])


def _nms_above(mag, direction, low):
    # same as non_max_suppression at pixels with mag >= low; zero elsewhere,
    # which hysteresis cannot tell apart
    ys, xs = np.nonzero(mag >= low)
    out = np.zeros_like(mag)
    if ys.size == 0:
        return out
    p = np.pad(mag, 1)
    d = direction[ys, xs]
    dr, dc = _DR[d], _DC[d]
    m = mag[ys, xs]
    keep = (m > p[ys + 1 + dr, xs + 1 + dc]) & (m >= p[ys + 1 - dr, xs + 1 - dc]) & (m > 0)
    out[ys[keep], xs[keep]] = m[keep]
    return out


# -- Hough -----------------------------------------------------------------

@dataclass(frozen=True)
class HoughSpace:
    """Vote counts for the computed theta rows.

    ``acc[i, j]`` counts votes for ``thetas[i]`` (grid index ``theta_index[i]``)
    and ``rhos[j]``; theta rows outside the requested bands are not stored.
    """

    acc: np.ndarray
    thetas: np.ndarray
    theta_index: np.ndarray
    n_theta: int
    rhos: np.ndarray
    rho_res: float

    def full(self):
        out = np.zeros((self.n_theta, len(self.rhos)), self.acc.dtype)
        out[self.theta_index] = self.acc
        return out


def hough_bins(height, width, rho_res, theta_res):
    n_theta = int(round(math.pi / theta_res))
    thetas = np.array([k * theta_res for k in range(n_theta)])
    thetas = thetas[thetas < math.pi]
    n_half = int(math.ceil(math.hypot(height - 1, width - 1) / rho_res))
    rhos = (np.arange(2 * n_half + 1) - n_half) * rho_res
    return thetas, rhos


def hough_accumulator(edges, rho_res=1.0, theta_res=math.pi / 180, theta_bands=None) -> HoughSpace:
    """Vote every edge pixel ``(x=col, y=row)`` into ``rho = x cos(t) + y sin(t)`` bins.

    ``theta_bands`` optionally restricts voting to ``[(lo, hi), ...]`` angle
    ranges; the rest of the theta grid is treated as empty.
    """
    if rho_res <= 0 or theta_res <= 0:
        raise ValueError("resolutions must be positive")
    e = edges.edges if isinstance(edges, EdgeMap) else np.asarray(edges, bool)
    h, w = e.shape
    thetas, rhos = hough_bins(h, w, rho_res, theta_res)
    n_half = (len(rhos) - 1) // 2
    if theta_bands is None:
        t_idx = np.arange(len(thetas))
    else:
        sel = np.zeros(len(thetas), bool)
        for lo, hi in theta_bands:
            sel |= (thetas >= lo) & (thetas <= hi)
        t_idx = np.flatnonzero(sel)
    nr = len(rhos)
    acc = np.zeros(len(t_idx) * nr, np.int64)
    ys, xs = np.nonzero(e)
    if xs.size and t_idx.size:
        cos = np.array([math.cos(thetas[i]) for i in t_idx])
        sin = np.array([math.sin(thetas[i]) for i in t_idx])
        xs = xs.astype(float)
        ys = ys.astype(float)
        offset = (np.arange(len(t_idx)) * nr + n_half)[None, :]
        step = max(1, 2_000_000 // len(t_idx))
        for s in range(0, xs.size, step):
            r = xs[s:s + step, None] * cos[None, :]
            r += ys[s:s + step, None] * sin[None, :]
            if rho_res != 1.0:
                r /= rho_res
            r += 0.5
            np.floor(r, out=r)
            idx = r.astype(np.int64)
            idx += offset
            acc += np.bincount(idx.ravel(), minlength=acc.size)
    return HoughSpace(acc.reshape(len(t_idx), nr), thetas[t_idx], t_idx, len(thetas), rhos, rho_res)


_NEIGHBORS = [(dt, dr) for dt in (-1, 0, 1) for dr in (-1, 0, 1) if (dt, dr) != (0, 0)]


def hough_peaks(space: HoughSpace, min_votes):
    """Local maxima over the 8-neighborhood with at least ``min_votes`` votes.

    Plateaus are resolved toward the earlier bin in (theta, rho) raster order:
    a peak must be >= its earlier neighbors and > its later ones.
    """
    acc = space.acc
    bi, ri = np.nonzero(acc >= max(min_votes, 1))
    if bi.size == 0:
        return []
    # grid theta index -> stored row (-1 when not stored); one sentinel slot each side
    row_of = np.full(space.n_theta + 2, -1)
    row_of[space.theta_index + 1] = np.arange(len(space.theta_index))
    padded = np.pad(acc, ((0, 1), (1, 1)), constant_values=0)  # row -1 reads the zero row
    c = acc[bi, ri]
    ti = space.theta_index[bi]
    peak = np.ones(bi.size, bool)
    for dt, dr in _NEIGHBORS:
        rows = row_of[ti + 1 + dt]
        nb = padded[rows, ri + 1 + dr]
        later = dt > 0 or (dt == 0 and dr > 0)
        peak &= (c > nb) if later else (c >= nb)
    lines = [HoughLine(float(space.rhos[r]), float(space.thetas[b]), int(acc[b, r]))
             for b, r in zip(bi[peak], ri[peak])]
    lines.sort(key=lambda l: (-l.votes, l.theta, l.rho))
    return lines


def hough_lines(edges, rho_res=1.0, theta_res=math.pi / 180, min_votes=1, theta_bands=None):
    if min_votes < 1:
        raise ValueError("min_votes must be >= 1")
    return hough_peaks(hough_accumulator(edges, rho_res, theta_res, theta_bands), min_votes)


# -- rope pair and triangulation ---------------------------------------------

def _near_vertical(line, max_tilt):
    return line.theta <= max_tilt or line.theta >= math.pi - max_tilt


def extract_rope_pair(lines, cam: CameraIntrinsics, cfg: RopeFilterConfig = RopeFilterConfig(),
                      frame_id: int = 0):
    """Pick the two rope lines; returns ``None`` when no valid pair exists."""
    cands = []
    for line in lines:
        if _near_vertical(line, cfg.max_tilt):
            u = line.u_at_row(cam.cy)
            if math.isfinite(u):
                cands.append((u, line))
    if len(cands) < 2:
        return None
    cands.sort(key=lambda c: c[0])

    # single-linkage clusters along the row through the principal point
    clusters, cur = [], [cands[0]]
    for c in cands[1:]:
        if c[0] - cur[-1][0] < cfg.merge_px:
            cur.append(c)
        else:
            clusters.append(cur)
            cur = [c]
    clusters.append(cur)
    merged = []
    for cl in clusters:
        votes = sum(l.votes for _, l in cl)
        u = sum(u * l.votes for u, l in cl) / votes
        best = max(cl, key=lambda c: (c[1].votes, -c[1].theta, -c[1].rho))[1]
        merged.append((u, votes, best))

    best_pair, best_key = None, None
    for i in range(len(merged)):
        for j in range(i + 1, len(merged)):
            spacing = merged[j][0] - merged[i][0]
            if not cfg.min_px <= spacing <= cfg.max_px:
                continue
            mid = 0.5 * (merged[i][0] + merged[j][0])
            key = (-(merged[i][1] + merged[j][1]), abs(mid - cam.cx), i, j)
            if best_key is None or key < best_key:
                best_pair, best_key = (i, j), key
    if best_pair is None:
        return None
    (ul, _, ll), (ur, _, lr) = merged[best_pair[0]], merged[best_pair[1]]
    return RopePairObservation(ll, lr, ur - ul, 0.5 * (ul + ur), frame_id=frame_id)


def estimate_distance(obs: RopePairObservation, cam: CameraIntrinsics, rope_spacing: float) -> float:
    """Pinhole triangulation ``Z = f * B / d``."""
    if rope_spacing <= 0:
        raise ValueError("rope_spacing must be positive")
    if obs.pixel_spacing < 1.0:
        raise DegenerateObservation(f"pixel spacing {obs.pixel_spacing} below 1 px")
    return cam.focal_px * rope_spacing / obs.pixel_spacing


def estimate_yaw(lines, cam: CameraIntrinsics, cfg: YawConfig = YawConfig()):
    """Yaw from the tilt of horizontal net lines.

    A horizontal net line crossing the image column ``cx`` at row ``v0``
    appears with slope ``s = -(v0 - cy) tan(yaw) / f``, so each line away
    from the center row gives one estimate; the median is returned.
    """
    est = []
    for line in lines:
        if abs(line.theta - math.pi / 2) > cfg.max_slope_angle:
            continue
        st, ct = math.sin(line.theta), math.cos(line.theta)
        slope = -ct / st
        v0 = (line.rho - cam.cx * ct) / st
        dv = v0 - cam.cy
        if abs(dv) < cfg.center_band:
            continue
        est.append(math.atan(-slope * cam.focal_px / dv))
    if len(est) < max(1, cfg.min_lines):
        return None
    return float(np.median(est))


# -- per-frame pipeline ----------------------------------------------------

@dataclass(frozen=True)
class Perception:
    observation: RopePairObservation | None
    yaw_est: float | None
    rope_edges: EdgeMap
    rope_lines: list
    mesh_lines: list


def rope_lines(img, cam: CameraIntrinsics, cfg: VisionConfig = VisionConfig()):
    em = canny(img, cfg.sigma, cfg.low, cfg.high)
    band = cfg.rope.max_tilt
    lines = hough_lines(em, cfg.rho_res, cfg.theta_res,
                        max(1, int(round(cfg.min_votes_frac * cam.height))),
                        theta_bands=[(0.0, band), (math.pi - band, math.pi)])
    return em, lines


def mesh_lines(img, cam: CameraIntrinsics, cfg: VisionConfig = VisionConfig()):
    """Near-horizontal lines from the top and bottom strips of the frame.

    Rows near ``cy`` carry no yaw information, so only the outer strips are
    searched; returned lines are in full-image coordinates.
    """
    img = np.asarray(img)
    h = img.shape[0]
    k = max(1, int(round(cfg.mesh_strip_frac * h)))
    half = cfg.yaw.max_slope_angle
    min_votes = max(1, int(round(cfg.mesh_min_votes_frac * cam.width)))
    out = []
    for top in (0, h - k):
        em = canny(img[top:top + k], cfg.mesh_sigma, cfg.mesh_low, cfg.mesh_high)
        # horizontal structure only: gradient quantized to the vertical direction
        horiz = em.edges & (em.direction == 2)
        for line in hough_lines(horiz, cfg.rho_res, cfg.mesh_theta_res, min_votes,
                                theta_bands=[(math.pi / 2 - half, math.pi / 2 + half)]):
            out.append(HoughLine(line.rho + top * math.sin(line.theta), line.theta, line.votes))
    return out


def perceive(img, cam: CameraIntrinsics, rope_spacing: float, cfg: VisionConfig = VisionConfig(),
             frame_id: int = 0, with_yaw: bool = True) -> Perception:
    """Full single-frame pipeline: rope pair, triangulated distance and vision yaw."""
    em, rlines = rope_lines(img, cam, cfg)
    obs = extract_rope_pair(rlines, cam, cfg.rope, frame_id)
    mlines, yaw = [], None
    if with_yaw:
        mlines = mesh_lines(img, cam, cfg)
        yaw = estimate_yaw(mlines, cam, cfg.yaw)
    if obs is not None:
        try:
            dist = estimate_distance(obs, cam, rope_spacing)
        except DegenerateObservation:
            obs = None
        else:
            obs = replace(obs, distance_est=dist, yaw_est=yaw)
    return Perception(obs, yaw, em, rlines, mlines)
