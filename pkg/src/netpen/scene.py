"""Deterministic synthetic net-pen world.

Coordinates: the net lies in the plane ``Z = 0``; ``X`` runs horizontally
along the net (the rope pair is centered on ``X = 0``) and ``Y`` is depth,
positive down.  The vehicle sits at ``Z = -z`` looking toward ``+Z`` when
its yaw is zero.  Positive yaw swings the camera axis toward ``+X``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .records import DEFECT_CLASSES, ControlCommand

# gray levels before attenuation/noise
WATER_LEVEL = 150.0
TWINE_LEVEL = 138.0
ROPE_LEVEL = 35.0
PLASTIC_LEVEL = 240.0
VEGETATION_LEVEL = 100.0
VEGETATION_TEXTURE = 35.0
BIOFOULING_LEVEL = 116.0
BIOFOULING_TEXTURE = 5.0


class InvalidConfig(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DefectSpec:
    cls: str
    center: tuple  # (X, depth) in meters on the net plane
    extent: tuple  # (width, height) in meters

    @property
    def bounds(self):
        (x, y), (w, h) = self.center, self.extent
        return x - w / 2, y - h / 2, x + w / 2, y + h / 2


@dataclass(frozen=True)
class WaterParams:
    attenuation: float = 0.1  # per meter of range
    noise_sigma: float = 2.0  # gray levels


def _default_defects():
    return (
        DefectSpec("plastic", (0.0, 2.0), (0.16, 0.12)),
        DefectSpec("net_hole", (0.0, 4.0), (0.12, 0.12)),
        DefectSpec("vegetation", (0.0, 6.0), (0.2, 0.26)),
        DefectSpec("biofouling", (0.0, 8.0), (0.26, 0.2)),
    )


@dataclass(frozen=True)
class SceneConfig:
    net_width: float = 20.0
    net_depth: float = 10.0
    mesh_pitch: float = 0.03
    twine_width: float = 0.006
    rope_spacing: float = 0.5
    rope_width: float = 0.03
    defects: tuple = field(default_factory=_default_defects)
    random_defects: int = 0
    water: WaterParams = field(default_factory=WaterParams)
    seed: int = 7


@dataclass(frozen=True)
class NetScene:
    net_width: float
    net_depth: float
    mesh_pitch: float
    twine_width: float
    rope_spacing: float
    rope_width: float
    defects: tuple
    water: WaterParams
    seed: int

    @property
    def rope_positions(self):
        return (-self.rope_spacing / 2, self.rope_spacing / 2)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.focal_px <= 0:
            raise InvalidConfig("focal_px", "must be positive")
        if not (0 <= self.cx < self.width):
            raise InvalidConfig("cx", "principal point outside the image")
        if not (0 <= self.cy < self.height):
            raise InvalidConfig("cy", "principal point outside the image")


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    z: float = 2.0
    depth: float = 0.5
    yaw: float = 0.0
    surge: float = 0.0
    sway: float = 0.0
    heave: float = 0.0
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class VehicleParams:
    v_max: tuple = (0.5, 0.3, 0.3, 0.5)  # surge, sway, heave [m/s], yaw [rad/s]
    tau: tuple = (0.4, 0.4, 0.4, 0.3)  # first-order lag per DOF [s]
    min_z: float = 0.1


@dataclass(frozen=True)
class DisturbanceParams:
    """Sinusoidal current added to the world-frame z and x rates."""

    amplitude_z: float = 0.0
    amplitude_x: float = 0.0
    period: float = 8.0
    phase_z: float = 0.0
    phase_x: float = 0.0


@dataclass(frozen=True)
class GroundTruth:
    true_distance: float
    true_yaw: float
    visible_defects: tuple  # of (cls, (x0, y0, x1, y1))


def _check_scene(cfg):
    if not cfg.rope_spacing > 0:
        raise InvalidConfig("rope_spacing", "must be positive")
    if not cfg.mesh_pitch > 0:
        raise InvalidConfig("mesh_pitch", "must be positive")
    if not 0 < cfg.twine_width < cfg.mesh_pitch:
        raise InvalidConfig("twine_width", "must be positive and below mesh_pitch")
    if not cfg.rope_width > 0:
        raise InvalidConfig("rope_width", "must be positive")
    if cfg.net_width <= 0 or cfg.net_depth <= 0:
        raise InvalidConfig("net_width", "net extent must be positive")
    if cfg.rope_spacing + cfg.rope_width > cfg.net_width:
        raise InvalidConfig("rope_spacing", "ropes fall outside the net width")
    if cfg.water.attenuation < 0 or cfg.water.noise_sigma < 0:
        raise InvalidConfig("water", "attenuation and noise must be non-negative")
    if cfg.random_defects < 0:
        raise InvalidConfig("random_defects", "must be non-negative")
    for i, d in enumerate(cfg.defects):
        _check_defect(cfg, d, f"defects[{i}]")


def _check_defect(cfg, d, name):
    if d.cls not in DEFECT_CLASSES:
        raise InvalidConfig(name, f"unknown class {d.cls!r}")
    if not (d.extent[0] > 0 and d.extent[1] > 0):
        raise InvalidConfig(name, "extent must be strictly positive")
    x0, y0, x1, y1 = d.bounds
    half = cfg.net_width / 2
    if x0 < -half or x1 > half or y0 < 0 or y1 > cfg.net_depth:
        raise InvalidConfig(name, "defect lies outside the net")


def _random_defects(cfg, rng):
    out = []
    half = cfg.net_width / 2
    for _ in range(cfg.random_defects):
        w, h = rng.uniform(0.08, 0.3, size=2)
        x = rng.uniform(-half + w, half - w)
        y = rng.uniform(h, cfg.net_depth - h)
        out.append(DefectSpec(DEFECT_CLASSES[rng.integers(4)], (float(x), float(y)), (float(w), float(h))))
    return tuple(out)


def build_scene(config: SceneConfig) -> NetScene:
    _check_scene(config)
    defects = tuple(config.defects)
    if config.random_defects:
        defects += _random_defects(config, np.random.default_rng(config.seed))
    return NetScene(
        net_width=float(config.net_width),
        net_depth=float(config.net_depth),
        mesh_pitch=float(config.mesh_pitch),
        twine_width=float(config.twine_width),
        rope_spacing=float(config.rope_spacing),
        rope_width=float(config.rope_width),
        defects=defects,
        water=config.water,
        seed=int(config.seed),
    )


# -- vehicle ---------------------------------------------------------------

def _current_increment(amplitude, period, phase, t, dt):
    # exact integral of amplitude * sin(w s + phase) over [t, t + dt]
    if amplitude == 0.0:
        return 0.0
    w = 2.0 * math.pi / period
    return amplitude / w * (math.cos(w * t + phase) - math.cos(w * (t + dt) + phase))


def step_vehicle(state: VehicleState, cmd: ControlCommand, disturbance: DisturbanceParams,
                 dt: float, t: float = 0.0, params: VehicleParams = VehicleParams()) -> VehicleState:
    """Advance the vehicle by ``dt`` seconds starting at simulation time ``t``.

    Each DOF velocity relaxes toward ``clip(cmd) * v_max`` with its own time
    constant; the lag and the current are integrated in closed form so the
    result does not depend on how a time span is split into steps.
    """
    if not 0.0 < dt <= 0.5:
        raise ValueError(f"dt={dt} outside (0, 0.5]")
    cmd = cmd.clipped()
    vel = (state.surge, state.sway, state.heave, state.yaw_rate)
    new_vel, disp = [], []
    for c, v, vmax, tau in zip(cmd.as_tuple(), vel, params.v_max, params.tau):
        target = c * vmax
        decay = math.exp(-dt / tau)
        new_vel.append(target + (v - target) * decay)
        disp.append(target * dt + (v - target) * tau * (1.0 - decay))
    d_surge, d_sway, d_heave, d_yaw = disp
    psi = state.yaw + 0.5 * d_yaw
    s, c = math.sin(psi), math.cos(psi)
    dx = d_surge * s + d_sway * c
    dz = -(d_surge * c - d_sway * s)
    dx += _current_increment(disturbance.amplitude_x, disturbance.period, disturbance.phase_x, t, dt)
    dz += _current_increment(disturbance.amplitude_z, disturbance.period, disturbance.phase_z, t, dt)
    yaw = min(1.5, max(-1.5, state.yaw + d_yaw))
    return VehicleState(
        x=state.x + dx,
        z=max(params.min_z, state.z + dz),
        depth=max(0.0, state.depth + d_heave),
        yaw=yaw,
        surge=new_vel[0],
        sway=new_vel[1],
        heave=new_vel[2],
        yaw_rate=new_vel[3],
    )


# -- projection ------------------------------------------------------------

def project_points(state: VehicleState, cam: CameraIntrinsics, X, Y):
    """Project net-plane points to pixel coordinates; returns (u, v, depth_along_axis)."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    s, c = math.sin(state.yaw), math.cos(state.yaw)
    rx = X - state.x
    xc = rx * c - state.z * s
    zc = rx * s + state.z * c
    yc = Y - state.depth
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.cx + cam.focal_px * xc / zc
        v = cam.cy + cam.focal_px * yc / zc
    return u, v, zc


def _column_rays(state, cam, u):
    """For pixel columns ``u`` return the ray scale and the net-plane X hit."""
    a = (u - cam.cx) / cam.focal_px
    s, c = math.sin(state.yaw), math.cos(state.yaw)
    denom = c - a * s
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 1e-9, state.z / denom, np.nan)
    return t, state.x + t * (a * c + s)


def _stripe_measure(y, pitch, width):
    # measure of stripes [k*pitch - width/2, k*pitch + width/2] below y, up to a constant
    s = y + width / 2
    k = np.floor(s / pitch)
    r = k * pitch
    np.subtract(s, r, out=r)
    np.minimum(r, width, out=r)
    k *= width
    k += r
    return k


def _stripe_coverage(lo, hi, pitch, width):
    return (_stripe_measure(hi, pitch, width) - _stripe_measure(lo, pitch, width)) / (hi - lo)


def _overlap(lo, hi, a, b):
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None) / (hi - lo)


def _hash01(i, j, seed):
    k = (i * 374761393 + j * 668265263 + seed * 2147483647) & 0xFFFFFFFF
    k = ((k ^ (k >> 13)) * 1274126177) & 0xFFFFFFFF
    k = k ^ (k >> 16)
    return k / 4294967296.0 * 2.0 - 1.0


def _value_noise(X, Y, cell_x, cell_y, seed):
    gx, gy = X / cell_x, Y / cell_y
    i0, j0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - i0, gy - j0
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    n00 = _hash01(i0, j0, seed)
    n10 = _hash01(i0 + 1, j0, seed)
    n01 = _hash01(i0, j0 + 1, seed)
    n11 = _hash01(i0 + 1, j0 + 1, seed)
    top = n00 + (n10 - n00) * fx
    bot = n01 + (n11 - n01) * fx
    return top + (bot - top) * fy


def _texture(d, X, Y, seed):
    if d.cls == "vegetation":
        # frond-like streaks elongated along depth
        return VEGETATION_LEVEL + VEGETATION_TEXTURE * _value_noise(X, Y, 0.012, 0.04, seed)
    return BIOFOULING_LEVEL + BIOFOULING_TEXTURE * _value_noise(X, Y, 0.008, 0.008, seed)


def _span(mask):
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return None
    return slice(idx[0], idx[-1] + 1)


def render_frame(scene: NetScene, state: VehicleState, cam: CameraIntrinsics,
                 frame: int = 0) -> np.ndarray:
    """Render the camera view as an 8-bit grayscale image.

    Mesh, rope and defect coverage is box-filtered analytically over each
    pixel footprint; plastic blobs are 2x2 supersampled.  ``frame`` seeds
    the sensor noise together with the scene seed.
    """
    h, w = cam.height, cam.width
    f = cam.focal_px
    t_c, X_c = _column_rays(state, cam, np.arange(w, dtype=float))
    _, X_e = _column_rays(state, cam, np.arange(w + 1, dtype=float) - 0.5)
    X0, X1 = X_e[:-1], X_e[1:]
    seen = np.isfinite(X0) & np.isfinite(X1) & (X1 > X0)
    X0 = np.where(seen, X0, 0.0)
    X1 = np.where(seen, X1, 1.0)
    t_c = np.where(seen, t_c, 0.0)

    rows = np.arange(h + 1, dtype=float) - 0.5 - cam.cy
    # full-frame work in float32: ~1e-6 m resolution at 10 m depth, far below a pixel footprint
    Y_e = (state.depth + t_c[None, :] * (rows[:, None] / f)).astype(np.float32)
    Y0, Y1 = Y_e[:-1], Y_e[1:]
    Yspan = Y1 - Y0
    flat = ~(Yspan > 0)  # unseen columns
    if flat.any():
        Y1 = np.where(flat, Y0 + np.float32(1e-3), Y1)
        Yspan = np.where(flat, Y1 - Y0, Yspan)

    pitch, tw = scene.mesh_pitch, scene.twine_width
    cov_v = _stripe_coverage(X0, X1, pitch, tw).astype(np.float32)
    # row edges are shared by neighbouring pixels, so measure them once
    M = _stripe_measure(Y_e, pitch, tw)
    cov_h = M[1:] - M[:-1]
    if flat.any():
        cov_h = np.where(flat, _stripe_measure(Y1, pitch, tw) - M[:-1], cov_h)
    cov_h /= Yspan
    net = cov_h * (1.0 - cov_v)
    net += cov_v
    in_x = (_overlap(X0, X1, -scene.net_width / 2, scene.net_width / 2) * seen).astype(np.float32)
    in_y = _overlap(Y0, Y1, 0.0, scene.net_depth)

    patches, blobs = [], []
    for k, d in enumerate(scene.defects):
        bx0, by0, bx1, by1 = d.bounds
        ox = _overlap(X0, X1, bx0, bx1) * seen
        cols = _span(ox > 0)
        if cols is None:
            continue
        oy = _overlap(Y0[:, cols], Y1[:, cols], by0, by1)
        rws = _span(oy.max(axis=1) > 0)
        if rws is None:
            continue
        frac = ox[None, cols] * oy[rws]
        if d.cls == "net_hole":
            net[rws, cols] *= 1.0 - frac
        elif d.cls == "plastic":
            blobs.append((k, d, rws, cols))
        else:
            patches.append((k, d, rws, cols, frac))

    img = WATER_LEVEL + (TWINE_LEVEL - WATER_LEVEL) * net * in_x[None, :] * in_y

    if patches:
        Yc = state.depth + t_c[None, :] * ((np.arange(h) - cam.cy)[:, None] / f)
        for k, d, rws, cols, frac in patches:
            tex = _texture(d, X_c[None, cols], Yc[rws, cols], scene.seed * 31 + k)
            sub = img[rws, cols]
            img[rws, cols] = sub * (1.0 - frac) + tex * frac

    rope = np.zeros(w)
    for r in scene.rope_positions:
        rope += _overlap(X0, X1, r - scene.rope_width / 2, r + scene.rope_width / 2)
    rope *= seen
    rc = np.flatnonzero(rope > 0)
    if rc.size:
        rope_frac = np.clip(rope[None, rc].astype(np.float32) * in_y[:, rc], 0.0, 1.0)
        img[:, rc] = img[:, rc] * (1.0 - rope_frac) + ROPE_LEVEL * rope_frac

    for k, d, rws, cols in blobs:
        (ex, ey), (ew, eh) = d.center, d.extent
        inside = np.zeros((rws.stop - rws.start, cols.stop - cols.start))
        for du in (-0.25, 0.25):
            ts, Xs = _column_rays(state, cam, np.arange(cols.start, cols.stop) + du)
            for dv in (-0.25, 0.25):
                Ys = state.depth + ts[None, :] * ((np.arange(rws.start, rws.stop) + dv - cam.cy)[:, None] / f)
                q = ((Xs[None, :] - ex) / (ew / 2)) ** 2 + ((Ys - ey) / (eh / 2)) ** 2
                inside += (q <= 1.0) * 0.25
        sub = img[rws, cols]
        img[rws, cols] = sub * (1.0 - inside) + PLASTIC_LEVEL * inside

    gain = math.exp(-scene.water.attenuation * state.z)
    img = WATER_LEVEL + (img - WATER_LEVEL) * np.float32(gain)
    if scene.water.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, frame])
        noise = rng.standard_normal(img.shape, dtype=np.float32)
        noise *= np.float32(scene.water.noise_sigma)
        img += noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def ground_truth(scene: NetScene, state: VehicleState, cam: CameraIntrinsics) -> GroundTruth:
    visible = []
    xmax, ymax = cam.width - 1.0, cam.height - 1.0
    for d in scene.defects:
        x0, y0, x1, y1 = d.bounds
        u, v, zc = project_points(state, cam, [x0, x1, x0, x1], [y0, y0, y1, y1])
        if np.any(zc <= 0):
            continue
        bx0, bx1 = max(0.0, float(u.min())), min(xmax, float(u.max()))
        by0, by1 = max(0.0, float(v.min())), min(ymax, float(v.max()))
        if bx1 > bx0 and by1 > by0:
            visible.append((d.cls, (bx0, by0, bx1, by1)))
    return GroundTruth(float(state.z), float(state.yaw), tuple(visible))


def mesh_period_px(scene: NetScene, state: VehicleState, cam: CameraIntrinsics) -> float:
    return cam.focal_px * scene.mesh_pitch / state.z


def twine_area_fraction(scene: NetScene) -> float:
    r = scene.twine_width / scene.mesh_pitch
    return 1.0 - (1.0 - r) ** 2


def defect_test_scene(seed: int, n_defects: int | None = None, view_depth: float = 5.0,
                      view_distance: float = 2.0, base: SceneConfig | None = None) -> NetScene:
    """A seeded scene with 1-3 defects placed inside the camera view of a vehicle
    at ``(x=0, z=view_distance, depth=view_depth)``, clear of the ropes."""
    base = base or SceneConfig(defects=())
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4)) if n_defects is None else n_defects
    half_w = 1.35 * view_distance / 2.0
    half_h = 0.95 * view_distance / 2.0
    r0 = base.rope_spacing / 2 + base.rope_width
    defects = []
    tries = 0
    while len(defects) < n:
        tries += 1
        if tries > 1000:
            raise RuntimeError("could not place defects")
        w, h = rng.uniform(0.1, 0.28, size=2)
        x = rng.uniform(-half_w + w / 2, half_w - w / 2)
        y = view_depth + rng.uniform(-half_h + h / 2, half_h - h / 2)
        cand = DefectSpec(DEFECT_CLASSES[rng.integers(4)], (float(x), float(y)), (float(w), float(h)))
        cx0, cy0, cx1, cy1 = cand.bounds
        # keep clear of both ropes
        if any(cx0 - 0.05 < rx + r0 and cx1 + 0.05 > rx - r0 for rx in (-base.rope_spacing / 2, base.rope_spacing / 2)):
            continue
        if any(cx0 - 0.12 < o.bounds[2] and cx1 + 0.12 > o.bounds[0] and cy0 - 0.12 < o.bounds[3] and cy1 + 0.12 > o.bounds[1] for o in defects):
            continue
        defects.append(cand)
    cfg = SceneConfig(
        net_width=base.net_width, net_depth=base.net_depth, mesh_pitch=base.mesh_pitch,
        twine_width=base.twine_width, rope_spacing=base.rope_spacing, rope_width=base.rope_width,
        defects=tuple(defects), water=base.water, seed=seed,
    )
    return build_scene(cfg)
