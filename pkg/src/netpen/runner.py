"""End-to-end inspection missions: simulator on the vehicle side, autonomy topside.

Every tick the vehicle renders a frame and ships it with its telemetry over
the link; the topside answers with a status telemetry record, an optional
detection report and the velocity command for the tick.  The in-memory link
runs the topside in a thread, the socket link in a separate process.  Both
produce the same log for the same configuration.
"""
from __future__ import annotations

import csv
import json
import multiprocessing as mp
import socket
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import link as ln
from .control import GainConfig, MissionLimits, MissionState, PidBank, TRANSITIONS, mission_step, servo_command
from .detect import DetectorConfig, detect_frame, iou, nms
from .imageio import annotate, write_pgm, write_ppm
from .records import ControlCommand, Detection, Phase, Telemetry
from .scene import (CameraIntrinsics, DisturbanceParams, SceneConfig, VehicleParams, VehicleState,
                    build_scene, defect_test_scene, ground_truth, render_frame, step_vehicle)
from .vision import VisionConfig, perceive


@dataclass(frozen=True)
class StartState:
    x: float = 0.0
    z: float = 3.0
    depth: float = 0.5
    yaw: float = 0.0


@dataclass(frozen=True)
class MissionSettings:
    dt: float = 0.1
    max_duration: float = 150.0
    target_distance: float = 2.0
    descent_rate: float = 0.1
    bottom_depth: float = 9.75
    acquire_frames: int = 5
    lost_frames: int = 5
    abort_frames: int = 50
    detect_every: int = 2  # ticks per detector run (0 disables detection)
    yaw_every: int = 5  # ticks per vision yaw update
    settle_tolerance: float = 0.1


@dataclass(frozen=True)
class DetectorSettings:
    kind: str = "classical"  # or "external"
    endpoint: str | None = None  # host:port of an external detector service
    nms_iou: float = 0.5
    eval_iou: float = 0.3
    timeout: float = 10.0
    classical: DetectorConfig = DetectorConfig()


@dataclass(frozen=True)
class LinkSettings:
    mode: str = "mem"  # or "tcp"
    host: str = "127.0.0.1"
    port: int = 0
    heartbeat_timeout: float = 30.0


@dataclass(frozen=True)
class MissionConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraIntrinsics = CameraIntrinsics()
    vehicle: VehicleParams = VehicleParams()
    start: StartState = StartState()
    disturbance: DisturbanceParams = DisturbanceParams()
    vision: VisionConfig = VisionConfig()
    gains: GainConfig = GainConfig()
    mission: MissionSettings = MissionSettings()
    detector: DetectorSettings = DetectorSettings()
    link: LinkSettings = LinkSettings()
    seed: int = 7
    out_dir: str | None = None
    max_snapshots: int = 8

    def __post_init__(self):
        m = self.mission
        if not 0 < m.dt <= 0.5:
            raise ValueError("mission.dt must be in (0, 0.5]")
        if m.max_duration <= 0:
            raise ValueError("mission.max_duration must be positive")
        if m.detect_every < 0 or m.yaw_every < 1:
            raise ValueError("detect_every must be >= 0 and yaw_every >= 1")
        if self.detector.kind not in ("classical", "external"):
            raise ValueError(f"unknown detector {self.detector.kind!r}")
        if self.detector.kind == "external":
            ln.parse_endpoint(self.detector.endpoint or "")
        if self.link.mode not in ("mem", "tcp"):
            raise ValueError(f"unknown link mode {self.link.mode!r}")


@dataclass
class MissionReport:
    records: list
    summary: dict
    snapshots: dict = field(default_factory=dict)  # frame -> rendered image
    outcome: str = ""


# -- topside ------------------------------------------------------------------

class Topside:
    """Vision, detection, mission logic and servoing for one mission."""

    def __init__(self, cfg: MissionConfig, detector=None):
        self.cfg = cfg
        m = cfg.mission
        self.mission = MissionState(target_distance=m.target_distance, descent_rate=m.descent_rate,
                                    bottom_depth=m.bottom_depth)
        self.limits = MissionLimits(m.acquire_frames, m.lost_frames, m.abort_frames)
        self.pids = PidBank.from_gains(cfg.gains)
        self.yaw = None
        self.detector = detector or (lambda img: detect_frame(img, cfg.detector.classical))

    def on_frame(self, video: ln.VideoFrame, telem: Telemetry):
        cfg, m = self.cfg, self.cfg.mission
        k = video.frame_id
        p = perceive(video.pixels, cfg.camera, cfg.scene.rope_spacing, cfg.vision, k,
                     with_yaw=(k % m.yaw_every == 0))
        if k % m.yaw_every == 0:
            self.yaw = p.yaw_est
        obs = p.observation
        if obs is not None:
            obs = replace(obs, yaw_est=self.yaw)
        replies = []
        if m.detect_every and k % m.detect_every == 0:
            dets = nms(self.detector(video.pixels), cfg.detector.nms_iou)
            replies.append(ln.DetectionReport(k, tuple(dets)))
        self.mission = mission_step(self.mission, obs, telem, self.limits)
        if self.mission.phase in (Phase.DONE, Phase.ABORT):
            cmd = ControlCommand()
        else:
            cmd, self.pids = servo_command(obs, self.mission, cfg.gains, self.pids, m.dt, cfg.camera)
        est = None if obs is None else obs.distance_est
        status = Telemetry(k, telem.depth, telem.heading, est, self.mission.phase)
        return [status] + replies + [cmd]


def _make_detector(cfg: MissionConfig):
    """Detector callable and a closer; external detectors talk over their own link."""
    if cfg.detector.kind == "classical":
        return None, lambda: None
    host, port = ln.parse_endpoint(cfg.detector.endpoint)
    session = ln.LinkSession(ln.SocketTransport.connect(host, port))
    counter = iter(range(1 << 31))

    def detect(img):
        return ln.request_detections(session, next(counter), img, cfg.detector.timeout)
    return detect, session.close


def _run_topside(cfg: MissionConfig, transport):
    detector, close = _make_detector(cfg)
    try:
        return ln.run_session("topside", transport, Topside(cfg, detector), cfg.link.heartbeat_timeout)
    finally:
        close()


def _topside_process(cfg: MissionConfig, host, port):
    _run_topside(cfg, ln.SocketTransport.connect(host, port))


# -- vehicle ------------------------------------------------------------------

class Vehicle:
    """Simulated vehicle: renders, reports, applies commands and keeps the log."""

    def __init__(self, cfg: MissionConfig):
        self.cfg = cfg
        self.scene = build_scene(replace(cfg.scene, seed=cfg.seed))
        s = cfg.start
        self.state = VehicleState(x=s.x, z=s.z, depth=s.depth, yaw=s.yaw)
        self.k = 0
        self.t = 0.0
        self.phase = Phase.ACQUIRE
        self.records = []
        self.snapshots = {}
        self._img = None
        self._status = None
        self._dets = None
        self.finished = False

    def produce(self):
        if self.finished:
            return None
        self._img = render_frame(self.scene, self.state, self.cfg.camera, self.k)
        self._status, self._dets = None, None
        telem = Telemetry(self.k, self.state.depth, self.state.yaw, None, self.phase)
        return ln.VideoFrame(self.k, self._img), telem

    def consume(self, msg):
        if isinstance(msg, Telemetry):
            self._status = msg
        elif isinstance(msg, ln.DetectionReport):
            self._dets = list(msg.detections)
        elif isinstance(msg, ControlCommand):
            self._apply(msg)

    def _apply(self, cmd):
        cfg = self.cfg
        st = self.state
        status = self._status
        if status is None or status.frame_id != self.k:
            raise ln.SessionAbort(f"no status for frame {self.k}")
        self.phase = status.phase
        truth = ground_truth(self.scene, st, cfg.camera)
        rec = {
            "frame": self.k,
            "t": round(self.t, 6),
            "x": st.x,
            "depth": st.depth,
            "true_distance": truth.true_distance,
            "true_yaw": truth.true_yaw,
            "est_distance": status.est_distance,
            "phase": status.phase.name,
            "command": list(cmd.as_tuple()),
            "detections": None if self._dets is None else [d.to_dict() for d in self._dets],
            "truth": [{"cls": c, "bbox": list(b)} for c, b in truth.visible_defects],
        }
        self.records.append(rec)
        if self._dets and len(self.snapshots) < cfg.max_snapshots:
            classes = {d.cls for d in self._dets}
            seen = {d["cls"] for r in self.records[:-1] if r["detections"] for d in r["detections"]}
            if classes - seen:
                self.snapshots[self.k] = self._img
        self.k += 1
        if status.phase in (Phase.DONE, Phase.ABORT) or self.k * cfg.mission.dt >= cfg.mission.max_duration - 1e-9:
            self.finished = True
            return
        self.state = step_vehicle(st, cmd, cfg.disturbance, cfg.mission.dt, self.t, cfg.vehicle)
        self.t = self.k * cfg.mission.dt


def run_mission(cfg: MissionConfig) -> MissionReport:
    """Fly one mission; deterministic given the configuration and seed."""
    vehicle = Vehicle(cfg)
    if cfg.link.mode == "mem":
        a, b = ln.memory_pair()
        box = {}
        th = threading.Thread(target=lambda: box.setdefault("out", _run_topside(cfg, b)), daemon=True)
        th.start()
        outcome = ln.run_session("vehicle", a, vehicle, cfg.link.heartbeat_timeout)
        th.join(cfg.link.heartbeat_timeout)
    else:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((cfg.link.host, cfg.link.port))
        srv.listen(1)
        host, port = srv.getsockname()[:2]
        proc = mp.get_context("spawn").Process(target=_topside_process, args=(cfg, host, port), daemon=True)
        proc.start()
        try:
            srv.settimeout(max(cfg.link.heartbeat_timeout, 30.0))
            conn, _ = srv.accept()
        except OSError:
            proc.terminate()
            raise
        finally:
            srv.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        outcome = ln.run_session("vehicle", ln.SocketTransport(conn), vehicle, cfg.link.heartbeat_timeout)
        proc.join(cfg.link.heartbeat_timeout)
        if proc.is_alive():
            proc.terminate()
    records = vehicle.records
    if outcome.status != "completed" and records and records[-1]["phase"] not in ("DONE", "ABORT"):
        # the link failed mid-mission
        records[-1] = dict(records[-1], phase="ABORT")
    summary = summarize(records, cfg)
    summary["link_outcome"] = outcome.status
    return MissionReport(records, summary, vehicle.snapshots, outcome.status)


# -- evaluation ---------------------------------------------------------------

def _as_det(d):
    return d if isinstance(d, Detection) else Detection.from_dict(d)


def _as_truth(t):
    if isinstance(t, dict):
        return t["cls"], tuple(t["bbox"])
    return t[0], tuple(t[1])


def match_frame(dets, truths, iou_threshold):
    """Greedy matching, highest confidence first; returns the number of matches."""
    dets = sorted((_as_det(d) for d in dets), key=lambda d: (-d.confidence, tuple(d.bbox)))
    truths = [_as_truth(t) for t in truths]
    used = [False] * len(truths)
    hits = 0
    for d in dets:
        best, best_iou = -1, iou_threshold
        for i, (c, b) in enumerate(truths):
            if used[i] or c != d.cls:
                continue
            v = iou(d.bbox, b)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = i, v
        if best >= 0:
            used[best] = True
            hits += 1
    return hits


def evaluate_detections(dets, truth, iou_threshold=0.3):
    """Precision and recall over aligned per-frame sequences.

    ``truth`` items may be GroundTruth objects or lists of (cls, bbox).  With
    no detections precision is 1; with no truth boxes recall is 1.
    """
    if len(dets) != len(truth):
        raise ValueError("detection and truth sequences must be aligned")
    n_det = n_true = hits = 0
    for d, t in zip(dets, truth):
        t = t.visible_defects if hasattr(t, "visible_defects") else t
        n_det += len(d)
        n_true += len(t)
        hits += match_frame(d, t, iou_threshold)
    precision = hits / n_det if n_det else 1.0
    recall = hits / n_true if n_true else 1.0
    return precision, recall


def settling_time(times, errors, tol):
    """First time after which every error stays within ``tol`` (None if never)."""
    errors = np.abs(np.asarray(errors, float))
    bad = np.flatnonzero(~(errors <= tol))
    if len(bad) == 0:
        return float(times[0]) if len(times) else None
    if bad[-1] + 1 >= len(times):
        return None
    return float(times[bad[-1] + 1])


def summarize(records, cfg: MissionConfig):
    m = cfg.mission
    return summarize_records(records, m.target_distance, m.bottom_depth, m.settle_tolerance, cfg.detector.eval_iou)


def summarize_records(records, target=2.0, bottom_depth=9.75, tol=0.1, iou_threshold=0.3):
    t = np.array([r["t"] for r in records], float)
    dist = np.array([r["true_distance"] for r in records], float)
    est = np.array([np.nan if r["est_distance"] is None else r["est_distance"] for r in records], float)
    err = dist - target
    ts = settling_time(t, err, tol) if len(records) else None
    after = t >= ts if ts is not None else np.zeros(len(t), bool)
    max_depth = max((r["depth"] for r in records), default=0.0)
    coverage = 0.0 if bottom_depth <= 0 else float(min(1.0, max(0.0, max_depth / bottom_depth)))
    frames = [r for r in records if r["detections"] is not None]
    precision, recall = evaluate_detections([r["detections"] for r in frames],
                                            [r["truth"] for r in frames], iou_threshold)
    have = ~np.isnan(est)
    phases = [Phase[r["phase"]] for r in records]
    legal = all(b in TRANSITIONS[a] for a, b in zip(phases, phases[1:]))
    return {
        "ticks": len(records),
        "duration": float(t[-1]) if len(t) else 0.0,
        "final_phase": records[-1]["phase"] if records else "ACQUIRE",
        "settling_time": ts,
        "rmse_after_settling": float(np.sqrt(np.mean(err[after] ** 2))) if after.any() else None,
        "max_error_after_settling": float(np.abs(err[after]).max()) if after.any() else None,
        "estimate_rmse": float(np.sqrt(np.mean((est[have] - dist[have]) ** 2))) if have.any() else None,
        "coverage": coverage,
        "max_depth": float(max_depth),
        "detection_frames": len(frames),
        "precision": precision,
        "recall": recall,
        "iou_threshold": iou_threshold,
        "legal_transitions": legal,
        "conventions": "precision=1 with no detections; recall=1 with no truth boxes",
    }


# -- artifacts ----------------------------------------------------------------

def write_log(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def export_artifacts(report: MissionReport, out_dir):
    """Write the mission log, summary, annotated snapshots and the distance table."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "mission_log.jsonl", out / "summary.json", out / "distance.csv"]
        write_log(report.records, files[0])
        files[1].write_text(json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
        with open(files[2], "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "true_distance", "est_distance", "phase"])
            for r in report.records:
                est = "" if r["est_distance"] is None else repr(r["est_distance"])
                w.writerow([repr(r["t"]), repr(r["true_distance"]), est, r["phase"]])
        by_frame = {r["frame"]: r for r in report.records}
        for k in sorted(report.snapshots):
            dets = [Detection.from_dict(d) for d in by_frame[k]["detections"] or []]
            path = out / f"frame_{k:05d}.ppm"
            write_ppm(path, annotate(report.snapshots[k], dets, thickness=2))
            files.append(path)
    except OSError as e:
        raise OSError(f"cannot write artifacts to {out}: {e}") from e
    return files


def config_dict(cfg: MissionConfig):
    return asdict(cfg)


def render_fixtures(out_dir, seeds=range(5)):
    """Golden frames: range sweep, yaw sweep and seeded defect scenes, plus their truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cam = CameraIntrinsics()
    index = []

    def emit(name, scene, state, frame):
        img = render_frame(scene, state, cam, frame)
        write_pgm(out / f"{name}.pgm", img)
        gt = ground_truth(scene, state, cam)
        index.append({"file": f"{name}.pgm", "true_distance": gt.true_distance, "true_yaw": gt.true_yaw,
                      "depth": state.depth, "scene_seed": scene.seed,
                      "defects": [{"cls": c, "bbox": list(b)} for c, b in gt.visible_defects]})

    plain = build_scene(SceneConfig(defects=()))
    for z in (1.0, 1.5, 2.0, 3.0, 4.0):
        emit(f"range_{int(z * 100):03d}cm", plain, VehicleState(z=z, depth=3.0), 0)
    for yaw in (-0.2, 0.0, 0.2):
        emit(f"yaw_{int(round(yaw * 1000)):+04d}mrad", plain, VehicleState(z=2.0, depth=3.0, yaw=yaw), 0)
    for seed in seeds:
        emit(f"defects_seed{seed:02d}", defect_test_scene(seed), VehicleState(z=2.0, depth=5.0), 0)
    (out / "fixtures.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return [out / e["file"] for e in index] + [out / "fixtures.json"]
