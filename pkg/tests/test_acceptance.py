"""End-to-end acceptance checks; each prints a single CRITERION line."""
import dataclasses
import json
import math
import time

import numpy as np
import pytest

from conftest import record_criterion
from netpen import link as ln
from netpen.detect import AnchorSpec, RawHead, decode_head, detect_frame, nms
from netpen.records import DEFECT_CLASSES, Detection
from netpen.runner import MissionConfig, evaluate_detections, run_mission, settling_time
from netpen.scene import (CameraIntrinsics, DisturbanceParams, SceneConfig, VehicleState, build_scene,
                          defect_test_scene, ground_truth, render_frame)
from netpen.vision import hough_accumulator, hough_lines, perceive
from oracles import crc32_bitwise, decode_scalar, hough_brute, nms_brute
from test_link import random_message

CAM = CameraIntrinsics()


def timed(cfg):
    t0 = time.perf_counter()
    rep = run_mission(cfg)
    return rep, time.perf_counter() - t0


def log_bytes(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode()


@pytest.fixture(scope="module")
def default_run():
    return timed(MissionConfig())


def _errors(rep):
    t = np.array([r["t"] for r in rep.records])
    err = np.array([r["true_distance"] for r in rep.records]) - 2.0
    return t, err


def test_criterion_1_distance_tracking(default_run):
    rep, wall = default_run
    t, err = _errors(rep)
    ts = settling_time(t, err, 0.1)
    calm = ts is not None and ts <= 30.0 and np.abs(err[t >= ts]).max() <= 0.1

    drep, dwall = timed(dataclasses.replace(MissionConfig(), disturbance=DisturbanceParams(amplitude_z=0.1, period=8.0)))
    dt_, derr = _errors(drep)
    inside = np.flatnonzero(np.abs(derr) <= 0.1)
    t_in = dt_[inside[0]] if len(inside) else math.inf
    dmax = np.abs(derr[dt_ >= t_in]).max() if len(inside) else math.inf
    rough = t_in <= 30.0 and dmax <= 0.25 and drep.summary["final_phase"] == "DONE"
    ok = calm and rough and wall <= 60.0 and dwall <= 60.0
    record_criterion(1, ok, f"settle {ts} s, hold max {np.abs(err[t >= ts]).max():.3f} m; disturbed: within 0.1 m "
                            f"at {t_in:.1f} s, max {dmax:.3f} m; wall {wall:.1f}/{dwall:.1f} s")
    assert ok


def test_criterion_2_triangulation():
    sc = build_scene(SceneConfig(defects=()))
    worst = 0.0
    for z in (1.0, 1.5, 2.0, 3.0, 4.0):
        for k in range(20):
            p = perceive(render_frame(sc, VehicleState(z=z, depth=3.0 + 0.2 * k), CAM, k), CAM, sc.rope_spacing,
                         with_yaw=False)
            est = p.observation.distance_est if p.observation is not None else math.inf
            worst = max(worst, abs(est - z) / z)
    ok = worst < 0.03
    record_criterion(2, ok, f"worst relative range error {100 * worst:.2f}% over 100 frames")
    assert ok


def test_criterion_3_yaw():
    sc = build_scene(SceneConfig(defects=()))
    devs = []
    for yaw in (-0.2, 0.0, 0.2):
        ests = []
        for k in range(20):
            e = perceive(render_frame(sc, VehicleState(z=2.0, depth=3.0 + 0.2 * k, yaw=yaw), CAM, k), CAM,
                         sc.rope_spacing).yaw_est
            ests.append(math.inf if e is None else e)
        devs.append(abs(float(np.median(ests)) - yaw))
    ok = max(devs) <= 0.05
    record_criterion(3, ok, "median yaw error " + ", ".join(f"{d:.4f}" for d in devs) + " rad")
    assert ok


def test_criterion_4_detection():
    state = VehicleState(z=2.0, depth=5.0)
    dets, truths = [], []
    for seed in range(20):
        sc = defect_test_scene(seed)
        gt = ground_truth(sc, state, CAM)
        assert 1 <= len(gt.visible_defects) <= 3
        dets.append(detect_frame(render_frame(sc, state, CAM, 0)))
        truths.append(gt)
    precision, recall = evaluate_detections(dets, truths, 0.3)
    clean = build_scene(SceneConfig(defects=()))
    false_pos = 0
    for k in range(100):
        s = VehicleState(z=float(np.random.default_rng(k).uniform(1.5, 3.0)), depth=1.0 + 0.08 * k, x=0.3 * math.sin(k))
        false_pos += len(detect_frame(render_frame(clean, s, CAM, k)))
    ok = precision >= 0.8 and recall >= 0.8 and false_pos == 0
    record_criterion(4, ok, f"precision {precision:.3f}, recall {recall:.3f} at IoU 0.3; "
                            f"{false_pos} detections on 100 clean frames")
    assert ok


def test_criterion_5_oracles():
    fails = []
    for case in range(50):
        rng = np.random.default_rng(case)
        h, w = rng.integers(4, 65, size=2)
        e = rng.random((h, w)) < rng.uniform(0.005, 0.08)
        rr, tr = float(rng.choice([1.0, 2.0])), float(rng.choice([math.pi / 90, 0.05]))
        acc, peaks = hough_brute(e, rr, tr, 2)
        if not np.array_equal(hough_accumulator(e, rr, tr).full(), acc) or \
                [(l.votes, l.theta, l.rho) for l in hough_lines(e, rr, tr, 2)] != peaks:
            fails.append(f"hough {case}")
    for case in range(100):
        rng = np.random.default_rng(5000 + case)
        items = []
        for _ in range(int(rng.integers(0, 60))):
            x, y = rng.uniform(0, 100, 2)
            items.append((str(rng.choice(DEFECT_CLASSES)), (x, y, x + rng.uniform(2, 40), y + rng.uniform(2, 40)),
                          float(rng.uniform())))
        thr = float(rng.uniform(0.1, 0.9))
        got = {(d.cls, d.bbox, d.confidence) for d in nms([Detection(*i) for i in items], thr)}
        if got != {(c, tuple(b), p) for c, b, p in nms_brute(items, thr)}:
            fails.append(f"nms {case}")
    worst = 0.0
    for case in range(20):
        rng = np.random.default_rng(9000 + case)
        anchors = tuple((float(a), float(b)) for a, b in rng.uniform(4, 64, (2, 2)))
        t = rng.normal(0, 2, (3, 4, 2, 9))
        got = decode_head(RawHead(t), AnchorSpec(anchors, 16.0), 0.1)
        ref = decode_scalar(t, anchors, 16.0, 0.1, DEFECT_CLASSES)
        if len(got) != len(ref) or any(d.cls != c for d, (c, _, _) in zip(got, ref)):
            fails.append(f"decode {case}")
            continue
        for d, (_, b, p) in zip(got, ref):
            worst = max(worst, float(np.max(np.abs(np.subtract(d.bbox, b)))), abs(d.confidence - p))
    if worst >= 1e-6:
        fails.append(f"decode delta {worst:g}")
    if not (crc32_bitwise(b"123456789") == ln.crc32(b"123456789") == 0xCBF43926):
        fails.append("crc")
    ok = not fails
    record_criterion(5, ok, "hough 50/nms 100/decode 20 cases and CRC check value agree with oracles"
                     if ok else "mismatches: " + ", ".join(fails[:5]))
    assert ok


def test_criterion_6_protocol():
    rng = np.random.default_rng(6)
    msgs = [random_message(rng) for _ in range(10_000)]
    frames = [ln.encode_message(m) for m in msgs]
    round_trip = sum(ln.decode_message(f) == m for f, m in zip(frames, msgs))
    accepted = 0
    for k in range(1000):
        f = bytearray(frames[k])
        bit = int(rng.integers(len(f) * 8))
        f[bit // 8] ^= 1 << (bit % 8)
        accepted += bool(ln.decode_stream(bytes(f))[0])
    data = b"".join(frames[:2000])
    whole = ln.decode_stream(data)[0]
    chunked = all(ln.decode_stream(data, c)[0] == whole for c in (1, 5, 64, 4096))
    ok = round_trip == 10_000 and accepted == 0 and chunked and whole == msgs[:2000]
    record_criterion(6, ok, f"{round_trip}/10000 round trips, {accepted}/1000 corrupted frames accepted, "
                            f"chunked delivery {'identical' if chunked else 'differs'}")
    assert ok


def test_criterion_7_mission_completion(default_run):
    rep, _ = default_run
    again = run_mission(MissionConfig())
    tcp = run_mission(dataclasses.replace(MissionConfig(), link=dataclasses.replace(MissionConfig().link, mode="tcp")))
    a, b, c = log_bytes(rep.records), log_bytes(again.records), log_bytes(tcp.records)
    s = rep.summary
    ok = s["final_phase"] == "DONE" and s["coverage"] >= 0.95 and a == b == c and tcp.outcome == "completed"
    record_criterion(7, ok, f"{s['final_phase']} with coverage {s['coverage']:.3f}; logs of two in-memory runs and "
                            f"one socket run {'byte-identical' if a == b == c else 'differ'} ({len(a)} bytes)")
    assert ok


def test_criterion_8_non_reproducibility_note():
    record_criterion(8, True, "the 94.48% and 88.5% detection scores come from earlier learned detectors and are "
                              "not targets here; learned-detector accuracy is out of scope")
