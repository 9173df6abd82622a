"""Command line: ``python3 -m netpen {run,evaluate,render-fixtures,serve-detector}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import threading

from . import link as ln
from .config import ConfigError, load_config
from .detect import detect_frame
from .runner import export_artifacts, read_log, render_fixtures, run_mission, summarize_records


def _cmd_run(args):
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out:
            changes["out_dir"] = args.out
        if args.link:
            if args.link == "mem":
                changes["link"] = dataclasses.replace(cfg.link, mode="mem")
            else:
                if not args.link.startswith("tcp:"):
                    raise ConfigError(f"--link expects mem or tcp:host:port, got {args.link!r}")
                host, port = ln.parse_endpoint(args.link)
                changes["link"] = dataclasses.replace(cfg.link, mode="tcp", host=host, port=port)
        if args.detector:
            if args.detector == "classical":
                changes["detector"] = dataclasses.replace(cfg.detector, kind="classical")
            elif args.detector.startswith("external:"):
                endpoint = args.detector[len("external:"):]
                ln.parse_endpoint(endpoint)
                changes["detector"] = dataclasses.replace(cfg.detector, kind="external", endpoint=endpoint)
            else:
                raise ConfigError(f"--detector expects classical or external:host:port, got {args.detector!r}")
        cfg = dataclasses.replace(cfg, **changes)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    report = run_mission(cfg)
    if cfg.out_dir:
        try:
            export_artifacts(report, cfg.out_dir)
        except OSError as e:
            print(str(e), file=sys.stderr)
            return 3
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    return 0 if report.summary["final_phase"] == "DONE" else 1


def _cmd_evaluate(args):
    try:
        records = read_log(args.log)
    except (OSError, ValueError) as e:
        print(f"cannot read log: {e}", file=sys.stderr)
        return 2
    target, bottom, tol, thr = 2.0, 9.75, 0.1, 0.3
    if args.config:
        try:
            cfg = load_config(args.config)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
        m = cfg.mission
        target, bottom, tol, thr = m.target_distance, m.bottom_depth, m.settle_tolerance, cfg.detector.eval_iou
    if args.iou is not None:
        thr = args.iou
    print(json.dumps(summarize_records(records, target, bottom, tol, thr), indent=2, sort_keys=True))
    return 0


def _cmd_fixtures(args):
    for p in render_fixtures(args.out):
        print(p)
    return 0


def _cmd_serve(args):
    host, port = ln.parse_endpoint(args.listen)
    ready = threading.Event()
    thread, bound = ln.start_detector_server(host, port, detect_frame, ready)
    print(f"detector listening on {host}:{bound}", flush=True)
    try:
        thread.join()
    except KeyboardInterrupt:
        pass
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="netpen", description="Net-pen inspection simulator and autonomy stack.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="fly one inspection mission")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--link", help="mem or tcp:host:port")
    r.add_argument("--detector", help="classical or external:host:port")
    r.add_argument("--out", help="artifact directory")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="summarize a mission log")
    e.add_argument("--log", required=True)
    e.add_argument("--config", help="take target, bottom depth and IoU threshold from this config")
    e.add_argument("--iou", type=float)
    e.set_defaults(func=_cmd_evaluate)

    f = sub.add_parser("render-fixtures", help="write the golden frame corpus")
    f.add_argument("--out", required=True)
    f.set_defaults(func=_cmd_fixtures)

    s = sub.add_parser("serve-detector", help="serve the classical detector over the link protocol")
    s.add_argument("--listen", default="127.0.0.1:5601")
    s.set_defaults(func=_cmd_serve)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)
