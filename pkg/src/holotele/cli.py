"""Command line entry point: ``holotele <subcommand> ...``.

Option values resolve as: command-line flag, then environment variable
``HOLOTELE_<NAME>`` (upper case, dashes as underscores), then the
``--config`` file, then the built-in default.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import HoloteleError

log = logging.getLogger("holotele")

# name -> (type, default); every option with a value is listed here
OPTIONS = {
    "seed": (int, 0),
    "out": (str, None),
    # gen
    "object": (str, "box"),
    "marker_sigma": (float, 0.0),
    "depth_sigma": (float, 0.0),
    "pixel_sigma": (float, 0.0),
    "intensity_sigma": (float, 2.0),
    "frames": (int, 10),
    "wand_frames": (int, 100),
    "calib_points": (int, 1500),
    "color_scale": (float, 1.0),
    "motion_radius": (float, 0.3),
    # calibrate
    "wand": (str, None),
    "clouds": (str, None),
    "wand_length": (float, 0.60),
    "wand_tol": (float, 0.005),
    "use_frames": (int, 0),
    "match_dist": (float, 0.01),
    "icp_max_dist": (float, 0.05),
    "color_size": (str, None),
    "depth_size": (str, None),
    # foreground
    "input": (str, None),
    "bg": (str, None),
    "iters": (int, 1),
    "threshold": (float, 25.0),
    "radius": (int, 1),
    "pred": (str, None),
    "gt": (str, None),
    "roi": (str, None),
    "csv": (str, None),
    "f1": (str, "harmonic"),
    # fuse / render
    "seq": (str, None),
    "calib": (str, None),
    "frame": (int, 0),
    "mask_source": (str, "segment"),
    "cameras": (str, ""),
    "layout": (str, "cross"),
    "canvas": (str, "1920x1080"),
    "view_size": (int, 0),
    "splat_radius": (int, 2),
    "orbit_radius": (float, 3.0),
    "fov": (float, 50.0),
    "format": (str, "png"),
    "mirror": (str, "true"),
    # network
    "listen": (str, ":7070"),
    "hub": (str, "127.0.0.1:7070"),
    "window_us": (int, 50_000),
    "timeout_s": (float, 0.0),
    "nodes": (int, 0),
    "camera_id": (int, None),
    "source": (str, None),
    "fps": (float, 0.0),
    "record": (str, None),
    "replay": (str, None),
    "period_us": (int, 100_000),
}


def read_config(path):
    """Parse a ``key = value`` file. ``#`` starts a comment; keys may use dashes."""
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        from .errors import IoFailure

        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.replace("-", "_").lower()] = value
    return cfg


class Settings:
    """Resolved option values with the documented precedence."""

    def __init__(self, args, config=None, environ=None):
        self._args = vars(args)
        self._config = config or {}
        self._env = os.environ if environ is None else environ

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        typ, default = OPTIONS.get(name, (str, None))
        v = self._args.get(name)
        if v is not None:
            return v
        env = self._env.get(f"HOLOTELE_{name.upper()}")
        if env is not None:
            return typ(env)
        if name in self._config:
            return typ(self._config[name])
        return default

    def require(self, name):
        v = getattr(self, name)
        if v is None:
            raise ValueError(f"missing required option --{name.replace('_', '-')}")
        return v


def _flag(p, name, help_text=None, **kw):
    typ = OPTIONS[name][0]
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                   help=help_text, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="holotele", description="Multi-camera 3D telepresence pipeline.")
    parser.add_argument("--config", default=None, help="key = value settings file")
    _flag(parser, "seed", "random seed")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic rig, calibration data and sequences")
    for name in ("out", "object", "marker_sigma", "depth_sigma", "pixel_sigma", "intensity_sigma",
                 "frames", "wand_frames", "calib_points", "color_scale", "motion_radius"):
        _flag(p, name)

    p = sub.add_parser("calibrate", help="calibrate the rig from wand sightings and calibration clouds")
    for name in ("wand", "clouds", "out", "wand_length", "wand_tol", "use_frames", "match_dist", "icp_max_dist",
                 "color_size", "depth_size"):
        _flag(p, name)

    p = sub.add_parser("extract-background", help="temporal median of a frame directory")
    p.add_argument("--in", dest="input", default=None)
    _flag(p, "out")

    p = sub.add_parser("segment", help="foreground masks for a frame directory")
    p.add_argument("--in", dest="input", default=None)
    for name in ("bg", "out", "iters", "threshold", "radius"):
        _flag(p, name)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    for name in ("pred", "gt", "roi", "csv", "f1"):
        _flag(p, name)

    p = sub.add_parser("fuse", help="fuse one frame of every sensor into a reference-frame PLY")
    for name in ("seq", "calib", "frame", "out", "mask_source", "cameras", "threshold", "iters"):
        _flag(p, name)

    p = sub.add_parser("render", help="render fused models into pyramid composites")
    p.add_argument("--model", action="append", default=None, help="PLY model (repeatable)")
    for name in ("calib", "out", "layout", "canvas", "view_size", "splat_radius", "orbit_radius",
                 "fov", "format", "mirror"):
        _flag(p, name)

    p = sub.add_parser("hub", help="receive node clouds, fuse and render")
    for name in ("listen", "calib", "window_us", "timeout_s", "out", "nodes", "canvas", "view_size",
                 "splat_radius", "orbit_radius", "fov", "format", "mirror"):
        _flag(p, name)

    p = sub.add_parser("node", help="stream one sensor's clouds to the hub")
    for name in ("source", "camera_id", "hub", "fps", "mask_source", "threshold", "iters", "record",
                 "replay", "period_us", "calib"):
        _flag(p, name)
    return parser


# ------------------------------------------------------------ helpers


def _parse_canvas(text):
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"canvas must look like 1920x1080, got {text!r}") from None
    return w, h


def _parse_address(text, default_host):
    host, _, port = text.rpartition(":")
    return host or default_host, int(port)


def _truthy(text):
    return str(text).lower() in ("1", "true", "yes", "on")


def _layout_and_views(s, rig):
    from .display import CompositeLayout, ViewConfig

    if s.layout != "cross":
        raise ValueError(f"unknown layout {s.layout!r} (only 'cross' is available)")
    canvas = _parse_canvas(s.canvas)
    size = s.view_size or min(canvas) // 3
    layout = CompositeLayout(canvas=canvas, view_size=size, mirror=_truthy(s.mirror))
    layout.rectangles()
    views = ViewConfig.from_rig(rig, size=size, radius=s.splat_radius, orbit_radius=s.orbit_radius,
                                fov_deg=s.fov)
    return views, layout


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, default=float))


# ------------------------------------------------------------ commands


def cmd_gen(s):
    from .synthetic import SyntheticScene, gen_synthetic

    scene = SyntheticScene(object=s.object, marker_sigma=s.marker_sigma, depth_sigma=s.depth_sigma,
                           pixel_sigma=s.pixel_sigma, intensity_sigma=s.intensity_sigma, seed=s.seed,
                           wand_frames=s.wand_frames, calib_points=s.calib_points, frames=s.frames,
                           color_scale=s.color_scale, motion_radius=s.motion_radius)
    gen_synthetic(scene, s.require("out"))
    _emit({"out": s.out, "frames": s.frames, "object": s.object})


def cmd_calibrate(s):
    from .calibration import CalibrationSession, calibrate_rig, load_calibration_clouds, load_image_sizes
    from .geometry import IcpParams

    session = CalibrationSession.from_csv(s.require("wand"), wand_length=s.wand_length, wand_tol=s.wand_tol)
    if s.use_frames:
        session = session.first_frames(s.use_frames)
    clouds, pixels = load_calibration_clouds(s.require("clouds"))
    sizes = load_image_sizes(s.clouds) or {}
    if s.color_size:
        sizes["color"] = _parse_canvas(s.color_size)
    if s.depth_size:
        sizes["depth"] = _parse_canvas(s.depth_size)
    rig = calibrate_rig(session, clouds, pixels, image_sizes=sizes,
                        icp_params=IcpParams(max_dist=s.icp_max_dist), match_dist=s.match_dist)
    rig.save(s.require("out"))
    _emit({"out": s.out, "rmse": {f"{k}:{cid}": v for (cid, k), v in sorted(rig.rmse.items())}})


def cmd_extract_background(s):
    from .foreground import MASK_SUFFIXES, median_background
    from .imageio import list_frames, read_image, write_image

    files = [p for p in list_frames(s.require("input"), suffix=None) if p.suffix.lower() in MASK_SUFFIXES]
    if not files:
        raise ValueError(f"no images in {s.input}")
    bg = median_background(read_image(p) for p in files)
    write_image(s.require("out"), np.clip(np.rint(bg), 0, 255).astype(np.uint8))
    _emit({"out": s.out, "frames": len(files)})


def cmd_segment(s):
    from .foreground import OpeningRefiner, segment_directory
    from .imageio import read_image

    bg = read_image(s.require("bg"))
    n = segment_directory(s.require("input"), bg, s.require("out"), s.iters, s.threshold,
                          OpeningRefiner(s.radius))
    _emit({"out": s.out, "frames": n})


def cmd_eval(s):
    from .foreground import evaluate_sequence, report_csv, report_table

    rep = evaluate_sequence(s.require("pred"), s.require("gt"), s.roi, s.f1)
    rows = [("sequence", rep.counts, rep.metrics)]
    if s.csv:
        Path(s.csv).write_text(report_csv(rows))
    sys.stderr.write(report_table(rows))
    _emit({"frames": len(rep.frames), **rep.metrics.as_dict(),
           "tp": rep.counts.tp, "fp": rep.counts.fp, "tn": rep.counts.tn, "fn": rep.counts.fn})


def cmd_fuse(s):
    from .calibration import RigCalibration
    from .fusion import fuse
    from .netstream import SensorSource
    from .plyio import write_ply

    seq = Path(s.require("seq"))
    rig = RigCalibration.load(s.calib or seq / "rig.calib.json")
    ids = [int(c) for c in s.cameras.split(",") if c.strip()] or rig.camera_ids
    mask_source = None if s.mask_source == "none" else s.mask_source
    clouds = {}
    for cid in ids:
        src = SensorSource(seq, cid, rig, mask_source, s.threshold, s.iters)
        if s.frame >= len(src):
            from .errors import MissingFrame

            raise MissingFrame(f"camera {cid} has no frame {s.frame}")
        clouds[cid] = src.cloud(s.frame)
    model = fuse(clouds, rig, s.frame)
    write_ply(s.require("out"), model.cloud)
    _emit({"out": s.out, "points": len(model), "cameras": ids})


def cmd_render(s):
    from .calibration import RigCalibration
    from .display import emit_stream
    from .fusion import FusedModel
    from .plyio import read_ply

    if not s.model:
        raise ValueError("missing required option --model")
    rig = RigCalibration.load(s.require("calib"))
    views, layout = _layout_and_views(s, rig)

    def models():
        for i, path in enumerate(s.model):
            cloud = read_ply(path)
            yield FusedModel(cloud.__class__(cloud.points, cloud.colors, "reference"), 0, i)

    rep = emit_stream(models(), views, layout, s.require("out"), s.format)
    _emit({"out": s.out, "frames": rep.frames, "fps": rep.fps})


def cmd_hub(s):
    from .calibration import RigCalibration
    from .netstream import run_hub

    rig = RigCalibration.load(s.require("calib"))
    views, layout = _layout_and_views(s, rig)
    host, port = _parse_address(s.listen, "0.0.0.0")
    stats = asyncio.run(run_hub(rig, host, port, nodes=s.nodes or None, view_config=views, layout=layout,
                                window_us=s.window_us, timeout_s=s.timeout_s or None, out_dir=s.out,
                                fmt=s.format, keep=None))
    _emit({"groups": stats.groups, "dropped": stats.dropped, "fps": stats.fps,
           "protocol_errors": stats.protocol_errors})


def cmd_node(s):
    from .calibration import RigCalibration
    from .netstream import SensorSource, replay_node, run_node, save_recording

    cid = s.require("camera_id")
    if s.replay:
        host, port = _parse_address(s.hub, "127.0.0.1")
        stats = asyncio.run(replay_node(s.replay, cid, host, port, s.fps or None))
    else:
        seq = Path(s.require("source"))
        rig = RigCalibration.load(s.calib or seq / "rig.calib.json")
        mask_source = None if s.mask_source == "none" else s.mask_source
        src = SensorSource(seq, cid, rig, mask_source, s.threshold, s.iters, s.period_us)
        if s.record:
            save_recording(s.record, src.packets())
            _emit({"recorded": s.record, "frames": len(src)})
            return
        host, port = _parse_address(s.hub, "127.0.0.1")
        stats = asyncio.run(run_node(src, cid, host, port, s.fps or None))
    _emit({"frames": stats.frames, "points": stats.points, "reconnects": stats.reconnects})


COMMANDS = {
    "gen": cmd_gen, "calibrate": cmd_calibrate, "extract-background": cmd_extract_background,
    "segment": cmd_segment, "eval": cmd_eval, "fuse": cmd_fuse, "render": cmd_render,
    "hub": cmd_hub, "node": cmd_node,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = read_config(args.config) if args.config else {}
        COMMANDS[args.command](Settings(args, config))
    except KeyboardInterrupt:
        return 130
    except (HoloteleError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "stage": args.command, "message": str(exc)}
        stage = getattr(exc, "stage", None)
        if stage:
            err["substage"] = stage
        sys.stderr.write(json.dumps(err) + "\n")
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
