"""Command-line entry points.

Every subcommand accepts the global flags ``--seed``, ``--config`` (flat
key-value, JSON or YAML file) and ``--out-dir``, either before or after the
subcommand name.  Values given on the command line win over the config file.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .core import PROXIMAL_LAYOUT, DISTAL_LAYOUT, GelHandError, MarkerLayout, TactileFrame
from . import forces, io as _io, kinematics as kin, multimodal, photometric, pipeline, stream, tracking


def _frames_from(path, sensor_id=0):
    """Tactile frames from a .gsf recording or a single PPM image."""
    path = Path(path)
    if path.suffix.lower() == ".gsf":
        return [stream.to_object(f) for f in stream.read_frames(path) if f.fmt == stream.RGB888]
    return [TactileFrame.from_image(_io.read_ppm(path), sensor_id)]


def _layout(spec, sensor_id=0):
    if spec is None:
        return pipeline.SENSOR_LAYOUTS.get(sensor_id, PROXIMAL_LAYOUT)
    if spec == "proximal":
        return PROXIMAL_LAYOUT
    if spec == "distal":
        return DISTAL_LAYOUT
    return MarkerLayout.from_config(_io.load_structured(spec))


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> dict:
    return _io.load_structured(args.config) if args.config else {}


def cmd_simulate(args):
    scene = _config(args)
    if args.seed is not None:
        scene["seed"] = args.seed
    paths = pipeline.simulate(scene, _out(args), seed=args.seed or 0)
    for p in paths:
        print(p)
    return 0


def cmd_reconstruct(args):
    cfg = _config(args)
    rig = photometric.LightRig.from_config(cfg)
    out = _out(args)
    for frame in _frames_from(args.input, args.sensor_id):
        layout = _layout(args.layout, frame.sensor_id)
        mm = args.mm_per_px or 1.0 / layout.px_per_mm
        mask = tracking.marker_mask(frame) if not args.no_mask else None
        hmap = photometric.reconstruct(frame, rig, mm, mask)
        path = out / f"height_s{frame.sensor_id}_{frame.timestamp}.{args.format}"
        photometric.export_heightmap(hmap, path, floor=args.floor if args.format == "ply" else None)
        print(path)
    return 0


def cmd_track(args):
    out = _out(args)
    for frame in _frames_from(args.input, args.sensor_id):
        layout = _layout(args.layout, frame.sensor_id)
        blobs = tracking.detect_blobs(frame, args.dark_threshold)
        match = tracking.match_markers(blobs, layout, max_missing=args.max_missing)
        path = out / f"flow_s{frame.sensor_id}_{frame.timestamp}.csv"
        tracking.write_flow_csv(path, match)
        print(f"{path} detected={match.detected} interpolated={match.interpolated} "
              f"spurious={match.spurious} cost={match.cost:.6g}")
    return 0


def cmd_classify(args):
    layout = _layout(args.layout) if args.layout else None
    flow = tracking.read_flow_csv(args.input, layout)
    summary = forces.classify(flow, args.noise_floor)
    path = _out(args) / (Path(args.input).stem + "_forces.json")
    path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{path} regime={summary.regime}")
    return 0


def cmd_audio(args):
    cfg = _config(args)
    table = multimodal.FrequencyTable.from_config(cfg)
    clip = multimodal.read_wav(args.input)
    events = multimodal.acoustic_events(clip, table, args.energy_ratio, args.max_dist_hz)
    path = _out(args) / (Path(args.input).stem + "_events.jsonl")
    multimodal.write_events(path, events)
    for e in events:
        print(json.dumps(e.to_dict(), sort_keys=True))
    return 0


def cmd_fuse(args):
    cfg = _config(args)
    geom = kin.HandGeometry.from_config({k: v for k, v in cfg.items() if k in kin.HandGeometry.__dataclass_fields__})
    q = _io.parse_floats(args.q_deg) if args.q_deg else _io.parse_floats(cfg.get("q_deg", "0 0 0 0"))
    fk = kin.forward_kinematics(geom, kin.HandState.from_degrees(*q))
    poses = {p.sensor_id: p for p in fk.poses}
    rig = photometric.LightRig.from_config(cfg)
    clouds = []
    for path in args.inputs:
        for frame in _frames_from(path):
            if frame.sensor_id not in poses:
                continue
            mm = 1.0 / _layout(None, frame.sensor_id).px_per_mm
            hmap = photometric.reconstruct(frame, rig, mm, tracking.marker_mask(frame))
            clouds.append(kin.project_heightmap(poses[frame.sensor_id], hmap, args.floor))
    cloud = kin.merge_clouds(clouds)
    path = _out(args) / "merged.ply"
    cloud.write_ply(path)
    print(f"{path} points={len(cloud)}")
    return 0


def cmd_serve(args):
    frames = stream.read_frames(args.input)
    with stream.source_serve(frames, args.rate, args.port, args.host) as src:
        print(f"serving {len(frames)} frames on {src.host}:{src.port} at {args.rate:g} Hz", flush=True)
        try:
            if args.duration is not None:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            pass
    return 0


def cmd_aggregate(args):
    endpoints = []
    for e in args.endpoints:
        host, port = e.rsplit(":", 1)
        endpoints.append((host, int(port)))
    agg = stream.aggregate(endpoints, args.window_ms,
                           on_disconnect=lambda d: print(f"warning: {d}", file=sys.stderr))
    path = _out(args) / "bundles.jsonl"
    n = 0
    with open(path, "w") as f:
        for bundle in agg:
            rec = {"reference_ns": bundle.reference_ns,
                   "members": [{"stream": s, "sensor_id": fr.sensor_id, "format": fr.fmt,
                                "timestamp_ns": fr.timestamp_ns} for s, fr in sorted(bundle.members.items())]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    print(f"{path} bundles={n} dropped={agg.aligner.dropped} disconnected={len(agg.disconnected)}")
    return 0


def cmd_pipeline(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.inputs:
        cfg["inputs"] = [str(Path(p).resolve()) for p in args.inputs]
    base = Path(args.config).parent if args.config else Path(".")
    result = pipeline.run_pipeline(pipeline.PipelineConfig.from_dict(cfg, base), _out(args))
    for name, path in result.artifacts.items():
        print(path)
    return result.status


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key-value, JSON or YAML config")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="gelhand", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out-dir", default="out")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="scene config -> recordings + ground truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", parents=[common], help="frames -> height maps (PLY/PGM)")
    p.add_argument("input", help=".gsf recording or .ppm frame")
    p.add_argument("--format", choices=("ply", "pgm"), default="ply")
    p.add_argument("--mm-per-px", type=float, default=None)
    p.add_argument("--layout", default=None, help="proximal, distal or a layout config file")
    p.add_argument("--sensor-id", type=int, default=0)
    p.add_argument("--floor", type=float, default=0.05, help="PLY contact floor (mm)")
    p.add_argument("--no-mask", action="store_true", help="do not mask marker pixels")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("track", parents=[common], help="frames -> marker flow CSV")
    p.add_argument("input")
    p.add_argument("--layout", default=None)
    p.add_argument("--sensor-id", type=int, default=0)
    p.add_argument("--dark-threshold", type=float, default=0.35)
    p.add_argument("--max-missing", type=int, default=tracking.DEFAULT_MAX_MISSING)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("classify", parents=[common], help="flow CSV -> force JSON")
    p.add_argument("input")
    p.add_argument("--layout", default=None)
    p.add_argument("--noise-floor", type=float, default=0.05)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("audio", parents=[common], help="WAV -> contact events JSON lines")
    p.add_argument("input")
    p.add_argument("--energy-ratio", type=float, default=4.0)
    p.add_argument("--max-dist-hz", type=float, default=multimodal.DEFAULT_MAX_DIST_HZ)
    p.set_defaults(func=cmd_audio)

    p = sub.add_parser("fuse", parents=[common], help="frames + hand state -> merged PLY")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--q-deg", default=None, help="four joint angles in degrees")
    p.add_argument("--floor", type=float, default=0.05)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("serve", parents=[common], help="serve a recording over TCP")
    p.add_argument("input")
    p.add_argument("--rate", type=float, default=90.0)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("aggregate", parents=[common], help="align frames from several endpoints")
    p.add_argument("endpoints", nargs="+", help="host:port")
    p.add_argument("--window-ms", type=float, default=stream.DEFAULT_WINDOW_MS)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("pipeline", parents=[common], help="end-to-end run from a config")
    p.add_argument("inputs", nargs="*", help="recordings (override the config's inputs)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except (GelHandError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
