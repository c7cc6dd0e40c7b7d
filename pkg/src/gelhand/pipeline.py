"""Scene simulation to recordings, and recordings to perception artifacts.

:func:`simulate` turns a scene description into wire-format recordings
(one ``.gsf`` file per stream) plus ground-truth sidecars.
:func:`run_pipeline` aligns recorded streams into bundles and, per bundle,
reconstructs contact geometry, tracks markers, classifies forces and fuses
a palm-frame point cloud; audio and accelerometer blocks are scanned for
events once all bundles are in.  Artifacts are written in bundle order with
fixed formatting, so identical input gives byte-identical output.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DISTAL_LAYOUT, PROXIMAL_LAYOUT, AccelStream, AudioClip, GelHandError, MarkerLayout, TactileFrame,
)
from . import forces, io as _io, kinematics as kin, multimodal, photometric, simulator, stream, tracking

SENSOR_LAYOUTS = {0: PROXIMAL_LAYOUT, 1: DISTAL_LAYOUT, 2: PROXIMAL_LAYOUT, 3: DISTAL_LAYOUT}
ARTIFACTS = ("forces.jsonl", "flow.csv", "cloud.ply", "events.jsonl", "summary.json")
FLOW_FIELDS = ("bundle", "timestamp", "sensor_id") + tracking.CSV_FIELDS
AUDIO_RATE = 48000
ACCEL_RATE = 1000


class StageError(GelHandError):
    """A perception stage failed on one bundle."""

    def __init__(self, bundle, reference_ns, stage, cause):
        super().__init__(f"bundle {bundle} (t={reference_ns} ns), stage {stage}: {cause}")
        self.bundle = bundle
        self.reference_ns = reference_ns
        self.stage = stage


def _floats(v):
    if v is None:
        return None
    return _io.parse_floats(v) if isinstance(v, str) else [float(x) for x in np.atleast_1d(v)]


def _section(cfg, name):
    """Nested mapping ``cfg[name]`` or flat keys prefixed ``name_``/``name.``."""
    out = dict(cfg.get(name) or {})
    for key, value in cfg.items():
        for sep in ("_", "."):
            if key.startswith(name + sep) and not isinstance(value, dict):
                out.setdefault(key[len(name) + 1:], value)
    return out


# scene simulation

def _scene_object(cfg) -> simulator.SceneObject:
    center = _floats(cfg.get("center_mm"))
    return simulator.SceneObject(
        str(cfg.get("primitive", "sphere")),
        tuple(_floats(cfg.get("dims", [10.0]))),
        None if center is None else tuple(center),
        float(np.radians(float(cfg.get("yaw_deg", 0.0)))),
        float(cfg.get("depth_mm", 0.0)),
    )


def _load(cfg) -> simulator.AppliedLoad:
    load = _section(cfg, "load")
    shear = _floats(load.get("shear", [load.get("shear_x", 0.0), load.get("shear_y", 0.0)]))
    center = _floats(load.get("center_mm"))
    return simulator.AppliedLoad(tuple(shear), float(load.get("twist", 0.0)),
                                 float(load.get("press", 0.0)), None if center is None else tuple(center))


def _noisy(frame: TactileFrame, rng, noise_std) -> TactileFrame:
    if not noise_std:
        return frame
    img = frame.as_float() + rng.normal(0.0, noise_std, frame.image.shape)
    return TactileFrame.from_image(photometric.quantize(img), frame.sensor_id, frame.timestamp)


def simulate(scene: dict, out_dir, seed=0) -> list[Path]:
    """Write recordings and ground truth for a scene; returns the recording paths.

    Keys: ``mode`` (indent or grasp), object keys (primitive, dims,
    center_mm, yaw_deg, depth_mm), ``load`` (shear, twist, press),
    ``frames``, ``rate_hz``, ``noise_std``, ``sensor_id`` (indent mode),
    ``q_deg`` and hand geometry keys (grasp mode), ``audio_freq_hz``,
    ``audio_snr_db``, ``audio_onset_s``, ``slip_hz``/``slip_amp``.
    """
    out = Path(out_dir)
    rec_dir, gt_dir, frame_dir = out / "recording", out / "ground_truth", out / "frames"
    for d in (rec_dir, gt_dir, frame_dir):
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(scene.get("seed", seed)))
    mode = str(scene.get("mode", "indent"))
    n_frames = int(scene.get("frames", 1))
    rate = float(scene.get("rate_hz", 90.0))
    noise = float(scene.get("noise_std", 0.0))
    t0 = int(scene.get("t0_ns", 0))
    stamps = [t0 + int(round(k * 1e9 / rate)) for k in range(n_frames)]
    rig = photometric.LightRig.from_config(_section(scene, "rig"))
    load = _load(scene)
    obj = _scene_object(scene)

    if mode == "indent":
        sid = int(scene.get("sensor_id", 0))
        layout = SENSOR_LAYOUTS.get(sid, PROXIMAL_LAYOUT)
        contacts = {sid: simulator.indent(obj, (320, 240), 1.0 / layout.px_per_mm)}
    elif mode == "grasp":
        geom = kin.HandGeometry.from_config(_section(scene, "geometry"))
        state = kin.HandState.from_degrees(*_floats(scene.get("q_deg", [0, 0, 0, 0])))
        contacts = {}
        clouds = []
        for pose, hmap in simulator.make_grasp_scene(geom, obj, state):
            contacts[pose.sensor_id] = hmap
            clouds.append(kin.project_heightmap(pose, hmap))
        kin.merge_clouds(clouds).write_ply(gt_dir / "cloud.ply")
    else:
        raise ValueError(f"unknown scene mode {mode!r}")

    paths = []
    for sid, hmap in sorted(contacts.items()):
        layout = SENSOR_LAYOUTS.get(sid, PROXIMAL_LAYOUT)
        scene_k = simulator.displace_markers(layout, load, hmap, rig=rig, sensor_id=sid)
        tracking.write_flow_csv(gt_dir / f"flow_sensor{sid}.csv", scene_k.flow)
        _io.write_pgm16(gt_dir / f"height_sensor{sid}.pgm", hmap.h)
        frames = []
        for k, ts in enumerate(stamps):
            base = TactileFrame(sid, ts, scene_k.frame.width, scene_k.frame.height, scene_k.frame.pixels)
            frame = _noisy(base, rng, noise)
            if k == 0:
                _io.write_ppm(frame_dir / f"sensor{sid}_{k:04d}.ppm", frame.image)
            frames.append(stream.from_tactile(frame))
        path = rec_dir / f"sensor{sid}.gsf"
        stream.write_frames(path, frames)
        paths.append(path)

    duration = n_frames / rate
    if "audio_freq_hz" in scene:
        snr = scene.get("audio_snr_db")
        clip = simulator.synth_contact_audio(
            float(scene["audio_freq_hz"]), duration, float(scene.get("audio_decay_s", 0.05)),
            None if snr is None else float(snr), AUDIO_RATE, onset_s=float(scene.get("audio_onset_s", 0.0)),
            seed=int(rng.integers(2 ** 31)))
        paths.append(_write_blocks(rec_dir / "audio.gsf", clip.samples, AUDIO_RATE, stamps, rate,
                                   stream.AUDIO_BLOCK))
    if "slip_hz" in scene:
        bursts = [(float(scene.get("slip_start_s", 0.0)), float(scene.get("slip_end_s", duration)),
                   float(scene["slip_hz"]), float(scene.get("slip_amp", 1.0)))]
        acc = simulator.synth_accel(duration, ACCEL_RATE, bursts=bursts)
        paths.append(_write_blocks(rec_dir / "accel.gsf", acc.samples, ACCEL_RATE, stamps, rate,
                                   stream.ACCEL_BLOCK))
    with open(out / "scene.json", "w") as f:
        json.dump({k: v for k, v in scene.items()}, f, indent=2, sort_keys=True, default=str)
    return paths


def _write_blocks(path, samples, sample_rate, stamps, frame_rate, fmt) -> Path:
    """Cut a signal into one block per frame period, stamped like the frames."""
    per = sample_rate / frame_rate
    frames = []
    for k, ts in enumerate(stamps):
        chunk = samples[int(round(k * per)):int(round((k + 1) * per))]
        if len(chunk) == 0:
            continue
        if fmt == stream.AUDIO_BLOCK:
            frames.append(stream.from_audio(AudioClip(sample_rate, chunk, ts)))
        else:
            frames.append(stream.from_accel(AccelStream(chunk, sample_rate, ts)))
    stream.write_frames(path, frames)
    return Path(path)


# perception

@dataclass
class PipelineConfig:
    inputs: list = field(default_factory=list)
    endpoints: list = field(default_factory=list)
    geometry: kin.HandGeometry = field(default_factory=kin.HandGeometry)
    state: kin.HandState = field(default_factory=lambda: kin.HandState(np.zeros(4)))
    rig: photometric.LightRig = photometric.DEFAULT_RIG
    layouts: dict = field(default_factory=lambda: dict(SENSOR_LAYOUTS))
    window_ms: float = stream.DEFAULT_WINDOW_MS
    noise_floor: float = 0.05
    contact_floor: float = 0.05
    dark_threshold: float = 0.35
    max_missing: int = tracking.DEFAULT_MAX_MISSING
    energy_ratio: float = 4.0
    slip_threshold: float = 0.5
    workers: int = 1
    seed: int = 0
    scene: dict | None = None

    @classmethod
    def from_dict(cls, cfg: dict, base_dir=None) -> "PipelineConfig":
        base = Path(base_dir) if base_dir else Path(".")

        def paths(v):
            if v is None:
                return []
            items = v.replace(",", " ").split() if isinstance(v, str) else list(v)
            return [str(p) if Path(p).is_absolute() else str(base / p) for p in items]

        layouts = dict(SENSOR_LAYOUTS)
        for sid in range(4):
            sec = _section(cfg, f"layout{sid}")
            if sec:
                layouts[sid] = MarkerLayout.from_config(sec)
        endpoints = cfg.get("endpoints") or []
        if isinstance(endpoints, str):
            endpoints = endpoints.replace(",", " ").split()
        eps = []
        for e in endpoints:
            host, port = (e.rsplit(":", 1) if isinstance(e, str) else e)
            eps.append((host, int(port)))
        q = _floats(cfg.get("q_deg")) or _floats(_section(cfg, "state").get("q_deg")) or [0, 0, 0, 0]
        scene = cfg.get("scene")
        if isinstance(scene, str):
            scene = _io.load_structured(base / scene)
        return cls(
            inputs=paths(cfg.get("inputs")),
            endpoints=eps,
            geometry=kin.HandGeometry.from_config(_section(cfg, "geometry")),
            state=kin.HandState.from_degrees(*q),
            rig=photometric.LightRig.from_config(_section(cfg, "rig")),
            layouts=layouts,
            window_ms=float(cfg.get("window_ms", stream.DEFAULT_WINDOW_MS)),
            noise_floor=float(cfg.get("noise_floor", 0.05)),
            contact_floor=float(cfg.get("contact_floor", 0.05)),
            dark_threshold=float(cfg.get("dark_threshold", 0.35)),
            max_missing=int(cfg.get("max_missing", tracking.DEFAULT_MAX_MISSING)),
            energy_ratio=float(cfg.get("energy_ratio", 4.0)),
            slip_threshold=float(cfg.get("slip_threshold", 0.5)),
            workers=int(cfg.get("workers", 1)),
            seed=int(cfg.get("seed", 0)),
            scene=scene,
        )


@dataclass
class TactileResult:
    sensor_id: int
    timestamp: int
    match: tracking.MatchResult
    summary: forces.ForceSummary
    cloud: kin.PointCloud


def process_tactile(frame: TactileFrame, cfg: PipelineConfig, poses: dict) -> TactileResult:
    layout = cfg.layouts.get(frame.sensor_id, PROXIMAL_LAYOUT)
    blobs = tracking.detect_blobs(frame, cfg.dark_threshold)
    match = tracking.match_markers(blobs, layout, max_missing=cfg.max_missing)
    summary = forces.classify(match.flow, cfg.noise_floor, frame.timestamp)
    cloud = kin.PointCloud.empty()
    if frame.sensor_id in poses:
        mask = tracking.marker_mask(frame, cfg.dark_threshold)
        hmap = photometric.reconstruct(frame, cfg.rig, 1.0 / layout.px_per_mm, mask)
        cloud = kin.project_heightmap(poses[frame.sensor_id], hmap, cfg.contact_floor)
    return TactileResult(frame.sensor_id, frame.timestamp, match, summary, cloud)


def _process_bundle(idx, bundle, cfg, poses):
    results = []
    for sid, wf in sorted(bundle.tactile.items()):
        try:
            frame = stream.to_object(wf)
            results.append(process_tactile(frame, cfg, poses))
        except GelHandError as exc:
            raise StageError(idx, bundle.reference_ns, f"tactile sensor {sid}", exc) from exc
    return results


@dataclass
class PipelineResult:
    status: int
    bundles: int
    artifacts: dict
    disconnected: list = field(default_factory=list)
    dropped: int = 0


def _bundles(cfg: PipelineConfig):
    if cfg.endpoints:
        agg = stream.Aggregator(cfg.endpoints, cfg.window_ms)
        return list(agg), agg.disconnected, agg.aligner.dropped
    streams = [stream.read_frames(p) for p in cfg.inputs]
    aligner = stream.Aligner(max(len(streams), 1), cfg.window_ms)
    events = sorted((f.timestamp_ns, s, k) for s, frames in enumerate(streams) for k, f in enumerate(frames))
    out = []
    for _, s, k in events:
        out.extend(aligner.push(s, streams[s][k]))
    out.extend(aligner.flush())
    return out, [], aligner.dropped


def _concat_blocks(blocks, fmt):
    if not blocks:
        return None
    objs = [stream.to_object(b) for b in sorted(blocks, key=lambda b: b.timestamp_ns)]
    if fmt == stream.AUDIO_BLOCK:
        return AudioClip(objs[0].sample_rate_hz, np.concatenate([o.samples for o in objs]), objs[0].timestamp)
    return AccelStream(np.concatenate([o.samples for o in objs]), objs[0].sample_rate_hz, objs[0].timestamp)


def run_pipeline(config, out_dir) -> PipelineResult:
    """Run every perception stage over recorded (or simulated) input."""
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scene is not None and not cfg.inputs and not cfg.endpoints:
        cfg.inputs = [str(p) for p in simulate(cfg.scene, out / "scene", cfg.seed)]

    bundles, disconnected, dropped = _bundles(cfg)
    fk = kin.forward_kinematics(cfg.geometry, cfg.state)
    poses = {p.sensor_id: p for p in fk.poses}

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            per_bundle = list(pool.map(lambda ib: _process_bundle(ib[0], ib[1], cfg, poses), enumerate(bundles)))
    else:
        per_bundle = [_process_bundle(i, b, cfg, poses) for i, b in enumerate(bundles)]

    paths = {name: out / name for name in ARTIFACTS}
    regimes = {r: 0 for r in forces.REGIMES}
    clouds = []
    with open(paths["forces.jsonl"], "w") as ff, open(paths["flow.csv"], "w", newline="") as fc:
        writer = csv.DictWriter(fc, fieldnames=FLOW_FIELDS)
        writer.writeheader()
        for i, results in enumerate(per_bundle):
            for r in results:
                rec = {"bundle": i, "sensor_id": r.sensor_id, **r.summary.to_dict()}
                ff.write(json.dumps(rec, sort_keys=True) + "\n")
                regimes[r.summary.regime] += 1
                for row in tracking.flow_rows(r.match.flow):
                    writer.writerow({"bundle": i, "timestamp": r.timestamp, "sensor_id": r.sensor_id, **row})
                clouds.append(r.cloud)
    cloud = kin.merge_clouds(clouds)
    cloud.write_ply(paths["cloud.ply"])

    audio = _concat_blocks([b.audio for b in bundles if b.audio is not None], stream.AUDIO_BLOCK)
    accel = _concat_blocks([b.accel for b in bundles if b.accel is not None], stream.ACCEL_BLOCK)
    events = []
    if audio is not None:
        events.extend(multimodal.acoustic_events(audio, energy_ratio=cfg.energy_ratio))
    if accel is not None and accel.sample_rate_hz >= 800:
        events.extend(multimodal.slip_cue(accel, threshold=cfg.slip_threshold))
    events.sort(key=lambda e: (e.timestamp, e.kind))
    multimodal.write_events(paths["events.jsonl"], events)

    summary = {
        "bundles": len(bundles),
        "tactile_frames": int(sum(len(r) for r in per_bundle)),
        "regimes": regimes,
        "cloud_points": len(cloud),
        "events": len(events),
        "dropped_frames": int(dropped),
        "disconnected": [str(d.endpoint) for d in disconnected],
        "seed": cfg.seed,
    }
    with open(paths["summary.json"], "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return PipelineResult(0, len(bundles), {k: str(v) for k, v in paths.items()},
                          list(disconnected), int(dropped))
