import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gelhand import cli
from gelhand.kinematics import PointCloud, fit_circle
from gelhand.multimodal import write_wav
from gelhand.pipeline import ARTIFACTS, PipelineConfig, run_pipeline, simulate
from gelhand.simulator import synth_contact_audio

CYLINDER = {
    "mode": "grasp", "primitive": "cylinder", "dims": [31.0, 100.0], "center_mm": [0.0, 20.0],
    "q_deg": [0, 0, 0, 0], "frames": 2, "noise_std": 0.005,
}
SHEAR = {
    "mode": "indent", "primitive": "box", "dims": [100.0, 100.0, 5.0], "depth_mm": 0.5,
    "load": {"shear": [0.3, 0.1]}, "frames": 20, "noise_std": 0.005,
}


def test_cylinder_grasp_fit(tmp_path):
    res = run_pipeline({"scene": CYLINDER, "seed": 3}, tmp_path)
    assert res.status == 0 and res.bundles == 2
    cloud = PointCloud.read_ply(res.artifacts["cloud.ply"])
    _, r = fit_circle(cloud.points[:, :2])
    assert abs(r - 31.0) < 0.5
    summary = json.loads(Path(res.artifacts["summary.json"]).read_text())
    assert summary["regimes"]["none"] == summary["tactile_frames"] == 8  # all four sensors stream


def test_shear_scene_regimes(tmp_path):
    res = run_pipeline({"scene": SHEAR, "seed": 1}, tmp_path)
    lines = [json.loads(l) for l in Path(res.artifacts["forces.jsonl"]).read_text().splitlines()]
    assert len(lines) == 20
    assert np.mean([l["regime"] == "shear" for l in lines]) >= 0.95


def test_empty_input(tmp_path):
    res = run_pipeline(PipelineConfig(), tmp_path)
    assert res.status == 0 and res.bundles == 0
    for name in ARTIFACTS:
        assert Path(res.artifacts[name]).exists()


def test_deterministic_artifacts(tmp_path):
    scene = dict(SHEAR, frames=3, audio_freq_hz=690.0, audio_snr_db=10, audio_onset_s=0.005)
    outs = [run_pipeline({"scene": scene, "seed": 7, "workers": w}, tmp_path / f"run{w}") for w in (1, 4)]
    for name in ARTIFACTS:
        a = Path(outs[0].artifacts[name]).read_bytes()
        b = Path(outs[1].artifacts[name]).read_bytes()
        assert a == b, name


def test_simulate_outputs(tmp_path):
    paths = simulate(CYLINDER, tmp_path, seed=0)
    assert sorted(p.name for p in paths) == [f"sensor{i}.gsf" for i in range(4)]
    gt = tmp_path / "ground_truth"
    assert (gt / "cloud.ply").exists() and (gt / "flow_sensor0.csv").exists()
    with pytest.raises(ValueError):
        simulate({"mode": "orbit"}, tmp_path / "bad")


def test_cli_simulate_track_classify(tmp_path):
    cfg = tmp_path / "scene.json"
    cfg.write_text(json.dumps(dict(SHEAR, frames=1)))
    assert cli.main(["--out-dir", str(tmp_path / "sim"), "simulate", "--config", str(cfg)]) == 0
    rec = tmp_path / "sim" / "recording" / "sensor0.gsf"
    assert cli.main(["track", str(rec), "--out-dir", str(tmp_path / "trk")]) == 0
    (flow,) = (tmp_path / "trk").glob("*.csv")
    assert cli.main(["classify", str(flow), "--out-dir", str(tmp_path / "cls")]) == 0
    (summary,) = (tmp_path / "cls").glob("*.json")
    assert json.loads(summary.read_text())["regime"] == "shear"
    assert cli.main(["reconstruct", str(rec), "--format", "pgm", "--out-dir", str(tmp_path / "rec")]) == 0
    assert list((tmp_path / "rec").glob("*.pgm"))


def test_cli_audio(tmp_path, capsys):
    write_wav(tmp_path / "tap.wav", synth_contact_audio(173.0, onset_s=0.1, snr_db=20, seed=2), pcm16=True)
    assert cli.main(["audio", str(tmp_path / "tap.wav"), "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert '"Plastic", "Steel"' in out


def test_cli_errors(tmp_path):
    assert cli.main(["track", str(tmp_path / "missing.gsf"), "--out-dir", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "gelhand", "pipeline", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "summary.json" in out.stdout
