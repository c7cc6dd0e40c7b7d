import json
import tempfile
from pathlib import Path

from gelhand.pipeline import run_pipeline

# Everything at once: a ball pressed and dragged across sensor 0, a tap on
# the table, and a short slip burst, recorded and then processed
scene = {
    "mode": "indent", "primitive": "sphere", "dims": [12.0], "depth_mm": 1.2,
    "load": {"shear": [0.25, 0.0]}, "frames": 30, "rate_hz": 90, "noise_std": 0.005,
    "audio_freq_hz": 690.0, "audio_snr_db": 10, "audio_onset_s": 0.05,
    "slip_hz": 120.0, "slip_amp": 1.0, "slip_start_s": 0.1, "slip_end_s": 0.3,
}

out = Path(tempfile.mkdtemp(prefix="gelhand_"))
result = run_pipeline({"scene": scene, "seed": 0}, out)
print("bundles processed:", result.bundles)
for name, path in result.artifacts.items():
    print("  %-13s %s" % (name, path))

summary = json.loads(Path(result.artifacts["summary.json"]).read_text())
print("regimes:", summary["regimes"])
for line in Path(result.artifacts["events.jsonl"]).read_text().splitlines():
    print("event:", line)
