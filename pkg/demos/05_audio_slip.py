import numpy as np

from gelhand import multimodal
from gelhand.simulator import synth_accel, synth_contact_audio, synth_thermal

# A plastic cup set down on steel rings near 173 Hz
clip = synth_contact_audio(173.0, duration_s=0.5, onset_s=0.1, snr_db=10, seed=4)
for e in multimodal.acoustic_events(clip):
    print("contact at %.1f ms, %.1f Hz -> %s (confidence %.2f)"
          % (e.timestamp / 1e6, e.dominant_freq_hz, e.predicted_class, e.confidence))

# Every table entry, checked against its own synthetic tone
table = multimodal.FrequencyTable()
for cls in table.classes:
    clip = synth_contact_audio(table.entries[cls], onset_s=0.05, snr_db=10, seed=1)
    pred = multimodal.acoustic_events(clip)[0].predicted_class
    print("%-18s %6.0f Hz -> %s" % ("/".join(cls), table.entries[cls], "/".join(pred) if pred != "unknown" else pred))

# Slip shows up as a burst of vibration in the wrist accelerometer
acc = synth_accel(1.28, bursts=[(0.5, 0.9, 150.0, 1.5)], noise_std=0.02, seed=0)
for e in multimodal.slip_cue(acc):
    print("slip cue at %.0f ms, confidence %.2f" % (e.timestamp / 1e6, e.confidence))

# Thermal camera: a warm object in the corner of the view
stats = multimodal.thermal_stats(synth_thermal(22.0, [(16, 24, 6, 6, 48.0)], seed=0, noise_std=0.2))
print("thermal: max %.1f C, %d hot pixels around" % (stats.max_c, stats.hot_count),
      np.round(stats.hot_centroid, 1))
