"""Contact sounds, accelerometer vibration and thermal frames.

A contact sound is summarized by its dominant frequency, which is matched
against a table of (object, surface) signatures.  Slip shows up as
band-limited vibration on the accelerometer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.io import wavfile

from .core import AccelStream, AudioClip, GelHandError, ThermalFrame
from . import io as _io

FFT_SIZE = 2048
ONSET_WINDOW = 512
ONSET_HOP = 256
ONSET_MERGE_S = 0.1
MEDIAN_SPAN_S = 1.0
REFINE_BLOCK = 64
SLIP_WINDOW = 256
DEFAULT_MAX_DIST_HZ = 80.0

OBJECTS = ("Glass", "Plastic", "Paper")
SURFACES = ("Wood", "Marble", "Steel")
# dominant frequency (Hz) of a cup set down on a surface
CONTACT_FREQS_HZ = {
    ("Glass", "Wood"): 690.0, ("Glass", "Marble"): 1200.0, ("Glass", "Steel"): 517.0,
    ("Plastic", "Wood"): 345.0, ("Plastic", "Marble"): 520.0, ("Plastic", "Steel"): 173.0,
    ("Paper", "Wood"): 500.0, ("Paper", "Marble"): 710.0, ("Paper", "Steel"): 375.0,
}


class TooShort(GelHandError, ValueError):
    pass


class SampleRateTooLow(GelHandError, ValueError):
    pass


@dataclass(frozen=True)
class SpectralPeak:
    frequency_hz: float
    magnitude: float
    snr_db: float


@dataclass(frozen=True)
class ContactEvent:
    timestamp: int
    kind: str  # "acoustic_contact" or "slip_cue"
    dominant_freq_hz: float | None = None
    predicted_class: tuple | str = "unknown"
    confidence: float = 0.0

    def __post_init__(self):
        if self.kind not in ("acoustic_contact", "slip_cue"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "acoustic_contact" and self.dominant_freq_hz is None:
            raise ValueError("acoustic events need a frequency")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")

    def to_dict(self) -> dict:
        cls = self.predicted_class
        return {
            "timestamp": int(self.timestamp),
            "kind": self.kind,
            "dominant_freq_hz": None if self.dominant_freq_hz is None else round(self.dominant_freq_hz, 6),
            "predicted_class": list(cls) if isinstance(cls, tuple) else cls,
            "confidence": round(self.confidence, 6),
        }


class FrequencyTable:
    """(object, surface) -> dominant frequency, all nine object-surface pairs."""

    def __init__(self, entries=None):
        entries = dict(CONTACT_FREQS_HZ if entries is None else entries)
        missing = [(o, s) for o in OBJECTS for s in SURFACES if (o, s) not in entries]
        if missing:
            raise ValueError(f"frequency table is missing {missing}")
        if any(not f > 0 for f in entries.values()):
            raise ValueError("table frequencies must be positive")
        self.entries = {k: float(v) for k, v in entries.items()}
        self._keys = sorted(self.entries, key=lambda k: (OBJECTS.index(k[0]), SURFACES.index(k[1])))
        self._freqs = np.array([self.entries[k] for k in self._keys])

    @property
    def classes(self) -> list:
        return list(self._keys)

    def nearest(self, freq_hz):
        i = int(np.argmin(np.abs(self._freqs - freq_hz)))
        return self._keys[i], float(abs(self._freqs[i] - freq_hz))

    def to_config(self) -> dict:
        return {f"{o.lower()}_{s.lower()}": self.entries[(o, s)] for o, s in self._keys}

    @classmethod
    def from_config(cls, cfg: dict) -> "FrequencyTable":
        entries = dict(CONTACT_FREQS_HZ)
        names = {(o.lower(), s.lower()): (o, s) for o in OBJECTS for s in SURFACES}
        for key, value in cfg.items():
            parts = tuple(key.lower().replace(".", "_").split("_"))
            if parts in names:
                entries[names[parts]] = float(value)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "FrequencyTable":
        return cls.from_config(_io.read_kv(path))


def _frame_energy(x, window=ONSET_WINDOW, hop=ONSET_HOP):
    if x.size < window:
        x = np.pad(x, (0, window - x.size))
    n = 1 + (x.size - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return (x[idx] ** 2).sum(axis=1)


def detect_onsets(clip: AudioClip, energy_ratio=4.0) -> list[int]:
    """Sample indices where short-time energy jumps above ``energy_ratio`` x running median."""
    if not energy_ratio > 1:
        raise ValueError("energy_ratio must be > 1")
    x = clip.samples
    energy = _frame_energy(x)
    peak = energy.max()
    if peak <= 0:
        return []
    span = max(3, int(MEDIAN_SPAN_S * clip.sample_rate_hz / ONSET_HOP) | 1)
    span = min(span, (energy.size - 1) | 1)  # a window longer than the clip breaks the filter
    median = ndimage.median_filter(energy, size=span, mode="nearest")
    floor = 1e-10 * peak  # relative, so the detector stays scale invariant
    hot = (energy > energy_ratio * median) & (energy > floor)
    rising = np.nonzero(hot & ~np.r_[False, hot[:-1]])[0]

    onsets = []
    merge = int(round(ONSET_MERGE_S * clip.sample_rate_hz))
    for k in rising:
        start = k * ONSET_HOP
        # refine inside the window with short blocks against the same baseline
        lo = max(0, start - ONSET_HOP)
        seg = x[lo:start + ONSET_WINDOW]
        nb = len(seg) // REFINE_BLOCK
        blocks = (seg[:nb * REFINE_BLOCK].reshape(nb, REFINE_BLOCK) ** 2).sum(axis=1)
        base = median[k] * REFINE_BLOCK / ONSET_WINDOW
        above = np.nonzero((blocks > energy_ratio * base) & (blocks > floor * REFINE_BLOCK / ONSET_WINDOW))[0]
        onset = lo + (int(above[0]) * REFINE_BLOCK if above.size else start - lo)
        if onsets and onset - onsets[-1] < merge:
            continue
        onsets.append(onset)
    return onsets


def _parabolic(logmag, k):
    n = logmag.size
    left = logmag[k - 1] if k > 0 else logmag[1]
    right = logmag[k + 1] if k < n - 1 else logmag[k - 1]
    denom = left - 2 * logmag[k] + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def dominant_frequency(clip: AudioClip, window_start=0, n_fft=FFT_SIZE) -> SpectralPeak:
    """Strongest spectral peak of a Hann-windowed block, refined to sub-bin precision."""
    seg = clip.samples[window_start:window_start + n_fft]
    if window_start < 0 or seg.size < n_fft:
        raise TooShort(f"need {n_fft} samples from index {window_start}, have {max(seg.size, 0)}")
    mag = np.abs(np.fft.rfft(seg * np.hanning(n_fft)))
    k = int(np.argmax(mag))
    tiny = np.finfo(float).tiny
    delta = _parabolic(np.log(mag + tiny), k)
    nyquist = clip.sample_rate_hz / 2.0
    freq = float(np.clip((k + delta) * clip.sample_rate_hz / n_fft, 0.0, np.nextafter(nyquist, 0)))
    med = float(np.median(mag))
    snr = float(20 * np.log10((mag[k] + tiny) / (med + tiny)))
    return SpectralPeak(freq, float(mag[k]), snr)


def classify_contact(peak: SpectralPeak, table: FrequencyTable | None = None,
                     max_dist_hz=DEFAULT_MAX_DIST_HZ):
    """Nearest table class and a confidence that falls linearly to 0 at ``max_dist_hz``."""
    table = table or FrequencyTable()
    cls, dist = table.nearest(peak.frequency_hz)
    if dist > max_dist_hz:
        return "unknown", 0.0
    return cls, max(0.0, 1.0 - dist / max_dist_hz)


def acoustic_events(clip: AudioClip, table: FrequencyTable | None = None, energy_ratio=4.0,
                    max_dist_hz=DEFAULT_MAX_DIST_HZ) -> list[ContactEvent]:
    """Onsets of a clip, each labelled by the dominant frequency that follows it."""
    events = []
    if clip.samples.size < FFT_SIZE:
        return events
    for onset in detect_onsets(clip, energy_ratio):
        start = min(onset, clip.samples.size - FFT_SIZE)
        peak = dominant_frequency(clip, start)
        cls, conf = classify_contact(peak, table, max_dist_hz)
        ts = clip.timestamp + int(round(onset / clip.sample_rate_hz * 1e9))
        events.append(ContactEvent(ts, "acoustic_contact", peak.frequency_hz, cls, conf))
    return events


def band_rms(x, sample_rate, band_lo, band_hi) -> float:
    """RMS of the mean-removed signal restricted to [band_lo, band_hi] Hz."""
    x = np.asarray(x, float)
    x = x - x.mean()
    if np.ptp(x) == 0:
        return 0.0
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1.0 / sample_rate)
    spec[(f < band_lo) | (f > band_hi)] = 0.0
    return float(np.sqrt(np.mean(np.fft.irfft(spec, x.size) ** 2)))


def slip_cue(stream: AccelStream, band_lo=30.0, band_hi=400.0, threshold=0.5,
             window=SLIP_WINDOW) -> list[ContactEvent]:
    """Slip events for windows whose band-limited vibration exceeds ``threshold`` (m/s^2)."""
    sr = stream.sample_rate_hz
    if sr < 2 * band_hi:
        raise SampleRateTooLow(f"sample rate {sr:g} Hz is below 2 x band_hi = {2 * band_hi:g} Hz")
    mag = np.linalg.norm(stream.samples, axis=1)
    events = []
    for start in range(0, mag.size - window + 1, window):
        rms = band_rms(mag[start:start + window], sr, band_lo, band_hi)
        if rms > threshold:
            ts = stream.timestamp + int(round((start + window / 2) / sr * 1e9))
            events.append(ContactEvent(ts, "slip_cue", confidence=1.0 - threshold / rms))
    return events


@dataclass(frozen=True)
class ThermalSummary:
    min_c: float
    max_c: float
    mean_c: float
    hot_count: int
    hot_centroid: tuple | None  # (x, y) in pixels

    def to_dict(self) -> dict:
        return {"min_c": self.min_c, "max_c": self.max_c, "mean_c": self.mean_c,
                "hot_count": self.hot_count,
                "hot_centroid": None if self.hot_centroid is None else list(self.hot_centroid)}


def thermal_stats(frame: ThermalFrame, hot_threshold_c=40.0) -> ThermalSummary:
    t = frame.temps_c
    hot = t > hot_threshold_c
    centroid = None
    if hot.any():
        rows, cols = np.nonzero(hot)
        centroid = (float(cols.mean()), float(rows.mean()))
    return ThermalSummary(float(t.min()), float(t.max()), float(t.mean()), int(hot.sum()), centroid)


def read_wav(path, timestamp=0) -> AudioClip:
    """Mono clip from a PCM-16 or float WAV; multi-channel files are averaged."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(float) - 128.0) / 128.0
    data = np.asarray(data, float)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(float(rate), data, timestamp)


def write_wav(path, clip: AudioClip, pcm16=False) -> None:
    rate = int(round(clip.sample_rate_hz))
    if pcm16:
        wavfile.write(path, rate, np.clip(np.rint(clip.samples * 32767), -32768, 32767).astype(np.int16))
    else:
        wavfile.write(path, rate, clip.samples.astype(np.float32))


def write_events(path, events) -> None:
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_events(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
