"""Shared value types for the tactile perception stack.

Conventions used everywhere in the package:

* physical lengths are millimeters, images are pixels, and each sensor
  carries one scalar image scale (``px_per_mm`` or ``mm_per_px``);
* image coordinates are ``(x, y)`` with x along columns and y along rows;
* the palm frame is right-handed: x across the palm, y along finger
  extension, z out of the palm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_WIDTH = 320
DEFAULT_HEIGHT = 240
PALM_RGB_SENSOR = 4


class GelHandError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(GelHandError, ValueError):
    pass


class NonFinite(GelHandError, ValueError):
    pass


def _frozen(a, dtype=None):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TactileFrame:
    """One RGB image from one sensor.

    ``pixels`` may be given flat (row-major RGB triplets) or shaped
    ``(height, width, 3)``; construction does not check the length so that
    :func:`validate_frame` can report the mismatch.
    """

    sensor_id: int
    timestamp: int
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if isinstance(px, (bytes, bytearray, memoryview)):
            px = np.frombuffer(px, np.uint8)
        object.__setattr__(self, "pixels", _frozen(px, np.uint8).reshape(-1))

    @property
    def image(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width, 3)

    def as_float(self) -> np.ndarray:
        """Image as float intensities in [0, 1], shape (height, width, 3)."""
        return self.image.astype(np.float64) / 255.0

    @classmethod
    def from_image(cls, image, sensor_id=0, timestamp=0) -> "TactileFrame":
        image = np.asarray(image)
        if image.dtype != np.uint8:
            image = np.clip(np.rint(np.asarray(image, float) * 255.0), 0, 255).astype(np.uint8)
        h, w = image.shape[:2]
        return cls(sensor_id, timestamp, w, h, image)


def validate_frame(frame: TactileFrame) -> TactileFrame:
    if frame.width <= 0 or frame.height <= 0:
        raise DimensionMismatch(f"frame size must be positive, got {frame.width}x{frame.height}")
    expected = frame.width * frame.height * 3
    if frame.pixels.size != expected:
        raise DimensionMismatch(
            f"pixel buffer has {frame.pixels.size} bytes, expected {expected} "
            f"for {frame.width}x{frame.height} RGB"
        )
    return frame


@dataclass(frozen=True)
class MarkerLayout:
    """Fabricated marker grid: ``rows`` x ``cols`` dots at a square pitch."""

    rows: int
    cols: int
    interval_mm: float
    origin_px: tuple[float, float]
    px_per_mm: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("marker layout needs at least 2 rows and 2 columns")
        if not self.interval_mm > 0 or not self.px_per_mm > 0:
            raise ValueError("interval_mm and px_per_mm must be positive")
        object.__setattr__(self, "origin_px", (float(self.origin_px[0]), float(self.origin_px[1])))

    @property
    def pitch_px(self) -> float:
        return self.interval_mm * self.px_per_mm

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def to_config(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "interval_mm": self.interval_mm,
            "origin_px_x": self.origin_px[0],
            "origin_px_y": self.origin_px[1],
            "px_per_mm": self.px_per_mm,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "MarkerLayout":
        return cls(
            rows=int(cfg["rows"]),
            cols=int(cfg["cols"]),
            interval_mm=float(cfg["interval_mm"]),
            origin_px=(float(cfg["origin_px_x"]), float(cfg["origin_px_y"])),
            px_per_mm=float(cfg["px_per_mm"]),
        )

    @classmethod
    def centered(cls, rows, cols, interval_mm=3.0, px_per_mm=5.0,
                 width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT) -> "MarkerLayout":
        """Layout whose grid is centered in a ``width`` x ``height`` image."""
        pitch = interval_mm * px_per_mm
        ox = (width - 1 - (cols - 1) * pitch) / 2
        oy = (height - 1 - (rows - 1) * pitch) / 2
        return cls(rows, cols, interval_mm, (ox, oy), px_per_mm)


# marker arrays of the proximal and distal phalanx gels
PROXIMAL_LAYOUT = MarkerLayout(9, 17, 3.0, (40.0, 60.0), 5.0)
DISTAL_LAYOUT = MarkerLayout(9, 13, 3.0, (70.0, 60.0), 5.0)


def rest_positions(layout: MarkerLayout) -> np.ndarray:
    """Pixel coordinates of every marker at rest, shape (rows, cols, 2) as (x, y)."""
    pitch = layout.pitch_px
    r, c = np.mgrid[0:layout.rows, 0:layout.cols]
    out = np.empty((layout.rows, layout.cols, 2))
    out[..., 0] = layout.origin_px[0] + c * pitch
    out[..., 1] = layout.origin_px[1] + r * pitch
    return out


@dataclass(frozen=True, eq=False)
class GradientField:
    """Per-pixel surface slopes dh/dx, dh/dy (mm/mm)."""

    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        gx = _frozen(self.gx, float)
        gy = _frozen(self.gy, float)
        if gx.shape != gy.shape or gx.ndim != 2:
            raise DimensionMismatch(f"gradient shapes differ: {gx.shape} vs {gy.shape}")
        if not (np.isfinite(gx).all() and np.isfinite(gy).all()):
            raise NonFinite("gradient field contains non-finite values")
        object.__setattr__(self, "gx", gx)
        object.__setattr__(self, "gy", gy)

    @property
    def height(self) -> int:
        return self.gx.shape[0]

    @property
    def width(self) -> int:
        return self.gx.shape[1]


@dataclass(frozen=True, eq=False)
class HeightMap:
    """Contact topography in mm on a regular pixel grid."""

    h: np.ndarray
    mm_per_px: float

    def __post_init__(self):
        h = _frozen(self.h, float)
        if h.ndim != 2:
            raise DimensionMismatch("height map must be 2-D")
        if not np.isfinite(h).all():
            raise NonFinite("height map contains non-finite values")
        if not self.mm_per_px > 0:
            raise ValueError("mm_per_px must be positive")
        object.__setattr__(self, "h", h)

    @property
    def height(self) -> int:
        return self.h.shape[0]

    @property
    def width(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-marker displacement (mm) relative to the rest grid.

    ``valid`` is False where a marker was not observed and its displacement
    is an interpolated fill-in.
    """

    layout: MarkerLayout
    displacement: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        d = _frozen(self.displacement, float)
        if d.shape != (self.layout.rows, self.layout.cols, 2):
            raise DimensionMismatch(
                f"displacement grid {d.shape} does not match layout "
                f"{(self.layout.rows, self.layout.cols, 2)}"
            )
        valid = np.ones(self.layout.shape, bool) if self.valid is None else self.valid
        valid = _frozen(valid, bool)
        if valid.shape != self.layout.shape:
            raise DimensionMismatch("valid mask does not match layout")
        object.__setattr__(self, "displacement", d)
        object.__setattr__(self, "valid", valid)

    @property
    def positions_px(self) -> np.ndarray:
        return rest_positions(self.layout) + self.displacement * self.layout.px_per_mm

    @classmethod
    def zeros(cls, layout: MarkerLayout) -> "FlowField":
        return cls(layout, np.zeros((layout.rows, layout.cols, 2)))


@dataclass(frozen=True, eq=False)
class AudioClip:
    sample_rate_hz: float
    samples: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        s = _frozen(self.samples, float).reshape(-1)
        if not self.sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        if s.size == 0:
            raise ValueError("audio clip is empty")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True, eq=False)
class AccelStream:
    samples: np.ndarray
    sample_rate_hz: float = 1000.0
    timestamp: int = 0

    def __post_init__(self):
        s = _frozen(self.samples, float)
        if s.ndim != 2 or s.shape[1] != 3:
            raise DimensionMismatch("accelerometer samples must have shape (n, 3)")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", s)


THERMAL_SHAPE = (24, 32)


@dataclass(frozen=True, eq=False)
class ThermalFrame:
    temps_c: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        t = _frozen(self.temps_c, float)
        if t.shape != THERMAL_SHAPE:
            raise DimensionMismatch(f"thermal frame must be 32x24, got {t.shape[::-1]}")
        if not np.isfinite(t).all():
            raise NonFinite("thermal frame contains non-finite values")
        object.__setattr__(self, "temps_c", t)

    width = 32
    height = 24
