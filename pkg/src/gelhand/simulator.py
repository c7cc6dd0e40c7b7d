"""Ground-truth generator for every perception stage.

Gel mechanics here are kinematic stand-ins, not physics: indentation is the
penetration of a rigid primitive smoothed by a Gaussian, and marker motion
is the applied load inside the contact patch decaying exponentially outside.
All randomness comes from an explicit seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    AccelStream, AudioClip, FlowField, GelHandError, HeightMap, MarkerLayout, TactileFrame,
    ThermalFrame, rest_positions,
)
from .kinematics import HandGeometry, HandState, SensorPose, forward_kinematics
from .photometric import LightRig, central_gradient, quantize, shade

PRIMITIVES = ("sphere", "cylinder", "box", "cone")
GEL_SIGMA_MM = 0.5
DECAY_INTERVALS = 2.0
DOT_RADIUS_MM = 0.4
DOT_INTENSITY = 0.05
BACKGROUND = 0.6


class NoContact(GelHandError):
    pass


@dataclass(frozen=True)
class SceneObject:
    """A rigid primitive.

    ``dims``: sphere (radius,), cylinder (radius, length), box
    (size_x, size_y, size_z), cone (base_radius, height).  For
    :func:`indent` the pose is the (x, y) of the contact center in the
    sensor plane plus ``depth_mm`` of indentation; for
    :func:`make_grasp_scene` ``center_mm`` is a palm-frame point and a
    cylinder's axis is the palm z axis.
    """

    primitive: str
    dims: tuple
    center_mm: tuple | None = None
    yaw_rad: float = 0.0
    depth_mm: float = 0.0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        dims = tuple(float(d) for d in np.atleast_1d(self.dims))
        need = {"sphere": 1, "cylinder": 1, "box": 2, "cone": 2}[self.primitive]
        if len(dims) < need or any(d <= 0 for d in dims):
            raise ValueError(f"{self.primitive} needs {need}+ positive dimensions, got {dims}")
        if self.depth_mm < 0:
            raise ValueError("indentation depth must be >= 0")
        object.__setattr__(self, "dims", dims)
        if self.center_mm is not None:
            object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))


@dataclass(frozen=True)
class AppliedLoad:
    """Shear (mm), twist (rad about ``center_mm``) and press (mm) acting on the gel."""

    shear: tuple = (0.0, 0.0)
    twist: float = 0.0
    press: float = 0.0
    center_mm: tuple | None = None

    def __post_init__(self):
        vals = list(self.shear) + [self.twist, self.press]
        if not np.all(np.isfinite(vals)):
            raise ValueError("load values must be finite")
        object.__setattr__(self, "shear", tuple(float(s) for s in self.shear))


def _smooth(h, mm_per_px, sigma_mm=GEL_SIGMA_MM):
    if sigma_mm <= 0:
        return h
    return ndimage.gaussian_filter(h, sigma_mm / mm_per_px, mode="nearest")


def penetration(obj: SceneObject, x, y) -> np.ndarray:
    """Unsmoothed depth of ``obj`` below the gel plane at sensor coordinates (mm)."""
    cx, cy = obj.center_mm[:2]
    c, s = np.cos(obj.yaw_rad), np.sin(obj.yaw_rad)
    # coordinates in the object frame (first axis along yaw)
    lx = c * (x - cx) + s * (y - cy)
    ly = -s * (x - cx) + c * (y - cy)
    depth = obj.depth_mm
    kind = obj.primitive
    if kind == "sphere":
        r = obj.dims[0]
        d2 = lx * lx + ly * ly
        sag = r - np.sqrt(np.maximum(r * r - d2, 0.0))
        return np.where(d2 < r * r, np.maximum(depth - sag, 0.0), 0.0)
    if kind == "cylinder":
        r = obj.dims[0]
        half = obj.dims[1] / 2.0 if len(obj.dims) > 1 else np.inf
        d2 = ly * ly
        sag = r - np.sqrt(np.maximum(r * r - d2, 0.0))
        inside = (d2 < r * r) & (np.abs(lx) <= half)
        return np.where(inside, np.maximum(depth - sag, 0.0), 0.0)
    if kind == "box":
        inside = (np.abs(lx) <= obj.dims[0] / 2.0) & (np.abs(ly) <= obj.dims[1] / 2.0)
        return np.where(inside, depth, 0.0)
    base_r, height = obj.dims[:2]
    return np.maximum(depth - np.hypot(lx, ly) * height / base_r, 0.0)


def indent(obj: SceneObject, sensor_size=(320, 240), mm_per_px=0.2,
           sigma_mm=GEL_SIGMA_MM) -> HeightMap:
    """Gel indentation of one primitive pressed ``obj.depth_mm`` into the sensor."""
    width, height = sensor_size
    if obj.center_mm is None:
        obj = SceneObject(obj.primitive, obj.dims,
                          ((width - 1) * mm_per_px / 2, (height - 1) * mm_per_px / 2),
                          obj.yaw_rad, obj.depth_mm)
    rows, cols = np.mgrid[0:height, 0:width]
    raw = penetration(obj, cols * mm_per_px, rows * mm_per_px)
    if obj.depth_mm <= 0 or not (raw > 0).any():
        raise NoContact("object does not indent the gel")
    return HeightMap(_smooth(raw, mm_per_px, sigma_mm), mm_per_px)


def draw_markers(image, positions_px, radius_px, value=DOT_INTENSITY, supersample=5) -> np.ndarray:
    """Paint antialiased dark dots (float image, H x W x 3) at sub-pixel positions."""
    out = np.array(image, float)
    h, w = out.shape[:2]
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    sy, sx = np.meshgrid(offs, offs, indexing="ij")
    reach = int(np.ceil(radius_px)) + 1
    for x, y in np.asarray(positions_px, float).reshape(-1, 2):
        c0, c1 = int(np.floor(x)) - reach, int(np.floor(x)) + reach + 1
        r0, r1 = int(np.floor(y)) - reach, int(np.floor(y)) + reach + 1
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, w), min(r1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        dx = cc[..., None, None] + sx - x
        dy = rr[..., None, None] + sy - y
        cover = ((dx * dx + dy * dy) <= radius_px * radius_px).mean(axis=(-1, -2))
        patch = out[r0:r1, c0:c1]
        patch[:] = patch * (1 - cover[..., None]) + value * cover[..., None]
    return out


@dataclass(frozen=True, eq=False)
class MarkerScene:
    flow: FlowField
    positions_px: np.ndarray  # (rows, cols, 2)
    frame: TactileFrame


def displace_markers(layout: MarkerLayout, load: AppliedLoad, contact: HeightMap,
                     rig: LightRig | None = None, decay_intervals=DECAY_INTERVALS,
                     dot_radius_mm=DOT_RADIUS_MM, contact_threshold=1e-3,
                     sensor_id=0, timestamp=0) -> MarkerScene:
    """Marker flow for ``load`` over ``contact`` plus the rendered frame with dots.

    Markers inside the contact patch move by shear + twist x (p - center);
    outside, that motion decays as exp(-distance / (decay_intervals *
    interval)).  Press pushes markers down the local height slope.  The
    image grid of ``contact`` is the sensor image.
    """
    rest = rest_positions(layout)
    mm = contact.mm_per_px
    rows_px, cols_px = contact.h.shape
    ix = np.clip(np.rint(rest[..., 0]).astype(int), 0, cols_px - 1)
    iy = np.clip(np.rint(rest[..., 1]).astype(int), 0, rows_px - 1)
    touching = contact.h > contact_threshold
    if touching.any():
        dist = ndimage.distance_transform_edt(~touching) * mm
        weight = np.exp(-dist[iy, ix] / (decay_intervals * layout.interval_mm))
    else:
        weight = np.zeros(layout.shape)

    p_mm = rest / layout.px_per_mm
    if load.center_mm is None:
        center = p_mm.reshape(-1, 2).mean(axis=0)
    else:
        center = np.asarray(load.center_mm, float)
    rel = p_mm - center
    base = np.empty(layout.shape + (2,))
    base[..., 0] = load.shear[0] - load.twist * rel[..., 1]
    base[..., 1] = load.shear[1] + load.twist * rel[..., 0]
    disp = weight[..., None] * base
    if load.press:
        gx, gy = central_gradient(contact.h, mm)
        disp[..., 0] -= load.press * gx[iy, ix]
        disp[..., 1] -= load.press * gy[iy, ix]

    flow = FlowField(layout, disp)
    positions = rest + disp * layout.px_per_mm
    if rig is None:
        image = np.full((rows_px, cols_px, 3), BACKGROUND)
    else:
        gx, gy = central_gradient(contact.h, mm)
        image = shade(gx, gy, rig)
    image = draw_markers(image, positions, dot_radius_mm * layout.px_per_mm)
    frame = TactileFrame.from_image(quantize(image), sensor_id, timestamp)
    return MarkerScene(flow, positions, frame)


def synth_contact_audio(freq_hz, duration_s=0.5, decay_s=0.05, snr_db=None, sample_rate=48000,
                        amplitude=0.5, onset_s=0.0, seed=0, timestamp=0) -> AudioClip:
    """Exponentially damped sinusoid starting at ``onset_s`` plus white noise.

    SNR compares the tone power over its first ``decay_s`` with the noise
    power; ``snr_db=None`` gives a clean clip.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate - onset_s
    phase = rng.uniform(0, 2 * np.pi)
    active = t >= 0
    tone = np.zeros(n)
    tone[active] = amplitude * np.exp(-t[active] / decay_s) * np.sin(2 * np.pi * freq_hz * t[active] + phase)
    if snr_db is not None and amplitude != 0:
        head = tone[active & (t < decay_s)]
        power = np.mean(head ** 2) if head.size else np.mean(tone ** 2)
        tone = tone + rng.normal(0.0, np.sqrt(power / 10 ** (snr_db / 10)), n)
    return AudioClip(sample_rate, np.clip(tone, -1.0, 1.0), timestamp)


def synth_accel(duration_s, sample_rate=1000.0, gravity=(0.0, 0.0, 9.81), bursts=(),
                noise_std=0.0, seed=0, timestamp=0, axis=None) -> AccelStream:
    """Accelerometer stream: constant gravity plus sinusoidal bursts.

    ``bursts`` holds (start_s, end_s, freq_hz, amplitude) tuples.  The
    vibration acts along ``axis`` (default: the gravity direction, where it
    shows up at first order in the acceleration magnitude).
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    acc = np.tile(np.asarray(gravity, float), (n, 1))
    if axis is None:
        axis = gravity if np.any(gravity) else (0.0, 0.0, 1.0)
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    for start, end, freq, amp in bursts:
        on = (t >= start) & (t < end)
        acc[on] += amp * np.sin(2 * np.pi * freq * (t[on] - start))[:, None] * axis
    if noise_std:
        acc += rng.normal(0.0, noise_std, acc.shape)
    return AccelStream(acc, sample_rate, timestamp)


def synth_thermal(ambient_c=22.0, hot_blocks=(), seed=None, noise_std=0.0) -> ThermalFrame:
    """32x24 thermal image with rectangular hot blocks (row0, col0, rows, cols, temp)."""
    temps = np.full((24, 32), float(ambient_c))
    for r0, c0, nr, nc, temp in hot_blocks:
        temps[r0:r0 + nr, c0:c0 + nc] = temp
    if noise_std:
        temps += np.random.default_rng(seed).normal(0, noise_std, temps.shape)
    return ThermalFrame(temps)


def _depth_along_normal(obj: SceneObject, origins, normal):
    """Deepest reach of ``obj`` past each origin along ``normal`` (<= 0 if missed)."""
    c = np.asarray(obj.center_mm if obj.center_mm is not None else (0, 0, 0), float)
    c = np.r_[c, np.zeros(3 - len(c))]
    w = c - origins
    miss = np.full(len(origins), -np.inf)
    if obj.primitive == "sphere":
        r = obj.dims[0]
        along = w @ normal
        perp2 = np.einsum("ij,ij->i", w, w) - along ** 2
        ok = perp2 < r * r
        return np.where(ok, along + np.sqrt(np.maximum(r * r - perp2, 0.0)), miss)
    if obj.primitive == "cylinder":
        r = obj.dims[0]
        half = obj.dims[1] / 2.0 if len(obj.dims) > 1 else np.inf
        wxy = w[:, :2]
        nxy = normal[:2]
        along = wxy @ nxy
        perp2 = np.einsum("ij,ij->i", wxy, wxy) - along ** 2
        ok = (perp2 < r * r) & (np.abs(w[:, 2]) <= half)
        return np.where(ok, along + np.sqrt(np.maximum(r * r - perp2, 0.0)), miss)
    if obj.primitive == "box":
        cy, sy = np.cos(obj.yaw_rad), np.sin(obj.yaw_rad)
        rot = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        o = (origins - c) @ rot
        d = normal @ rot
        half = np.asarray(obj.dims[:3] if len(obj.dims) >= 3 else obj.dims[:2] + (np.inf,)) / 2.0
        t_lo = np.full(len(origins), -np.inf)
        t_hi = np.full(len(origins), np.inf)
        for k in range(3):
            if abs(d[k]) < 1e-12:
                outside = np.abs(o[:, k]) > half[k]
                t_hi = np.where(outside, -np.inf, t_hi)
                continue
            a = (-half[k] - o[:, k]) / d[k]
            b = (half[k] - o[:, k]) / d[k]
            t_lo = np.maximum(t_lo, np.minimum(a, b))
            t_hi = np.minimum(t_hi, np.maximum(a, b))
        return np.where(t_hi >= t_lo, t_hi, miss)
    raise ValueError("grasp scenes support sphere, cylinder and box objects")


def sensor_depth_map(obj: SceneObject, pose: SensorPose, geom: HandGeometry,
                     sigma_mm=GEL_SIGMA_MM) -> HeightMap:
    mm = geom.sensor_mm_per_px
    rows, cols = np.mgrid[0:geom.sensor_height_px, 0:geom.sensor_width_px]
    local = np.stack([cols.ravel() * mm, rows.ravel() * mm, np.zeros(cols.size)], axis=1)
    origins = pose.apply(local)
    depth = _depth_along_normal(obj, origins, pose.normal)
    raw = np.maximum(depth, 0.0).reshape(rows.shape)
    return HeightMap(_smooth(raw, mm, sigma_mm) if raw.any() else raw, mm)


def make_grasp_scene(geom: HandGeometry, obj: SceneObject, state: HandState,
                     sigma_mm=GEL_SIGMA_MM) -> list[tuple[SensorPose, HeightMap]]:
    """Per-sensor indentation maps of one rigid object held in the hand."""
    fk = forward_kinematics(geom, state)
    scene = [(pose, sensor_depth_map(obj, pose, geom, sigma_mm)) for pose in fk.poses]
    if not any(hm.h.max() > 0 for _, hm in scene):
        raise NoContact("object touches none of the sensors")
    return scene


def enveloping_state(geom: HandGeometry, center_xy, radius, depth_mm) -> HandState:
    """Joint angles putting every sensing plane ``depth_mm`` inside a round object.

    Each link line is placed at distance ``radius - depth_mm`` from the
    object center with the tangent point on the link itself.  The proximal
    angle is solved first, then the most curled distal angle that works.
    """
    from scipy.optimize import brentq
    from .kinematics import LEFT, RIGHT, Unreachable, link_direction, SIDE_SIGN

    center = np.asarray(center_xy, float)
    target = radius - depth_mm
    (p_lo, p_hi), (d_lo, d_hi) = geom.limits_rad()

    def roots(gap, lo, hi, start, length):
        grid = np.linspace(lo, hi, 301)
        vals = np.array([gap(a) for a in grid])
        found = []
        for k in np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]:
            a = brentq(gap, grid[k], grid[k + 1])
            along = (center - start) @ dirn(a)
            if 0.0 < along < length:
                found.append(a)
        return found

    q = []
    for finger in (LEFT, RIGHT):
        s = SIDE_SIGN[finger]

        def dirn(a):
            return link_direction(finger, a)

        def gap_from(start, offset=0.0):
            def gap(a):
                d = dirn(offset + a)
                return (center - start) @ (s * np.array([-d[1], d[0]])) - target
            return gap

        base = geom.base(finger)
        q1s = roots(gap_from(base), p_lo, p_hi, base, geom.proximal_len_mm)
        if not q1s:
            raise Unreachable("proximal link cannot touch the object")
        q1 = q1s[0]
        joint = base + geom.proximal_len_mm * dirn(q1)
        gap2 = gap_from(joint, q1)
        q2s = [v for v in roots(gap2, d_lo, d_hi, joint, np.inf)
               if 0.0 < (center - joint) @ dirn(q1 + v) < geom.distal_len_mm]
        if not q2s:
            raise Unreachable("distal link cannot touch the object")
        q.extend((q1, max(q2s)))
    return HandState(np.array(q))
