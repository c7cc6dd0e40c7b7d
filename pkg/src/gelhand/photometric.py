"""Gel shading under three colored lights and its inversion.

The forward model is Lambertian: every color channel is lit by one
directional source, so a pixel's RGB is a linear function of the surface
normal (until it clips at zero).  Inverting that 3x3 system per pixel gives
the surface gradients, which :func:`poisson_integrate` turns back into a
height map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.fft import dct, dst, idctn
from scipy.spatial import cKDTree

from .core import GelHandError, GradientField, HeightMap, NonFinite, TactileFrame
from . import io as _io

NZ_FLOOR = 0.1
MAX_CONDITION = 1e6


class SingularLighting(GelHandError, ValueError):
    pass


class LUTNotBuilt(GelHandError, RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LightRig:
    """Three directional lights, one per color channel (rows R, G, B)."""

    directions: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))
    ambient: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))
    albedo: float = 0.8

    def __post_init__(self):
        d = np.array(self.directions, float).reshape(3, 3)
        if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9):
            raise ValueError("light directions must be unit vectors")
        for name in ("intensity", "ambient"):
            v = np.broadcast_to(np.asarray(getattr(self, name), float), (3,)).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        d.flags.writeable = False
        object.__setattr__(self, "directions", d)

    @classmethod
    def from_angles(cls, azimuths_deg=(90.0, 210.0, 330.0), elevation_deg=45.0, **kw) -> "LightRig":
        """Lights at the given azimuths (image x toward y) and a common elevation."""
        az = np.radians(np.asarray(azimuths_deg, float))
        el = np.radians(np.broadcast_to(np.asarray(elevation_deg, float), az.shape))
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        return cls(d, **kw)

    @property
    def matrix(self) -> np.ndarray:
        """Scaled light matrix L with rows albedo * intensity_c * l_c."""
        return self.albedo * self.intensity[:, None] * self.directions

    def check(self) -> np.ndarray:
        m = self.matrix
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond >= MAX_CONDITION:
            raise SingularLighting(f"light matrix is singular (condition number {cond:.3g})")
        return m

    def to_config(self) -> dict:
        cfg = {f"dir_{c}": list(self.directions[i]) for i, c in enumerate("rgb")}
        cfg.update(intensity=list(self.intensity), ambient=list(self.ambient), albedo=self.albedo)
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "LightRig":
        def vec(key, default):
            if key not in cfg:
                return default
            v = cfg[key]
            return _io.parse_floats(v) if isinstance(v, str) else list(v)

        if "dir_r" in cfg:
            dirs = [vec(f"dir_{c}", None) for c in "rgb"]
            rig = cls(dirs)
        else:
            rig = cls.from_angles(vec("azimuths_deg", (90.0, 210.0, 330.0)),
                                  float(cfg.get("elevation_deg", 45.0)))
        return cls(
            rig.directions,
            intensity=vec("intensity", rig.intensity),
            ambient=vec("ambient", rig.ambient),
            albedo=float(cfg.get("albedo", rig.albedo)),
        )


DEFAULT_RIG = LightRig.from_angles()


def central_gradient(h, mm_per_px=1.0):
    """Central differences with mirrored (zero normal derivative) borders."""
    p = np.pad(np.asarray(h, float), 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / (2.0 * mm_per_px)
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2.0 * mm_per_px)
    return gx, gy


def shade(gx, gy, rig: LightRig) -> np.ndarray:
    """Unquantized Lambertian intensities (..., 3) for the given slopes."""
    gx = np.asarray(gx, float)
    gy = np.asarray(gy, float)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    n = np.stack([-gx / norm, -gy / norm, 1.0 / norm], axis=-1)
    lambert = np.maximum(0.0, n @ rig.directions.T)
    return np.clip(rig.albedo * rig.intensity * lambert + rig.ambient, 0.0, 1.0)


def quantize(intensity) -> np.ndarray:
    return np.clip(np.rint(np.asarray(intensity) * 255.0), 0, 255).astype(np.uint8)


def render(height: HeightMap, rig: LightRig = DEFAULT_RIG, sensor_id=0, timestamp=0) -> TactileFrame:
    gx, gy = central_gradient(height.h, height.mm_per_px)
    return TactileFrame.from_image(quantize(shade(gx, gy, rig)), sensor_id, timestamp)


def _fill_invalid(values, invalid):
    if not invalid.any():
        return values
    if invalid.all():
        return np.zeros_like(values)
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def recover_gradients(frame: TactileFrame, rig: LightRig = DEFAULT_RIG, mask=None,
                      nz_floor=NZ_FLOOR) -> GradientField:
    """Per-pixel photometric stereo.

    Shadowed or saturated pixels, and pixels flagged in ``mask`` (e.g.
    markers), take the gradient of their nearest valid neighbor.
    """
    m = rig.check()
    img = frame.as_float()
    signal = img - rig.ambient
    invalid = (signal <= 0.0).any(axis=-1) | (frame.image == 255).any(axis=-1)
    if mask is not None:
        invalid |= np.asarray(mask, bool)
    scaled = signal @ np.linalg.inv(m).T
    norm = np.linalg.norm(scaled, axis=-1)
    norm[norm == 0] = 1.0
    n = scaled / norm[..., None]
    nz = np.maximum(n[..., 2], nz_floor)
    gx = _fill_invalid(-n[..., 0] / nz, invalid)
    gy = _fill_invalid(-n[..., 1] / nz, invalid)
    return GradientField(gx, gy)


class GradientLUT:
    """RGB -> gradient table calibrated on a synthetic hemisphere.

    Each distinct 8-bit color seen on the calibration ball stores the mean
    of the gradients that produced it; lookups return the entry nearest in
    RGB space.
    """

    def __init__(self):
        self._tree = None
        self._grads = None
        self.radius_px = None
        self.max_slope = None

    @property
    def built(self) -> bool:
        return self._tree is not None

    @property
    def bin_width(self) -> float:
        """Coarsest gradient step between neighboring calibration pixels."""
        if not self.built:
            raise LUTNotBuilt("lookup table has not been built")
        return (1.0 + self.max_slope ** 2) ** 1.5 / self.radius_px

    def __len__(self):
        return 0 if self._grads is None else len(self._grads)

    def build(self, rig: LightRig, samples=4000, max_slope=1.5) -> "GradientLUT":
        if samples < 1000:
            raise ValueError("need at least 1000 calibration samples")
        # pixels with slope <= max_slope fill a disk of area pi*R^2*s^2/(1+s^2)
        frac = max_slope ** 2 / (1.0 + max_slope ** 2)
        radius = float(np.ceil(np.sqrt(samples / (np.pi * frac))))
        n = int(2 * radius + 3)
        c = (n - 1) / 2.0
        y, x = np.mgrid[0:n, 0:n] - c
        z2 = radius ** 2 - x * x - y * y
        inside = z2 > 0
        z = np.sqrt(np.where(inside, z2, 1.0))
        gx, gy = -x / z, -y / z
        keep = inside & (gx * gx + gy * gy <= max_slope ** 2)
        rgb = quantize(shade(gx[keep], gy[keep], rig)).astype(np.int64)
        grads = np.stack([gx[keep], gy[keep]], axis=1)

        keys = (rgb[:, 0] << 16) | (rgb[:, 1] << 8) | rgb[:, 2]
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        sums = np.zeros((len(uniq), 2))
        np.add.at(sums, inverse, grads)
        colors = np.stack([(uniq >> 16) & 255, (uniq >> 8) & 255, uniq & 255], axis=1)
        self._tree = cKDTree(colors.astype(float))
        self._grads = sums / counts[:, None]
        self.radius_px = radius
        self.max_slope = max_slope
        return self

    def lookup(self, rgb) -> np.ndarray:
        """Gradients (..., 2) for 8-bit colors (..., 3)."""
        if not self.built:
            raise LUTNotBuilt("lookup table has not been built")
        rgb = np.asarray(rgb, float)
        _, idx = self._tree.query(rgb.reshape(-1, 3))
        return self._grads[idx].reshape(rgb.shape[:-1] + (2,))

    def recover(self, frame: TactileFrame) -> GradientField:
        g = self.lookup(frame.image)
        return GradientField(g[..., 0], g[..., 1])


def build_lut(rig: LightRig, samples=4000, max_slope=1.5) -> GradientLUT:
    return GradientLUT().build(rig, samples, max_slope)


def poisson_integrate(grad: GradientField, mm_per_px=1.0) -> HeightMap:
    """Least-squares height map for a gradient field.

    Minimizes the squared mismatch between the mirrored-border central
    differences of h (as in :func:`central_gradient`) and the given slopes.
    That operator maps the DCT-II basis onto the DST-II basis, so the normal
    equations are diagonal and the solve is exact in O(N log N).
    """
    gx = np.asarray(grad.gx, float)
    gy = np.asarray(grad.gy, float)
    if not (np.isfinite(gx).all() and np.isfinite(gy).all()):
        raise NonFinite("gradient field contains non-finite values")
    rows, cols = gx.shape
    # orthonormal DST-II index k holds mode k+1; DCT mode m pairs with DST mode m
    ax = np.zeros_like(gx)
    ay = np.zeros_like(gy)
    if cols > 1:
        bx = dst(dct(gx, type=2, norm="ortho", axis=0), type=2, norm="ortho", axis=1)
        ax[:, 1:] = bx[:, :-1]
    if rows > 1:
        by = dct(dst(gy, type=2, norm="ortho", axis=0), type=2, norm="ortho", axis=1)
        ay[1:, :] = by[:-1, :]
    sx = np.sin(np.pi * np.arange(cols) / cols)[None, :]
    sy = np.sin(np.pi * np.arange(rows) / rows)[:, None]
    denom = sx * sx + sy * sy
    denom[0, 0] = 1.0
    coef = -(sx * ax + sy * ay) / denom
    coef[0, 0] = 0.0
    h = idctn(coef, type=2, norm="ortho") * mm_per_px
    return HeightMap(h - h.min(), mm_per_px)


def reconstruct(frame: TactileFrame, rig: LightRig = DEFAULT_RIG, mm_per_px=1.0, mask=None) -> HeightMap:
    return poisson_integrate(recover_gradients(frame, rig, mask), mm_per_px)


def export_heightmap(hmap: HeightMap, path, floor=None) -> None:
    """Write a height map as PLY (``.ply``) or 16-bit PGM (anything else)."""
    path = str(path)
    if path.endswith(".ply"):
        rows, cols = np.mgrid[0:hmap.height, 0:hmap.width]
        keep = np.ones(hmap.h.shape, bool) if floor is None else hmap.h > floor
        pts = np.stack([cols[keep] * hmap.mm_per_px, rows[keep] * hmap.mm_per_px, hmap.h[keep]], axis=1)
        _io.write_ply(path, pts)
    else:
        _io.write_pgm16(path, hmap.h)
