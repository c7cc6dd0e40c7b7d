"""Planar kinematics of the two-finger hand and tactile point-cloud fusion.

Both fingers move in the palm x-y plane.  Finger bases sit at
``(-base_separation/2, 0)`` (left) and ``(+base_separation/2, 0)`` (right);
joint angles are measured from +y and grow as the finger curls toward the
other one.  Sensor ids: 0 left proximal, 1 left distal, 2 right proximal,
3 right distal.

A sensor frame has its image columns along the link, its image rows along
the palm normal (z), and its third axis pointing into the finger body, so a
contact height h is a distance from the undeformed gel plane into the finger.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .core import GelHandError, HeightMap
from . import io as _io

LEFT, RIGHT = 0, 1
SIDE_SIGN = {LEFT: -1.0, RIGHT: 1.0}
PROXIMAL_RATIO = 1.2
DISTAL_RATIO = 0.9
PROXIMAL_SPAN_DEG = 95.0
DISTAL_SPAN_DEG = 150.0


class JointLimit(GelHandError, ValueError):
    pass


class Unreachable(GelHandError, ValueError):
    pass


@dataclass(frozen=True)
class HandGeometry:
    palm_len_mm: float = 40.0
    proximal_len_mm: float | None = None
    distal_len_mm: float | None = None
    base_separation_mm: float = 60.0
    proximal_limits_deg: tuple[float, float] = (0.0, 95.0)
    distal_limits_deg: tuple[float, float] = (-60.0, 90.0)
    sensor_width_px: int = 320
    sensor_height_px: int = 240
    sensor_mm_per_px: float = 0.2
    face_offset_mm: float = 0.0
    custom_links: bool = False

    def __post_init__(self):
        if self.proximal_len_mm is None:
            object.__setattr__(self, "proximal_len_mm", PROXIMAL_RATIO * self.palm_len_mm)
        if self.distal_len_mm is None:
            object.__setattr__(self, "distal_len_mm", DISTAL_RATIO * self.palm_len_mm)
        for name in ("palm_len_mm", "proximal_len_mm", "distal_len_mm", "base_separation_mm",
                     "sensor_mm_per_px"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.custom_links:
            if not np.isclose(self.proximal_len_mm, PROXIMAL_RATIO * self.palm_len_mm) or \
                    not np.isclose(self.distal_len_mm, DISTAL_RATIO * self.palm_len_mm):
                raise ValueError("link lengths must keep the 1 : 1.2 : 0.9 palm/proximal/distal "
                                 "ratio unless custom_links is set")
        for name, span in (("proximal_limits_deg", PROXIMAL_SPAN_DEG),
                           ("distal_limits_deg", DISTAL_SPAN_DEG)):
            lo, hi = (float(v) for v in getattr(self, name))
            if not np.isclose(hi - lo, span):
                raise ValueError(f"{name} must span {span:g} degrees, got {hi - lo:g}")
            object.__setattr__(self, name, (lo, hi))

    @property
    def reach_mm(self) -> float:
        return self.proximal_len_mm + self.distal_len_mm

    def base(self, finger) -> np.ndarray:
        return np.array([SIDE_SIGN[finger] * self.base_separation_mm / 2.0, 0.0])

    def limits_rad(self):
        return np.radians(self.proximal_limits_deg), np.radians(self.distal_limits_deg)

    def within_limits(self, q1, q2, tol=1e-12) -> bool:
        (p_lo, p_hi), (d_lo, d_hi) = self.limits_rad()
        return p_lo - tol <= q1 <= p_hi + tol and d_lo - tol <= q2 <= d_hi + tol

    def to_config(self) -> dict:
        return {
            "palm_len_mm": self.palm_len_mm,
            "proximal_len_mm": self.proximal_len_mm,
            "distal_len_mm": self.distal_len_mm,
            "base_separation_mm": self.base_separation_mm,
            "proximal_limits_deg": list(self.proximal_limits_deg),
            "distal_limits_deg": list(self.distal_limits_deg),
            "sensor_width_px": self.sensor_width_px,
            "sensor_height_px": self.sensor_height_px,
            "sensor_mm_per_px": self.sensor_mm_per_px,
            "face_offset_mm": self.face_offset_mm,
            "custom_links": int(self.custom_links),
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "HandGeometry":
        kw = {}
        for key, value in cfg.items():
            if key not in cls.__dataclass_fields__:
                continue
            if key.endswith("_limits_deg"):
                value = tuple(_io.parse_floats(value) if isinstance(value, str) else value)
            elif key in ("sensor_width_px", "sensor_height_px"):
                value = int(value)
            elif key == "custom_links":
                value = str(value).strip().lower() in ("1", "true", "yes")
            else:
                value = float(value)
            kw[key] = value
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class HandState:
    """Joint angles (rad) ordered left proximal, left distal, right proximal, right distal."""

    q: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        q = np.array(self.q, float).reshape(4)
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @classmethod
    def from_degrees(cls, *angles) -> "HandState":
        return cls(np.radians(np.asarray(angles, float).reshape(4)))

    def finger(self, finger) -> tuple[float, float]:
        return float(self.q[2 * finger]), float(self.q[2 * finger + 1])

    def to_config(self) -> dict:
        return {"q_deg": [float(v) for v in np.degrees(self.q)]}

    @classmethod
    def from_config(cls, cfg: dict) -> "HandState":
        q = cfg["q_deg"]
        return cls.from_degrees(*(_io.parse_floats(q) if isinstance(q, str) else q))


@dataclass(frozen=True, eq=False)
class SensorPose:
    """Rigid transform from a sensor frame (u, v, depth) in mm to the palm frame."""

    sensor_id: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, float).reshape(3, 3)
        t = np.array(self.translation, float).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("sensor rotation must be orthonormal")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, sensor_id=0) -> "SensorPose":
        return cls(sensor_id, np.eye(3), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, float) @ self.rotation.T + self.translation

    @property
    def normal(self) -> np.ndarray:
        """Unit normal pointing into the finger body."""
        return self.rotation[:, 2]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    sensor_ids: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, float).reshape(-1, 3)
        s = np.array(self.sensor_ids, int).reshape(-1)
        if len(s) != len(p):
            raise ValueError("one sensor id per point required")
        if not np.isfinite(p).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "sensor_ids", s)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, int))

    def write_ply(self, path) -> None:
        _io.write_ply(path, self.points, self.sensor_ids)

    @classmethod
    def read_ply(cls, path) -> "PointCloud":
        pts, ids = _io.read_ply(path)
        return cls(pts, np.zeros(len(pts), int) if ids is None else ids)


@dataclass(frozen=True, eq=False)
class FKResult:
    poses: tuple
    fingertips: np.ndarray  # (2, 2): left, right
    joints: np.ndarray  # (2, 2): distal joint positions


def link_direction(finger, angle) -> np.ndarray:
    s = SIDE_SIGN[finger]
    return np.array([-s * np.sin(angle), np.cos(angle)])


def sensor_pose(geom: HandGeometry, finger, start, angle, length, sensor_id) -> SensorPose:
    """Pose of the sensing plane of a link starting at ``start`` with absolute ``angle``."""
    s = SIDE_SIGN[finger]
    a = link_direction(finger, angle)
    toward_object = s * np.array([-a[1], a[0]])
    e_u = np.array([a[0], a[1], 0.0])
    e_v = np.array([0.0, 0.0, s])
    e_n = np.cross(e_u, e_v)
    mid = np.asarray(start, float) + 0.5 * length * a + geom.face_offset_mm * toward_object
    mm = geom.sensor_mm_per_px
    t = np.array([mid[0], mid[1], 0.0])
    t -= 0.5 * (geom.sensor_width_px - 1) * mm * e_u
    t -= 0.5 * (geom.sensor_height_px - 1) * mm * e_v
    return SensorPose(sensor_id, np.column_stack([e_u, e_v, e_n]), t)


def forward_kinematics(geom: HandGeometry, state: HandState) -> FKResult:
    poses = []
    tips = np.zeros((2, 2))
    joints = np.zeros((2, 2))
    for finger in (LEFT, RIGHT):
        q1, q2 = state.finger(finger)
        if not geom.within_limits(q1, q2):
            raise JointLimit(
                f"finger {finger} angles ({np.degrees(q1):.2f}, {np.degrees(q2):.2f}) deg outside "
                f"{geom.proximal_limits_deg} / {geom.distal_limits_deg}"
            )
        base = geom.base(finger)
        joint = base + geom.proximal_len_mm * link_direction(finger, q1)
        tip = joint + geom.distal_len_mm * link_direction(finger, q1 + q2)
        poses.append(sensor_pose(geom, finger, base, q1, geom.proximal_len_mm, 2 * finger))
        poses.append(sensor_pose(geom, finger, joint, q1 + q2, geom.distal_len_mm, 2 * finger + 1))
        tips[finger] = tip
        joints[finger] = joint
    return FKResult(tuple(poses), tips, joints)


def finger_tip(geom: HandGeometry, finger, q1, q2) -> np.ndarray:
    return (geom.base(finger) + geom.proximal_len_mm * link_direction(finger, q1)
            + geom.distal_len_mm * link_direction(finger, q1 + q2))


@dataclass(frozen=True)
class IKResult:
    solutions: list  # (q1, q2) pairs inside the joint limits
    rejected: list  # valid geometric solutions outside the limits


def inverse_kinematics(geom: HandGeometry, target, finger=RIGHT, tol=1e-9) -> IKResult:
    """Closed-form two-link solutions placing the fingertip at ``target`` (palm frame)."""
    lp, ld = geom.proximal_len_mm, geom.distal_len_mm
    d = np.asarray(target, float) - geom.base(finger)
    x_in = -SIDE_SIGN[finger] * d[0]
    y = d[1]
    dist = np.hypot(x_in, y)
    if dist > lp + ld + tol or dist < abs(lp - ld) - tol:
        raise Unreachable(f"target at {dist:.3f} mm from the finger base is outside "
                          f"[{abs(lp - ld):.3f}, {lp + ld:.3f}]")
    cos2 = np.clip((dist * dist - lp * lp - ld * ld) / (2 * lp * ld), -1.0, 1.0)
    base_q2 = float(np.arccos(cos2))
    phi = np.arctan2(x_in, y)
    solutions, rejected = [], []
    for q2 in ((base_q2,) if base_q2 == 0.0 else (base_q2, -base_q2)):
        q1 = float(phi - np.arctan2(ld * np.sin(q2), lp + ld * np.cos(q2)))
        q1 = float(np.arctan2(np.sin(q1), np.cos(q1)))
        (solutions if geom.within_limits(q1, q2) else rejected).append((q1, q2))
    return IKResult(solutions, rejected)


def project_heightmap(pose: SensorPose, hmap: HeightMap, contact_floor=0.05) -> PointCloud:
    """Pixels deeper than ``contact_floor`` as palm-frame points, row-major order."""
    rows, cols = np.nonzero(hmap.h > contact_floor)
    mm = hmap.mm_per_px
    local = np.stack([cols * mm, rows * mm, hmap.h[rows, cols]], axis=1)
    return PointCloud(pose.apply(local), np.full(len(local), pose.sensor_id))


def merge_clouds(clouds, tol_mm=0.1) -> PointCloud:
    """Concatenate clouds, dropping points within ``tol_mm`` of an earlier cloud's points."""
    kept_pts, kept_ids = [], []
    tree = None
    for cloud in clouds:
        pts = cloud.points
        ids = cloud.sensor_ids
        if tree is not None and len(pts):
            dist, _ = tree.query(pts, distance_upper_bound=tol_mm)
            keep = dist >= tol_mm
            pts, ids = pts[keep], ids[keep]
        kept_pts.append(pts)
        kept_ids.append(ids)
        merged = np.concatenate(kept_pts)
        tree = cKDTree(merged) if len(merged) else None
    if not kept_pts:
        return PointCloud.empty()
    return PointCloud(np.concatenate(kept_pts), np.concatenate(kept_ids))


def _pick(solutions, previous):
    if previous is None:
        return max(solutions, key=lambda s: s[1])
    return min(solutions, key=lambda s: np.hypot(s[0] - previous[0], s[1] - previous[1]))


def _grasp_margin(geom, x_offset, y):
    """Smallest joint-limit margin (rad) of the best IK solution, or -inf."""
    best = -np.inf
    (p_lo, p_hi), (d_lo, d_hi) = geom.limits_rad()
    try:
        res = inverse_kinematics(geom, (geom.base(RIGHT)[0] - x_offset, y), RIGHT)
    except Unreachable:
        return best
    for q1, q2 in res.solutions:
        best = max(best, min(q1 - p_lo, p_hi - q1, q2 - d_lo, d_hi - q2))
    return best


def default_grasp_height(geom: HandGeometry, object_radius, travel_mm=0.0) -> float:
    """Grasp height whose pinch configuration sits farthest from the joint limits.

    With ``travel_mm`` the right contact moves up and the left one down by
    that much; the margin is taken over the start and end of that motion.
    """
    x_offset = geom.base_separation_mm / 2.0 - object_radius
    ys = np.linspace(0.0, geom.reach_mm, 421)
    shifts = (0.0, travel_mm, -travel_mm) if travel_mm else (0.0,)
    margins = np.array([min(_grasp_margin(geom, x_offset, y + d) for d in shifts) for y in ys])
    if not np.isfinite(margins).any() or margins.max() < 0:
        raise Unreachable(f"no pinch grasp reaches an object of radius {object_radius} mm")
    return float(ys[int(np.argmax(margins))])


def plan_roll_trajectory(geom: HandGeometry, object_radius, rotation, steps,
                         grasp_height_mm=None, center_x_mm=0.0) -> list[HandState]:
    """Joint states rolling a round object by ``rotation`` rad between the fingertips.

    The fingertips start at antipodal points (center +- radius along x) and
    slide along their contact tangents in opposite directions by
    ``radius * angle``, which turns the object counterclockwise (positive
    ``rotation``) about its fixed center without slip.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if grasp_height_mm is None:
        grasp_height_mm = default_grasp_height(geom, object_radius, abs(object_radius * rotation))
    states = []
    prev = [None, None]
    for k in range(steps + 1):
        shift = object_radius * rotation * k / steps
        targets = {
            LEFT: (center_x_mm - object_radius, grasp_height_mm - shift),
            RIGHT: (center_x_mm + object_radius, grasp_height_mm + shift),
        }
        q = []
        for finger in (LEFT, RIGHT):
            res = inverse_kinematics(geom, targets[finger], finger)
            if not res.solutions:
                raise Unreachable(f"step {k}: finger {finger} contact {targets[finger]} violates "
                                  "the joint limits")
            sol = _pick(res.solutions, prev[finger])
            prev[finger] = sol
            q.extend(sol)
        states.append(HandState(np.array(q)))
    return states


def fit_circle(xy) -> tuple[np.ndarray, float]:
    """Least-squares circle (center, radius) through 2-D points."""
    xy = np.asarray(xy, float)
    a = np.column_stack([2 * xy, np.ones(len(xy))])
    b = (xy ** 2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c0 = sol[:2]
    r0 = np.sqrt(sol[2] + c0 @ c0)
    res = least_squares(lambda p: np.hypot(*(xy - p[:2]).T) - p[2], np.r_[c0, r0])
    return res.x[:2], float(res.x[2])


def fit_sphere(pts) -> tuple[np.ndarray, float]:
    """Least-squares sphere (center, radius) through 3-D points."""
    pts = np.asarray(pts, float)
    a = np.column_stack([2 * pts, np.ones(len(pts))])
    b = (pts ** 2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c0 = sol[:3]
    r0 = np.sqrt(sol[3] + c0 @ c0)
    res = least_squares(lambda p: np.linalg.norm(pts - p[:3], axis=1) - p[3], np.r_[c0, r0])
    return res.x[:3], float(res.x[3])
