"""Force-regime cues from a marker flow field.

Shear shows up as a net translation of the markers, torsion as curl, and
normal pressure as divergence.  All scores are reported in mm of marker
displacement; nothing here is calibrated to Newtons.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import FlowField, GelHandError

MIXED_BAND = 0.25
REGIMES = ("none", "shear", "torsion", "mixed")


class AllInterpolated(GelHandError, ValueError):
    pass


class GridTooSmall(GelHandError, ValueError):
    pass


def vector_sum(flow: FlowField) -> tuple[np.ndarray, float]:
    """Sum of the observed (non-interpolated) displacements and its norm."""
    if not flow.valid.any():
        raise AllInterpolated("every marker in the flow field is interpolated")
    total = flow.displacement[flow.valid].sum(axis=0)
    return total, float(np.hypot(*total))


def _partials(flow: FlowField):
    if flow.layout.rows < 3 or flow.layout.cols < 3:
        raise GridTooSmall(f"need a grid of at least 3x3, got {flow.layout.rows}x{flow.layout.cols}")
    d = flow.displacement
    step = flow.layout.interval_mm
    # np.gradient: central differences inside, one-sided at the border
    dvx_dy, dvx_dx = np.gradient(d[..., 0], step)
    dvy_dy, dvy_dx = np.gradient(d[..., 1], step)
    return dvx_dx, dvx_dy, dvy_dx, dvy_dy


def curl_field(flow: FlowField) -> np.ndarray:
    """dv_y/dx - dv_x/dy per marker (1/mm)."""
    _, dvx_dy, dvy_dx, _ = _partials(flow)
    return dvy_dx - dvx_dy


def divergence_field(flow: FlowField) -> np.ndarray:
    dvx_dx, _, _, dvy_dy = _partials(flow)
    return dvx_dx + dvy_dy


def divergence_score(flow: FlowField) -> float:
    div = divergence_field(flow)[1:-1, 1:-1]
    return float(flow.layout.interval_mm / 2.0 * np.abs(div).max())


def rotation_estimate(flow: FlowField) -> float:
    """Rigid rotation (rad) implied by the mean interior curl."""
    return float(curl_field(flow)[1:-1, 1:-1].mean() / 2.0)


@dataclass(frozen=True)
class ForceSummary:
    shear_score: float
    torsion_score: float
    divergence_score: float
    regime: str
    shear_direction: tuple | None = None
    timestamp: int = 0

    def to_dict(self) -> dict:
        return {
            "timestamp": int(self.timestamp),
            "shear_score": round(self.shear_score, 9),
            "torsion_score": round(self.torsion_score, 9),
            "divergence_score": round(self.divergence_score, 9),
            "regime": self.regime,
            "shear_direction": None if self.shear_direction is None
            else [round(v, 9) for v in self.shear_direction],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def decide_regime(shear, torsion, noise_floor, band=MIXED_BAND) -> str:
    if shear < noise_floor and torsion < noise_floor:
        return "none"
    if shear >= noise_floor and torsion >= noise_floor and abs(shear - torsion) <= band * max(shear, torsion):
        return "mixed"
    if shear >= noise_floor and shear > torsion:
        return "shear"
    return "torsion"


def classify(flow: FlowField, noise_floor=0.05, timestamp=0) -> ForceSummary:
    if not noise_floor > 0:
        raise ValueError("noise_floor must be positive")
    total, mag = vector_sum(flow)
    shear = mag / int(flow.valid.sum())
    torsion = float(flow.layout.interval_mm / 2.0 * np.abs(curl_field(flow)).max())
    regime = decide_regime(shear, torsion, noise_floor)
    direction = None
    if regime in ("shear", "mixed") and mag > 0:
        direction = tuple(float(v) for v in total / mag)
    return ForceSummary(shear, torsion, divergence_score(flow), regime, direction, timestamp)


def write_summaries(path, summaries) -> None:
    with open(path, "w") as f:
        for s in summaries:
            f.write(s.to_json() + "\n")
