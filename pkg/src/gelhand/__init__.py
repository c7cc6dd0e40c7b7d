"""Simulated perception stack for a two-finger hand with GelSight phalanges.

Submodules: :mod:`core` (shared types), :mod:`photometric` (shading and
shape from shading), :mod:`tracking` (marker matching), :mod:`forces`
(shear/torsion cues), :mod:`kinematics` (hand model and point clouds),
:mod:`multimodal` (sound, vibration, heat), :mod:`simulator` (ground truth),
:mod:`stream` (wire protocol) and :mod:`pipeline` (end to end).
"""
from .core import (
    DISTAL_LAYOUT, PROXIMAL_LAYOUT, AccelStream, AudioClip, DimensionMismatch, FlowField, GelHandError,
    GradientField, HeightMap, MarkerLayout, NonFinite, TactileFrame, ThermalFrame, rest_positions,
    validate_frame,
)

__version__ = "0.1.0"
