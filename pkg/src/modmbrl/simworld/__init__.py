"""Deterministic surrogate sagittal-plane locomotion simulator."""

from .sim import Layout, Observation, RobotSim, leg_phase_offsets, tripod_baseline, wheel_speed
from .terrain import Heightfield, TerrainKind, make_terrain, terrain_window

__all__ = ["Layout", "Observation", "RobotSim", "Heightfield", "TerrainKind", "make_terrain",
           "terrain_window", "tripod_baseline", "leg_phase_offsets", "wheel_speed"]
