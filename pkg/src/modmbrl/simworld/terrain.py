"""Heightfields over x in [-2, 30] m sampled every 5 cm."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .constants import HF_DX, HF_N, HF_X0, WIN_DX, WIN_N, WIN_X0

STEP_PER_LEVEL = 0.02
FEATURE_START = 1.0
STAIR_DEPTH = 0.30
CURB_WIDTH = 0.30
CURB_PERIOD = 1.5
STAGGER_FLAT = 0.9
JITTER = 0.1


class TerrainKind(Enum):
    FLAT = "flat"
    STAIRS = "stairs"
    CURBS = "curbs"
    STAGGERED = "staggered"

    @classmethod
    def parse(cls, name: str) -> "TerrainKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown terrain kind {name!r}") from None


@dataclass(frozen=True, eq=False)
class Heightfield:
    kind: TerrainKind
    level: int
    seed: int
    heights: np.ndarray

    @property
    def feature_height(self) -> float:
        return STEP_PER_LEVEL * self.level

    def height_at(self, x):
        k = np.clip(np.floor((np.asarray(x) - HF_X0) / HF_DX).astype(np.int64), 0, HF_N - 1)
        return self.heights[k]


def sample_x() -> np.ndarray:
    return HF_X0 + HF_DX * np.arange(HF_N)


def make_terrain(kind, level: int, seed: int = 0) -> Heightfield:
    if isinstance(kind, str):
        kind = TerrainKind.parse(kind)
    if not isinstance(kind, TerrainKind):
        raise ValueError(f"unknown terrain kind {kind!r}")
    if level < 0:
        raise ValueError("difficulty level must be >= 0")
    h = STEP_PER_LEVEL * level
    xs = sample_x()
    # evaluate at cell centres so edges do not sit on float boundaries
    xc = xs + 0.5 * HF_DX
    rng = np.random.default_rng(seed)
    z = np.zeros(HF_N)
    if kind is TerrainKind.STAIRS:
        start = FEATURE_START + rng.uniform(-JITTER, JITTER)
        up = xc >= start
        z[up] = h * (np.floor((xc[up] - start) / STAIR_DEPTH) + 1)
    elif kind is TerrainKind.CURBS:
        n = int((xs[-1] - FEATURE_START) / CURB_PERIOD) + 1
        starts = FEATURE_START + CURB_PERIOD * np.arange(n) + rng.uniform(-JITTER, JITTER, n)
        for s in starts:
            z[(xc >= s) & (xc < s + CURB_WIDTH)] = h
    elif kind is TerrainKind.STAGGERED:
        tread = STAIR_DEPTH + STAGGER_FLAT
        n = int((xs[-1] - FEATURE_START) / tread) + 1
        edges = FEATURE_START + tread * np.arange(n) + rng.uniform(-JITTER, JITTER, n)
        for s in edges:
            z[xc >= s] += h
    return Heightfield(kind, int(level), int(seed), z)


def window_offsets() -> np.ndarray:
    return WIN_X0 + WIN_DX * np.arange(WIN_N)


def ground_height(heights: np.ndarray, x) -> np.ndarray:
    """Terrain height directly below ``x``; ``heights`` is (n,) or (B, n) with x (B,)."""
    heights = np.asarray(heights)
    x = np.asarray(x, dtype=np.float64)
    k = np.clip(np.floor((x - HF_X0) / HF_DX).astype(np.int64), 0, HF_N - 1)
    if heights.ndim == 1:
        return heights[k]
    return heights[np.arange(heights.shape[0]), k.reshape(-1)].reshape(k.shape)


def flat_window(heights: np.ndarray, x, z) -> np.ndarray:
    """The window a robot at this height would see if the ground were flat.

    Every sample is the height of the ground below the body, so on flat
    terrain it equals :func:`terrain_window` exactly while hiding every
    feature elsewhere.
    """
    g = ground_height(heights, x) - np.asarray(z, dtype=np.float64)
    return np.repeat(g[..., None], WIN_N, axis=-1)


def terrain_window(heights: np.ndarray, x, z) -> np.ndarray:
    """Body-relative heights at the 21 window offsets.

    ``heights`` is (n,) or (B, n); x, z are scalars or (B,).
    Returns (21,) or (B, 21).
    """
    heights = np.asarray(heights)
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    pts = x[..., None] + window_offsets()
    k = np.clip(np.floor((pts - HF_X0) / HF_DX).astype(np.int64), 0, HF_N - 1)
    if heights.ndim == 1:
        h = heights[k]
    else:
        h = np.take_along_axis(heights, k.reshape(heights.shape[0], -1), axis=1).reshape(k.shape)
    return h - z[..., None]
