"""Procedural 1-D terrain profiles: height, incline and traction along x.

All functions are vectorized over ``x`` (and over per-instance ``seed`` arrays,
which broadcast against ``x``). Rough ground is seeded value noise: each
lattice cell index is hashed with the seed through the splitmix64 finalizer,
mapped to [-1, 1], and neighbouring lattice values are blended with a
smoothstep.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


class TerrainKind(str, enum.Enum):
    FLAT = "flat"
    SLOPE_UP = "slope_up"
    SLOPE_DOWN = "slope_down"
    ROUGH = "rough"
    STAIRS_UP = "stairs_up"
    STAIRS_DOWN = "stairs_down"
    STEPPING_STONES = "stepping_stones"


@dataclass(frozen=True)
class TerrainParams:
    slope: float = 0.2
    noise_amplitude: float = 0.05
    noise_scale: float = 0.5  # lattice cell length (m)
    step_height: float = 0.1
    step_width: float = 0.5
    riser_band: float = 0.05  # low-traction band in front of each riser (m)
    stone_width: float = 0.4
    stone_gap: float = 0.1
    gap_depth: float = 0.2

    def validate(self) -> None:
        for name in (
            "slope", "noise_amplitude", "noise_scale", "step_height", "step_width",
            "riser_band", "stone_width", "stone_gap", "gap_depth",
        ):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"terrain parameter {name} must be positive, got {value}")
        if self.riser_band >= self.step_width:
            raise ConfigError("riser_band must be narrower than step_width")


@dataclass(frozen=True)
class Terrain:
    kind: TerrainKind
    params: TerrainParams = TerrainParams()

    def __post_init__(self):
        object.__setattr__(self, "kind", TerrainKind(self.kind))
        self.params.validate()


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_TRACTION_SALT = np.uint64(0x5851F42D4C957F2D)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_cell(seed, cell, salt: np.uint64 = np.uint64(0)) -> np.ndarray:
    """Uniform double in [0, 1) determined by (seed, integer cell index, salt)."""
    s = np.asarray(seed, dtype=np.int64).astype(np.uint64)
    c = np.asarray(cell, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(s * _GOLDEN + salt) ^ (c + _GOLDEN)
        z = _mix64(z)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _smoothstep(f):
    return f * f * (3.0 - 2.0 * f)


def _value_noise(x, seed, scale):
    u = np.asarray(x, dtype=np.float64) / scale
    cell = np.floor(u)
    f = u - cell
    c0 = cell.astype(np.int64)
    v0 = 2.0 * hash_cell(seed, c0) - 1.0
    v1 = 2.0 * hash_cell(seed, c0 + 1) - 1.0
    return v0, v1, f


def terrain_height(terrain: Terrain, x, seed=0) -> np.ndarray:
    """Ground height (m) at horizontal position ``x`` (m)."""
    p = terrain.params
    x = np.asarray(x, dtype=np.float64)
    kind = terrain.kind
    if kind is TerrainKind.FLAT:
        return np.zeros(np.broadcast(x, np.asarray(seed)).shape)
    if kind is TerrainKind.SLOPE_UP:
        return p.slope * x + 0.0 * np.asarray(seed)
    if kind is TerrainKind.SLOPE_DOWN:
        return -p.slope * x + 0.0 * np.asarray(seed)
    if kind is TerrainKind.ROUGH:
        v0, v1, f = _value_noise(x, seed, p.noise_scale)
        return p.noise_amplitude * (v0 + _smoothstep(f) * (v1 - v0))
    if kind is TerrainKind.STAIRS_UP:
        return np.floor(x / p.step_width) * p.step_height + 0.0 * np.asarray(seed)
    if kind is TerrainKind.STAIRS_DOWN:
        return -np.floor(x / p.step_width) * p.step_height + 0.0 * np.asarray(seed)
    if kind is TerrainKind.STEPPING_STONES:
        in_gap = np.mod(x, p.stone_width + p.stone_gap) >= p.stone_width
        return np.where(in_gap, -p.gap_depth, 0.0) + 0.0 * np.asarray(seed)
    raise ConfigError(f"unknown terrain kind {kind!r}")


def terrain_incline(terrain: Terrain, x, seed=0) -> np.ndarray:
    """Grade dh/dx the body pitches toward; stairs use their mean rise over run."""
    p = terrain.params
    x = np.asarray(x, dtype=np.float64)
    shape = np.broadcast(x, np.asarray(seed)).shape
    kind = terrain.kind
    if kind is TerrainKind.ROUGH:
        v0, v1, f = _value_noise(x, seed, p.noise_scale)
        return p.noise_amplitude * (v1 - v0) * 6.0 * f * (1.0 - f) / p.noise_scale
    grade = {
        TerrainKind.FLAT: 0.0,
        TerrainKind.SLOPE_UP: p.slope,
        TerrainKind.SLOPE_DOWN: -p.slope,
        TerrainKind.STAIRS_UP: p.step_height / p.step_width,
        TerrainKind.STAIRS_DOWN: -p.step_height / p.step_width,
        TerrainKind.STEPPING_STONES: 0.0,
    }[kind]
    return np.full(shape, grade)


def terrain_traction(terrain: Terrain, x, seed=0) -> np.ndarray:
    """Fraction of gait drive converted into forward speed, in (0, 1]."""
    p = terrain.params
    x = np.asarray(x, dtype=np.float64)
    shape = np.broadcast(x, np.asarray(seed)).shape
    kind = terrain.kind
    if kind in (TerrainKind.SLOPE_UP, TerrainKind.SLOPE_DOWN):
        return np.full(shape, math.cos(math.atan(p.slope)))
    if kind is TerrainKind.ROUGH:
        cell = np.floor(x / p.noise_scale).astype(np.int64)
        return 0.6 + 0.4 * hash_cell(seed, cell, _TRACTION_SALT)
    if kind in (TerrainKind.STAIRS_UP, TerrainKind.STAIRS_DOWN):
        in_band = np.mod(x, p.step_width) >= p.step_width - p.riser_band
        return np.where(in_band, 0.25, 1.0) + 0.0 * np.asarray(seed)
    if kind is TerrainKind.STEPPING_STONES:
        in_gap = np.mod(x, p.stone_width + p.stone_gap) >= p.stone_width
        return np.where(in_gap, 0.25, 1.0) + 0.0 * np.asarray(seed)
    return np.ones(shape)


def export_heightfield(path: str | Path, terrain: Terrain, seed: int = 0,
                       x_min: float = 0.0, x_max: float = 20.0, samples: int = 2001) -> None:
    """Write ``x,height,incline,traction`` samples to CSV."""
    xs = np.linspace(x_min, x_max, samples)
    h = terrain_height(terrain, xs, seed)
    g = terrain_incline(terrain, xs, seed)
    tr = terrain_traction(terrain, xs, seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "height", "incline", "traction"])
        for row in zip(xs, h, g, tr):
            w.writerow([repr(float(v)) for v in row])
