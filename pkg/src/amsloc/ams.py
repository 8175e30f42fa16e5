"""Analytical model of the two-layer unit cell and the circular metasurface.

Each cell is a radial bar made of a solid segment followed by water. The
solid segment changes the exit phase and attenuates the wave; the array of
cells is treated as a ring of secondary sources whose far-field sum gives a
direction-dependent complex gain.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateMaterialError,
    InvalidArgumentError,
    InvalidSpecError,
)

TWO_PI = 2.0 * np.pi

# PLA / water constants
PLA_SOUND_SPEED = 1939.4
WATER_SOUND_SPEED = 1500.0
PLA_ATTEN_PREFACTOR = 3.72e-8  # dB cm^-1 Hz^-n
PLA_ATTEN_EXPONENT = 1.39

DEFAULT_TOTAL_LEN = 0.033
DEFAULT_OUTER_RADIUS = 0.048


def wrap_angle(x):
    """Wrap angles to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    out = np.pi - np.mod(np.pi - x, TWO_PI)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MaterialPair:
    c_solid: float = PLA_SOUND_SPEED
    c_water: float = WATER_SOUND_SPEED
    atten_prefactor: float = PLA_ATTEN_PREFACTOR
    atten_exponent: float = PLA_ATTEN_EXPONENT

    def __post_init__(self):
        for name in ("c_solid", "c_water", "atten_prefactor", "atten_exponent"):
            if not getattr(self, name) > 0:
                raise InvalidSpecError(f"{name} must be strictly positive")
        if self.c_solid == self.c_water:
            raise DegenerateMaterialError("solid and water sound speeds are equal")

    def attenuation_db_per_cm(self, f):
        """Power-law absorption of the solid, dB/cm."""
        return self.atten_prefactor * np.asarray(f, dtype=float) ** self.atten_exponent


PLA_WATER = MaterialPair()


@dataclass(frozen=True)
class UnitCellSpec:
    solid_len: float
    total_len: float = DEFAULT_TOTAL_LEN

    def __post_init__(self):
        if not (0.0 <= self.solid_len <= self.total_len):
            raise InvalidSpecError(
                f"solid_len={self.solid_len} outside [0, total_len={self.total_len}]"
            )


@dataclass
class MetasurfaceConfig:
    cells: list[UnitCellSpec]
    outer_radius: float = DEFAULT_OUTER_RADIUS
    materials: MaterialPair = PLA_WATER
    cell_angles: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.cells)
        if n < 2:
            raise InvalidSpecError("a metasurface needs at least 2 cells")
        if self.cell_angles is None:
            self.cell_angles = TWO_PI * np.arange(n) / n
        self.cell_angles = np.asarray(self.cell_angles, dtype=float)
        if self.cell_angles.shape != (n,):
            raise InvalidSpecError("cell_angles must have one entry per cell")
        if np.any(np.diff(self.cell_angles) <= 0):
            raise InvalidSpecError("cell_angles must be strictly increasing")
        if self.cell_angles[0] < 0 or self.cell_angles[-1] >= TWO_PI:
            raise InvalidSpecError("cell_angles must lie in [0, 2*pi)")
        if self.outer_radius <= 0:
            raise InvalidSpecError("outer_radius must be positive")

    @classmethod
    def from_thicknesses(cls, thicknesses, total_len=DEFAULT_TOTAL_LEN,
                         outer_radius=DEFAULT_OUTER_RADIUS, materials=PLA_WATER):
        cells = [UnitCellSpec(float(d), total_len) for d in thicknesses]
        return cls(cells=cells, outer_radius=outer_radius, materials=materials)

    @classmethod
    def random(cls, n_cells, rng, d_max=DEFAULT_TOTAL_LEN, **kwargs):
        return cls.from_thicknesses(rng.uniform(0.0, d_max, n_cells), **kwargs)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def thicknesses(self) -> np.ndarray:
        return np.array([c.solid_len for c in self.cells])

    @property
    def total_len(self) -> float:
        return self.cells[0].total_len

    def with_thicknesses(self, thicknesses) -> "MetasurfaceConfig":
        cells = [UnitCellSpec(float(d), c.total_len) for d, c in zip(thicknesses, self.cells)]
        return MetasurfaceConfig(cells, self.outer_radius, self.materials, self.cell_angles.copy())

    def to_dict(self) -> dict:
        return {
            "cells_mm": [c.solid_len * 1e3 for c in self.cells],
            "total_len_mm": self.total_len * 1e3,
            "outer_radius_mm": self.outer_radius * 1e3,
            "c_solid": self.materials.c_solid,
            "c_water": self.materials.c_water,
            "atten_prefactor": self.materials.atten_prefactor,
            "atten_exponent": self.materials.atten_exponent,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetasurfaceConfig":
        mats = MaterialPair(
            c_solid=doc.get("c_solid", PLA_SOUND_SPEED),
            c_water=doc.get("c_water", WATER_SOUND_SPEED),
            atten_prefactor=doc.get("atten_prefactor", PLA_ATTEN_PREFACTOR),
            atten_exponent=doc.get("atten_exponent", PLA_ATTEN_EXPONENT),
        )
        total = doc.get("total_len_mm", DEFAULT_TOTAL_LEN * 1e3) * 1e-3
        return cls.from_thicknesses(
            [d * 1e-3 for d in doc["cells_mm"]],
            total_len=total,
            outer_radius=doc.get("outer_radius_mm", DEFAULT_OUTER_RADIUS * 1e3) * 1e-3,
            materials=mats,
        )

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load_json(cls, path) -> "MetasurfaceConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_freq(f):
    f = np.asarray(f, dtype=float)
    if np.any(~(f > 0)):
        raise InvalidArgumentError("frequency must be strictly positive")
    return f


def _phase(d, total, f, mats):
    cycles = d * f / mats.c_solid + (total - d) * f / mats.c_water
    return np.mod(cycles, 1.0) * TWO_PI


def _transmission(d, f, mats):
    return 10.0 ** (-(d * 100.0) * mats.attenuation_db_per_cm(f) / 20.0)


def unit_cell_phase(cell: UnitCellSpec, f, mats: MaterialPair = PLA_WATER):
    """Exit phase of a cell in radians, in [0, 2*pi)."""
    f = _check_freq(f)
    out = _phase(cell.solid_len, cell.total_len, f, mats)
    return float(out) if out.ndim == 0 else out


def amplitude_transmission(cell: UnitCellSpec, f, mats: MaterialPair = PLA_WATER):
    """Pressure amplitude ratio through the solid segment, in (0, 1]."""
    f = _check_freq(f)
    out = _transmission(cell.solid_len, f, mats)
    return float(out) if out.ndim == 0 else out


def min_full_coverage_thickness(mats: MaterialPair, f) -> float:
    """Smallest cell length whose thickness sweep spans a full 2*pi of phase.

    Uses the magnitude of the sound-speed difference so that both fast and
    slow solids give a positive length.
    """
    f = float(_check_freq(f))
    dc = abs(mats.c_solid - mats.c_water)
    if dc == 0:
        raise DegenerateMaterialError("equal sound speeds give no phase control")
    return mats.c_solid * mats.c_water / (dc * f)


def _cell_sources(cfg: MetasurfaceConfig, freqs):
    """Complex exit pressure of each cell for unit input, shape (L, N)."""
    d = cfg.thicknesses[None, :]
    f = freqs[:, None]
    m = cfg.materials
    return _transmission(d, f, m) * np.exp(1j * _phase(d, cfg.total_len, f, m))


def _geometry_terms(cfg: MetasurfaceConfig, angles):
    """Offset to every cell and its obliquity weight, shape (M, N).

    Cells outside the half facing the observer get zero weight.
    """
    offset = wrap_angle(np.asarray(angles, dtype=float)[:, None] - cfg.cell_angles[None, :])
    offset = np.atleast_2d(offset)
    cosine = np.cos(offset)
    weight = np.where(np.abs(offset) < np.pi / 2, cosine, 0.0)
    return cosine, weight


def far_field_pressure(cfg: MetasurfaceConfig, theta, f, p0=1.0 + 0j) -> complex:
    f = float(_check_freq(f))
    cosine, weight = _geometry_terms(cfg, [theta])
    src = _cell_sources(cfg, np.array([f]))[0]
    k = TWO_PI * f / cfg.materials.c_water
    terms = src * np.exp(1j * k * cfg.outer_radius * cosine[0]) * weight[0]
    return complex(p0 * terms.sum())


@dataclass
class DirectionalGainTable:
    angles: np.ndarray
    freqs: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.gains = np.asarray(self.gains, dtype=complex)
        if self.gains.shape != (self.angles.size, self.freqs.size):
            raise InvalidSpecError("gains must be M x L")
        if self.angles.size > 1 and np.any(np.diff(self.angles) <= 0):
            raise InvalidSpecError("angle grid must be strictly increasing")
        if self.freqs.size > 1 and np.any(np.diff(self.freqs) <= 0):
            raise InvalidSpecError("frequency grid must be strictly increasing")
        if not np.all(np.isfinite(self.gains)):
            raise InvalidSpecError("gains must be finite")

    @classmethod
    def isotropic(cls, angles, freqs) -> "DirectionalGainTable":
        """Unit gain everywhere: a bare transducer with no metasurface."""
        angles = np.asarray(angles, dtype=float)
        freqs = np.asarray(freqs, dtype=float)
        return cls(angles, freqs, np.ones((angles.size, freqs.size), dtype=complex))

    def nearest_row(self, theta) -> int:
        dist = np.abs(wrap_angle(self.angles - theta))
        return int(np.argmin(dist))

    def save(self, path):
        write_gain_table(self, path)

    @classmethod
    def load(cls, path) -> "DirectionalGainTable":
        return read_gain_table(path)


def default_angle_grid(step_deg=1.0) -> np.ndarray:
    return np.deg2rad(np.arange(0.0, 360.0, step_deg))


def default_freq_grid(f_lo=100e3, f_hi=200e3, n=101) -> np.ndarray:
    return np.linspace(f_lo, f_hi, n)


def build_gain_table(cfg: MetasurfaceConfig, angles=None, freqs=None) -> DirectionalGainTable:
    """Evaluate the far-field gain (unit source) over an angle x frequency grid."""
    angles = default_angle_grid() if angles is None else np.asarray(angles, dtype=float)
    freqs = default_freq_grid() if freqs is None else np.asarray(freqs, dtype=float)
    if angles.size == 0 or freqs.size == 0:
        raise InvalidArgumentError("grids must be non-empty")
    _check_freq(freqs)
    return DirectionalGainTable(angles, freqs, _table_gains(cfg, angles, freqs))


def _table_gains(cfg, angles, freqs):
    cosine, weight = _geometry_terms(cfg, angles)
    src = _cell_sources(cfg, freqs)
    kr = TWO_PI * freqs / cfg.materials.c_water * cfg.outer_radius
    gains = np.zeros((angles.size, freqs.size), dtype=complex)
    for i in range(cfg.n_cells):
        active = weight[:, i] > 0
        if not active.any():
            continue
        ph = np.exp(1j * cosine[active, i][:, None] * kr[None, :])
        gains[active] += weight[active, i][:, None] * ph * src[None, :, i]
    return gains


def cell_contributions(cfg: MetasurfaceConfig, angles, freqs) -> np.ndarray:
    """Per-cell far-field terms, shape (N, M, L); their sum over cells is the gain table."""
    cosine, weight = _geometry_terms(cfg, angles)
    src = _cell_sources(cfg, freqs)
    kr = TWO_PI * np.asarray(freqs) / cfg.materials.c_water * cfg.outer_radius
    ph = np.exp(1j * cosine.T[:, :, None] * kr[None, None, :])
    return weight.T[:, :, None] * ph * src.T[:, None, :]


@dataclass
class ElevationModel:
    """Vertical structure of the metasurface used for elevation-dependent gain.

    The cell height is split into layers fed by a transducer sitting low in
    the central cavity. Layers farther from the transducer see a longer feed
    path and a weaker wave, which breaks the up/down symmetry of the pattern.
    """

    height: float = 0.024
    inner_radius: float = 0.015
    source_height: float = 0.005
    n_layers: int = 12
    layer_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        z = (np.arange(self.n_layers) + 0.5) / self.n_layers * self.height
        self.layer_offsets = z - self.height / 2
        feed = np.hypot(self.inner_radius, z - self.source_height)
        self._extra_path = feed - self.inner_radius
        self._weights = self.inner_radius / feed

    def factor(self, elevation, freqs, c_water=WATER_SOUND_SPEED) -> np.ndarray:
        """Complex vertical aperture factor normalised to 1 at zero elevation.

        Positive elevation points downward (toward greater depth).
        """
        k = TWO_PI * np.asarray(freqs, dtype=float)[:, None] / c_water
        # layers above mid-height are farther from a downward observer
        path = self._extra_path[None, :] + self.layer_offsets[None, :] * np.sin(elevation)
        num = (self._weights[None, :] * np.exp(1j * k * path)).sum(axis=1)
        den = (self._weights[None, :] * np.exp(1j * k * self._extra_path[None, :])).sum(axis=1)
        return num / den


_MBGT_MAGIC = b"MBGT"
_MBGT_VERSION = 1


def write_gain_table(table: DirectionalGainTable, path):
    m, l = table.gains.shape
    with open(path, "wb") as fh:
        fh.write(_MBGT_MAGIC)
        fh.write(struct.pack("<HII", _MBGT_VERSION, m, l))
        fh.write(table.angles.astype("<f8").tobytes())
        fh.write(table.freqs.astype("<f8").tobytes())
        pairs = np.empty((m, l, 2), dtype="<f8")
        pairs[..., 0] = table.gains.real
        pairs[..., 1] = table.gains.imag
        fh.write(pairs.tobytes())


def read_gain_table(path) -> DirectionalGainTable:
    raw = Path(path).read_bytes()
    if raw[:4] != _MBGT_MAGIC:
        raise InvalidSpecError("not a gain table file (bad magic)")
    version, m, l = struct.unpack_from("<HII", raw, 4)
    if version != _MBGT_VERSION:
        raise InvalidSpecError(f"unsupported gain table version {version}")
    off = 4 + struct.calcsize("<HII")
    angles = np.frombuffer(raw, "<f8", m, off)
    off += 8 * m
    freqs = np.frombuffer(raw, "<f8", l, off)
    off += 8 * l
    pairs = np.frombuffer(raw, "<f8", 2 * m * l, off).reshape(m, l, 2)
    return DirectionalGainTable(angles.copy(), freqs.copy(), pairs[..., 0] + 1j * pairs[..., 1])


def uniform_config(n_cells: int, solid_len: float, **kwargs) -> MetasurfaceConfig:
    return MetasurfaceConfig.from_thicknesses(np.full(n_cells, solid_len), **kwargs)


__all__ = [
    "MaterialPair",
    "UnitCellSpec",
    "MetasurfaceConfig",
    "DirectionalGainTable",
    "ElevationModel",
    "PLA_WATER",
    "wrap_angle",
    "unit_cell_phase",
    "amplitude_transmission",
    "min_full_coverage_thickness",
    "far_field_pressure",
    "build_gain_table",
    "cell_contributions",
    "write_gain_table",
    "read_gain_table",
    "uniform_config",
]
