"""Thickness search that makes the spectra of different directions dissimilar."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ams import (
    DEFAULT_TOTAL_LEN,
    DirectionalGainTable,
    MetasurfaceConfig,
    _geometry_terms,
    _phase,
    _transmission,
    build_gain_table,
    default_angle_grid,
    default_freq_grid,
)
from .errors import DegenerateSpectrumError, InvalidSpecError


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    angles: np.ndarray

    def off_diagonal(self) -> np.ndarray:
        m = self.values.shape[0]
        return self.values[~np.eye(m, dtype=bool)]

    @property
    def mean_off_diagonal(self) -> float:
        off = self.off_diagonal()
        return float(off.mean()) if off.size else 0.0

    @property
    def max_off_diagonal(self) -> float:
        off = self.off_diagonal()
        return float(off.max()) if off.size else 0.0


def spectral_vectors(table: DirectionalGainTable) -> np.ndarray:
    """Magnitude spectrum per direction, shape (M, L)."""
    return np.abs(table.gains)


def similarity_matrix(vectors, angles=None) -> SimilarityMatrix:
    """Pairwise cosine similarity between direction spectra."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    angles = np.arange(v.shape[0], dtype=float) if angles is None else np.asarray(angles, dtype=float)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        ang = float(angles[bad[0]])
        raise DegenerateSpectrumError(
            f"zero spectrum at angle {ang:.6g} rad; cosine similarity undefined", angle=ang)
    u = v / norms[:, None]
    g = u @ u.T
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 1.0)
    return SimilarityMatrix(g, angles)


def objective(sim: SimilarityMatrix, beta: float = 1.0, normalize: bool = False) -> float:
    """Sum of off-diagonal similarities plus beta times the worst pair.

    With ``normalize`` the sum is divided by M(M-1) so both terms live on
    the same [0, 1] scale; the optimizer uses that form.
    """
    off = sim.off_diagonal()
    if off.size == 0:
        return 0.0
    total = off.sum()
    if normalize:
        total /= off.size
    return float(total + beta * off.max())


@dataclass
class OptimizerParams:
    beta: float = 1.0
    max_iters: int = 6000
    init_temperature: float = 0.01
    cooling_rate: float = 0.999
    seed: int = 0
    d_max: float = DEFAULT_TOTAL_LEN
    search_angles: int = 72
    search_freqs: int = 26

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidSpecError("beta must be non-negative")
        if not 0 < self.cooling_rate < 1:
            raise InvalidSpecError("cooling_rate must lie in (0, 1)")
        if not self.d_max > 0:
            raise InvalidSpecError("d_max must be positive")
        if self.max_iters < 0:
            raise InvalidSpecError("max_iters must be non-negative")
        if self.init_temperature < 0:
            raise InvalidSpecError("init_temperature must be non-negative")
        if self.search_angles < 2 or self.search_freqs < 1:
            raise InvalidSpecError("search grid too small")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizerParams":
        return cls(**doc)


@dataclass
class OptimizeResult:
    config: MetasurfaceConfig
    objective: float
    initial_config: MetasurfaceConfig
    initial_objective: float
    log: list = field(default_factory=list)  # (iter, objective, temperature)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "temperature"])
            w.writerows(self.log)

    def summary(self) -> dict:
        return {"objective": self.objective, "initial_objective": self.initial_objective,
                "iterations": len(self.log)}


def _subgrid(grid, n):
    grid = np.asarray(grid, dtype=float)
    if n >= grid.size:
        return grid
    idx = np.unique(np.round(np.linspace(0, grid.size - 1, n)).astype(int))
    return grid[idx]


class _CellModel:
    """Per-cell far-field terms on a fixed grid, for cheap single-cell updates."""

    def __init__(self, cfg: MetasurfaceConfig, angles, freqs):
        self.cfg = cfg
        self.freqs = np.asarray(freqs, dtype=float)
        cosine, weight = _geometry_terms(cfg, angles)
        kr = 2 * np.pi * self.freqs / cfg.materials.c_water * cfg.outer_radius
        # (N, M, L) geometric factor, independent of thickness
        self.geom = weight.T[:, :, None] * np.exp(1j * cosine.T[:, :, None] * kr[None, None, :])

    def source(self, d):
        m = self.cfg.materials
        return _transmission(d, self.freqs, m) * np.exp(1j * _phase(d, self.cfg.total_len, self.freqs, m))

    def contribution(self, i, d):
        return self.geom[i] * self.source(d)[None, :]


def _score(gains, beta):
    return objective(similarity_matrix(np.abs(gains)), beta, normalize=True)


def full_objective(cfg: MetasurfaceConfig, beta=1.0, angles=None, freqs=None) -> float:
    table = build_gain_table(cfg, angles, freqs)
    return objective(similarity_matrix(spectral_vectors(table), table.angles), beta, normalize=True)


def mean_similarity(cfg: MetasurfaceConfig, angles=None, freqs=None) -> float:
    table = build_gain_table(cfg, angles, freqs)
    return similarity_matrix(spectral_vectors(table), table.angles).mean_off_diagonal


def optimize(params: OptimizerParams, template_cfg: MetasurfaceConfig, angles=None,
             freqs=None) -> OptimizeResult:
    """Simulated annealing over cell thicknesses with one-cell uniform proposals.

    The search runs on a reduced grid; the returned objective is evaluated on
    the full grid. If the search result scores worse there than the random
    start, the start is returned.
    """
    if params.d_max > template_cfg.total_len + 1e-15:
        raise InvalidSpecError("d_max exceeds the cell length")
    angles = default_angle_grid() if angles is None else np.asarray(angles, dtype=float)
    freqs = default_freq_grid() if freqs is None else np.asarray(freqs, dtype=float)
    rng = np.random.default_rng(params.seed)
    n = template_cfg.n_cells
    d = rng.uniform(0.0, params.d_max, n)
    init_cfg = template_cfg.with_thicknesses(d)
    init_obj = full_objective(init_cfg, params.beta, angles, freqs)
    if params.max_iters == 0:
        return OptimizeResult(init_cfg, init_obj, init_cfg, init_obj, [])

    model = _CellModel(init_cfg, _subgrid(angles, params.search_angles),
                       _subgrid(freqs, params.search_freqs))
    parts = np.stack([model.contribution(i, d[i]) for i in range(n)])
    gains = parts.sum(axis=0)
    cur = _score(gains, params.beta)
    best, best_d = cur, d.copy()
    temp = params.init_temperature
    log = []
    for it in range(params.max_iters):
        i = int(rng.integers(n))
        new_d = float(rng.uniform(0.0, params.d_max))
        new_part = model.contribution(i, new_d)
        cand = gains - parts[i] + new_part
        obj = _score(cand, params.beta)
        delta = obj - cur
        accept = delta <= 0 or (temp > 0 and rng.random() < math.exp(-delta / temp))
        if accept:
            d[i] = new_d
            parts[i] = new_part
            gains = cand
            cur = obj
            if cur < best:
                best, best_d = cur, d.copy()
        log.append((it, cur, temp))
        temp *= params.cooling_rate

    out_cfg = template_cfg.with_thicknesses(best_d)
    out_obj = full_objective(out_cfg, params.beta, angles, freqs)
    if out_obj > init_obj:
        out_cfg, out_obj = init_cfg, init_obj
    return OptimizeResult(out_cfg, out_obj, init_cfg, init_obj, log)


def save_result(result: OptimizeResult, config_path, log_path=None):
    result.config.save_json(config_path)
    if log_path is not None:
        result.write_log(log_path)


def load_params(path) -> OptimizerParams:
    return OptimizerParams.from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "SimilarityMatrix",
    "OptimizerParams",
    "OptimizeResult",
    "spectral_vectors",
    "similarity_matrix",
    "objective",
    "optimize",
    "full_objective",
    "mean_similarity",
]
