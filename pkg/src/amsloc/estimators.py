"""Template libraries, bearing/elevation matching and EM-referenced ranging."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import RxCapture, ScenarioConfig, simulate_capture
from .dsp import (
    DEFAULT_SCORE_FLOOR,
    EnvelopeFeature,
    SuppressionParams,
    acoustic_onset,
    detect_em_marker,
    feature_grid,
    first_arrival,
    raw_spectrum_feature,
    suppress_multipath,
)
from .errors import (
    AmslocError,
    DegenerateSpectrumError,
    InvalidArgumentError,
    InvalidSpecError,
    NotFoundError,
    RangingUnavailableError,
)
from .waveform import ChirpSpec

MIN_TEMPLATES = 8
METHODS = ("suppressed", "raw")


@dataclass
class TemplateLibrary:
    angles: np.ndarray
    features: np.ndarray  # K x L, unit-norm rows
    freq_grid: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float)
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        if feats.shape[0] != angles.size:
            raise InvalidSpecError("one feature row per angle is required")
        if angles.size < MIN_TEMPLATES:
            raise InvalidSpecError(f"a library needs at least {MIN_TEMPLATES} entries")
        if np.unique(angles).size != angles.size:
            raise InvalidSpecError("template angles must be unique")
        self.freq_grid = np.asarray(self.freq_grid, dtype=float)
        if feats.shape[1] != self.freq_grid.size:
            raise InvalidSpecError("feature length must match the frequency grid")
        order = np.argsort(angles)
        self.angles = angles[order]
        self.features = feats[order]

    @property
    def plane(self) -> str:
        return self.metadata.get("plane", "azimuth")

    def to_dict(self) -> dict:
        return {
            "angles": self.angles.tolist(),
            "features": self.features.tolist(),
            "freq_grid": self.freq_grid.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TemplateLibrary":
        return cls(doc["angles"], doc["features"], doc["freq_grid"], doc.get("metadata", {}))

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "TemplateLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _unit(v, angle=None):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise DegenerateSpectrumError("feature vector has zero norm", angle=angle)
    return v / n


def locate_segment(capture: RxCapture, spec: ChirpSpec, expect_marker: bool = True) -> int:
    """Start index of the first acoustic arrival (see ``first_arrival``)."""
    return int(round(first_arrival(capture, spec, expect_marker)))


def extract_feature(capture: RxCapture, spec: ChirpSpec, method: str = "suppressed",
                    params: SuppressionParams | None = None, onset: int | None = None,
                    grid=None) -> EnvelopeFeature:
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown feature method {method!r}")
    start = locate_segment(capture, spec) if onset is None else int(onset)
    seg = capture.samples[start: start + spec.n_samples]
    grid = feature_grid(spec) if grid is None else grid
    if method == "raw":
        return raw_spectrum_feature(seg, spec, grid)
    return suppress_multipath(seg, spec, params, grid=grid)


def calibration_position(anchor_pos, angle: float, rng: float, plane: str,
                         orientation: float = 0.0, bearing: float = 0.0) -> np.ndarray:
    """Receiver position used for one calibration shot."""
    a = np.asarray(anchor_pos, dtype=float)
    if plane == "azimuth":
        th = angle + orientation
        return a + rng * np.array([np.cos(th), np.sin(th), 0.0])
    if plane == "elevation":
        th = bearing + orientation
        return a + rng * np.array([np.cos(angle) * np.cos(th), np.cos(angle) * np.sin(th),
                                   np.sin(angle)])
    raise InvalidArgumentError(f"unknown plane {plane!r}")


def stable_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_templates(scn: ScenarioConfig, anchor_id: int, angle_grid, calibration_ranges,
                    plane: str = "azimuth", bearing: float = 0.0, method: str = "suppressed",
                    params: SuppressionParams | None = None, path_model=None,
                    grid=None) -> TemplateLibrary:
    """Simulated calibration: one shot per (angle, range), spectra averaged over ranges.

    ``path_model(tx, rx)`` may replace the image-source channel, e.g. to
    calibrate against a fixed reflection profile.
    """
    angles = np.atleast_1d(np.asarray(angle_grid, dtype=float))
    ranges = np.atleast_1d(np.asarray(calibration_ranges, dtype=float))
    if angles.size == 0 or ranges.size == 0:
        raise InvalidArgumentError("angle grid and calibration ranges must be non-empty")
    a = scn.anchor(anchor_id)
    grid = feature_grid(scn.chirp) if grid is None else np.asarray(grid, dtype=float)
    rows = []
    for i, ang in enumerate(angles):
        acc = np.zeros(grid.size)
        for j, r in enumerate(ranges):
            pos = calibration_position(a.position, ang, r, plane, a.orientation, bearing)
            sub = scn.with_receiver([pos])
            try:
                paths = None
                if path_model is not None:
                    paths = {anchor_id: path_model(a.position, pos)}
                cap = simulate_capture(sub, 0, anchors=[anchor_id], paths=paths,
                                       seed=stable_seed(scn.seed, anchor_id, plane, i, j))
                feat = extract_feature(cap, scn.chirp, method, params, grid=grid)
            except AmslocError as exc:
                raise type(exc)(f"calibration at angle {np.rad2deg(ang):.2f} deg, "
                                f"range {r:g} m: {exc}") from exc
            acc += feat.resampled_spectrum
        rows.append(_unit(acc / ranges.size, angle=float(ang)))
    meta = {
        "anchor_id": anchor_id,
        "ranges": ranges.tolist(),
        "plane": plane,
        "bearing": bearing,
        "method": method,
    }
    return TemplateLibrary(angles, np.array(rows), grid, meta)


@dataclass(frozen=True)
class MatchResult:
    angle: float
    score: float
    alternatives: list  # [(angle, score)] best first


def match_feature(feature: EnvelopeFeature, lib: TemplateLibrary, top: int = 5) -> MatchResult:
    """Library angle with the highest cosine similarity; ties go to the smaller angle."""
    if feature.resampled_spectrum.size != lib.freq_grid.size or not np.allclose(
            feature.freq_grid, lib.freq_grid):
        raise InvalidArgumentError("feature grid does not match the library grid")
    q = _unit(feature.resampled_spectrum)
    sims = lib.features @ q
    order = np.lexsort((lib.angles, -sims))  # primary: score desc, then angle asc
    best = int(order[0])
    alts = [(float(lib.angles[k]), float(sims[k])) for k in order[:top]]
    return MatchResult(float(lib.angles[best]), float(sims[best]), alts)


def estimate_aoa(feature: EnvelopeFeature, lib: TemplateLibrary) -> MatchResult:
    return match_feature(feature, lib)


def elevation_for_offset(dz: float, h: float) -> float:
    """Elevation angle (positive downward) of a depth offset seen at horizontal range h."""
    return float(np.arctan2(dz, h))


def depth_from_elevation(anchor_depth: float, h: float, elevation: float) -> float:
    return float(anchor_depth + h * np.tan(elevation))


def estimate_depth(feature: EnvelopeFeature, lib: TemplateLibrary, anchor_depth: float,
                   h: float) -> tuple[float, MatchResult]:
    """Depth from the best-matching elevation template at horizontal range h."""
    if lib.plane != "elevation":
        raise InvalidArgumentError("depth estimation needs an elevation-plane library")
    m = match_feature(feature, lib)
    return depth_from_elevation(anchor_depth, h, m.angle), m


@dataclass(frozen=True)
class RangeEstimate:
    distance: float
    score: float
    em_index: float
    acoustic_index: float


def estimate_range(capture: RxCapture, spec: ChirpSpec, sound_speed: float = 1500.0,
                   floor: float = DEFAULT_SCORE_FLOOR) -> RangeEstimate:
    """Slant range from the delay between leakage marker and first acoustic arrival.

    An acoustic arrival that cannot be separated from the marker is taken
    to coincide with it (zero range).
    """
    try:
        em = detect_em_marker(capture, spec, floor)
    except NotFoundError as exc:
        raise RangingUnavailableError(f"leakage marker not found: {exc}") from exc
    onset = acoustic_onset(capture, spec, em)
    if onset is None:
        onset = em.refined
    d = sound_speed * (onset - em.refined) / capture.sample_rate
    return RangeEstimate(float(d), em.score, em.refined, float(onset))


@dataclass
class AnchorMeasurement:
    anchor_id: int
    bearing: float
    range: float
    depth: float
    anchor_depth: float
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def depth_offset(self) -> float:
        return self.depth - self.anchor_depth

    @property
    def feasible(self) -> bool:
        return self.range >= abs(self.depth_offset)

    @property
    def horizontal_range(self) -> float:
        """sqrt(r^2 - dz^2), clamped to 0 when the range is shorter than the offset."""
        return float(np.sqrt(max(self.range ** 2 - self.depth_offset ** 2, 0.0)))

    def to_dict(self) -> dict:
        return {
            "anchor_id": self.anchor_id,
            "bearing": self.bearing,
            "range": self.range,
            "depth": self.depth,
            "anchor_depth": self.anchor_depth,
            "horizontal_range": self.horizontal_range,
            "weights": list(self.weights),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AnchorMeasurement":
        return cls(int(doc["anchor_id"]), float(doc["bearing"]), float(doc["range"]),
                   float(doc["depth"]), float(doc["anchor_depth"]),
                   tuple(doc.get("weights", (1.0, 1.0, 1.0))))


def measure_anchor(capture: RxCapture, spec: ChirpSpec, anchor_id: int, anchor_pos,
                   aoa_lib: TemplateLibrary, elevation_lib: TemplateLibrary | None = None,
                   params: SuppressionParams | None = None, sound_speed: float = 1500.0,
                   orientation: float = 0.0) -> AnchorMeasurement:
    """Bearing, range and depth for one anchor from its capture.

    Without an elevation library the receiver is assumed level with the
    anchor.
    """
    rng = estimate_range(capture, spec, sound_speed)
    # same segment rule as calibration so features line up with templates
    onset = locate_segment(capture, spec)
    feat = extract_feature(capture, spec, aoa_lib.metadata.get("method", "suppressed"), params,
                           onset=onset, grid=aoa_lib.freq_grid)
    aoa = estimate_aoa(feat, aoa_lib)
    a_z = float(anchor_pos[2])
    w_dep = 1.0
    depth = a_z
    if elevation_lib is not None:
        efeat = feat
        if not np.allclose(elevation_lib.freq_grid, aoa_lib.freq_grid):
            efeat = extract_feature(capture, spec, "suppressed", params, onset=onset,
                                    grid=elevation_lib.freq_grid)
        em = match_feature(efeat, elevation_lib)
        # slant range and elevation give the offset directly: h*tan(e) = r*sin(e)
        depth = a_z + rng.distance * np.sin(em.angle)
        w_dep = em.score
    bearing = float(np.mod(aoa.angle + orientation, 2 * np.pi))
    return AnchorMeasurement(anchor_id, bearing, rng.distance, float(depth), a_z,
                             (aoa.score, rng.score, w_dep))


__all__ = [
    "TemplateLibrary",
    "MatchResult",
    "RangeEstimate",
    "AnchorMeasurement",
    "build_templates",
    "extract_feature",
    "locate_segment",
    "match_feature",
    "estimate_aoa",
    "estimate_depth",
    "estimate_range",
    "elevation_for_offset",
    "depth_from_elevation",
    "measure_anchor",
    "stable_seed",
    "calibration_position",
]
