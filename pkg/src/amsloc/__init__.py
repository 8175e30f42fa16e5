"""Underwater localization with a passive acoustic metasurface on each anchor.

Modules:
    ams         metasurface physics and directional gain tables
    optimizer   thickness search for direction-distinct spectra
    waveform    chirps, spectral shaping, FM0 frames, sample files
    channel     image-source multipath simulator and scenarios
    dsp         detection, onset finding, multipath suppression
    estimators  AoA templates, EM-acoustic ranging, depth
    localizer   weighted least squares fixes, IMU/Kalman fusion, TDMA
    harness     seeded Monte-Carlo sweeps and plot-data export
"""

__version__ = "0.1.0"

from .ams import (
    PLA_WATER,
    DirectionalGainTable,
    MetasurfaceConfig,
    amplitude_transmission,
    build_gain_table,
    min_full_coverage_thickness,
    unit_cell_phase,
)
from .channel import AnchorSpec, RxCapture, ScenarioConfig, WaterGeometry, path_set, simulate_capture
from .dsp import SuppressionParams, suppress_multipath
from .errors import AmslocError
from .estimators import AnchorMeasurement, TemplateLibrary, build_templates, estimate_aoa, estimate_range
from .harness import ExperimentSpec, MetricsReport, export_plotdata, run_experiment
from .localizer import fuse_track, solve_wnls, tdma_schedule
from .optimizer import OptimizerParams, optimize
from .waveform import AnchorFrame, ChirpSpec, decode_frame, encode_frame

__all__ = [
    "__version__",
    "PLA_WATER",
    "DirectionalGainTable",
    "MetasurfaceConfig",
    "amplitude_transmission",
    "build_gain_table",
    "min_full_coverage_thickness",
    "unit_cell_phase",
    "AnchorSpec",
    "RxCapture",
    "ScenarioConfig",
    "WaterGeometry",
    "path_set",
    "simulate_capture",
    "SuppressionParams",
    "suppress_multipath",
    "AmslocError",
    "AnchorMeasurement",
    "TemplateLibrary",
    "build_templates",
    "estimate_aoa",
    "estimate_range",
    "ExperimentSpec",
    "MetricsReport",
    "export_plotdata",
    "run_experiment",
    "fuse_track",
    "solve_wnls",
    "tdma_schedule",
    "OptimizerParams",
    "optimize",
    "AnchorFrame",
    "ChirpSpec",
    "decode_frame",
    "encode_frame",
]
