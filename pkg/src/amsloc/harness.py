"""Seeded Monte-Carlo sweeps over the full simulate-estimate-localize chain."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .channel import AnchorSpec, ScenarioConfig, simulate_capture, two_path_arrivals
from .dsp import SuppressionParams
from .errors import AmslocError, ConfigurationError, UsageError
from .estimators import (
    AnchorMeasurement,
    TemplateLibrary,
    build_templates,
    estimate_aoa,
    estimate_range,
    extract_feature,
    stable_seed,
)
from .localizer import SolverWeights, single_anchor_fix, solve_wnls

METRICS = ("aoa_deg", "range_m", "depth_m", "pos3d_m")
STATISTICS = ("p50", "p75", "p90")
PLOT_KINDS = ("cdf", "error_vs_distance")


@dataclass
class ExperimentSpec:
    scenario: dict
    distance_bins: list = field(default_factory=lambda: [[0.5, 2.0]])
    snr_db: list = field(default_factory=lambda: [20.0])
    anchor_counts: list = field(default_factory=lambda: [1])
    suppression: list = field(default_factory=lambda: [True])
    ams: list = field(default_factory=lambda: [True])
    trials: int = 10
    seed: int = 0
    output_dir: str | None = None
    calibration_ranges: list = field(default_factory=lambda: [0.4, 0.7])
    template_step_deg: float = 0.5
    depth_sigma: float = 0.1  # depth-sensor noise, m
    f_cut: float = 35e3
    noise_reference: str = "source"  # fixed noise floor across distances
    # optional controlled echo replacing the image-source channel:
    # {"delay": [lo, hi] s, "gain": [lo, hi], "calibration": [[delay, gain] per range]}
    reflection: dict | None = None
    receiver_depth: list | None = None  # [lo, hi] m; default 10-90% of the water depth
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        for name in ("distance_bins", "snr_db", "anchor_counts", "suppression", "ams"):
            if not getattr(self, name):
                raise ConfigurationError(f"sweep axis {name} must be non-empty")
        for lo_hi in self.distance_bins:
            if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1]:
                raise ConfigurationError(f"bad distance bin {lo_hi}")
        if self.noise_reference not in ("los", "source"):
            raise ConfigurationError("noise_reference must be 'los' or 'source'")
        if self.reflection is not None:
            r = self.reflection
            for key in ("delay", "gain"):
                lo_hi = r.get(key)
                if lo_hi is None or len(lo_hi) != 2 or not 0 <= lo_hi[0] <= lo_hi[1]:
                    raise ConfigurationError(f"reflection.{key} must be [lo, hi] with 0 <= lo <= hi")
            cal = r.get("calibration")
            if cal is not None and len(cal) != len(self.calibration_ranges):
                raise ConfigurationError("reflection.calibration needs one [delay, gain] per range")
        n_anchors = len(self.scenario.get("anchors", []))
        for k in self.anchor_counts:
            if not 1 <= int(k) <= n_anchors:
                raise ConfigurationError(f"anchor count {k} not in 1..{n_anchors}")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentSpec":
        doc = dict(doc)
        if "scenario_path" in doc:
            path = Path(doc.pop("scenario_path"))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigurationError(f"scenario file {path} not found")
            doc["scenario"] = ScenarioConfig.from_dict(
                json.loads(path.read_text()), path.parent).to_dict()
        if "scenario" not in doc:
            raise ConfigurationError("experiment needs a scenario")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def cells(self):
        for (lo, hi), snr, k, sup, ams in itertools.product(
                self.distance_bins, self.snr_db, self.anchor_counts, self.suppression, self.ams):
            yield {"distance_bin": [float(lo), float(hi)], "snr_db": float(snr),
                   "anchors": int(k), "suppression": bool(sup), "ams": bool(ams)}


def cell_key(cell: dict) -> str:
    lo, hi = cell["distance_bin"]
    return (f"d{lo:g}-{hi:g}_snr{cell['snr_db']:g}_k{cell['anchors']}"
            f"_sup{int(cell['suppression'])}_ams{int(cell['ams'])}")


def cell_seed(global_seed: int, cell: dict) -> int:
    """Stable per-cell seed so adding or removing cells leaves the rest unchanged."""
    digest = hashlib.sha256(f"{global_seed}|{cell_key(cell)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {s: None for s in STATISTICS} | {"mean": None}
    p50, p75, p90 = np.percentile(v, [50, 75, 90])
    return {"p50": float(p50), "p75": float(p75), "p90": float(p90), "mean": float(v.mean())}


@dataclass
class CellResult:
    cell: dict
    trials: int
    failed: int
    errors: dict  # metric -> list of per-trial errors
    failures: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return cell_key(self.cell)

    def stats(self) -> dict:
        return {m: _stats(v) for m, v in self.errors.items()}

    def cdf(self, metric: str):
        v = np.sort(np.asarray(self.errors.get(metric, []), dtype=float))
        return v, np.arange(1, v.size + 1) / max(v.size, 1)

    def to_dict(self) -> dict:
        out = {"key": self.key, "cell": self.cell, "trials": self.trials, "failed": self.failed,
               "stats": self.stats(), "failures": self.failures, "cdf": {}}
        for m in self.errors:
            v, p = self.cdf(m)
            out["cdf"][m] = {"value": v.tolist(), "probability": p.tolist()}
        return out


@dataclass
class MetricsReport:
    cells: list
    spec: dict = field(default_factory=dict)

    def cell(self, **match) -> CellResult:
        for c in self.cells:
            if all(c.cell.get(k) == v for k, v in match.items()):
                return c
        raise KeyError(match)

    def to_dict(self) -> dict:
        return {"spec": self.spec, "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        cells = []
        for c in doc["cells"]:
            errors = {m: c["cdf"][m]["value"] for m in c.get("cdf", {})}
            cells.append(CellResult(c["cell"], c["trials"], c["failed"], errors,
                                    c.get("failures", [])))
        return cls(cells, doc.get("spec", {}))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _angle_error_deg(a, b) -> float:
    return float(abs(np.rad2deg(np.pi - np.mod(np.pi - (a - b), 2 * np.pi))))


class _Runner:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.base = ScenarioConfig.from_dict(spec.scenario)
        self.anchor_ids = sorted(a.anchor_id for a in self.base.anchors)
        self.libraries: dict = {}
        self.scenarios: dict = {}
        self.params = SuppressionParams(f_cut=spec.f_cut)
        self.weights = SolverWeights(**spec.weights) if spec.weights else SolverWeights()

    def scenario(self, ams_on: bool) -> ScenarioConfig:
        if ams_on not in self.scenarios:
            anchors = self.base.anchors if ams_on else [
                AnchorSpec(a.position, None, a.orientation, a.anchor_id) for a in self.base.anchors]
            doc = self.base.to_dict()
            doc["anchors"] = [a.to_dict() for a in anchors]
            doc["noise_snr_db"] = None
            self.scenarios[ams_on] = ScenarioConfig.from_dict(doc)
        return self.scenarios[ams_on]

    def calibration_model(self):
        """Fixed echo per calibration range, or None for the image-source channel."""
        refl = self.spec.reflection
        if refl is None:
            return None
        ranges = [float(r) for r in self.spec.calibration_ranges]
        cal = refl.get("calibration")
        if cal is None:
            mid = (float(np.mean(refl["delay"])), float(np.mean(refl["gain"])))
            cal = [mid] * len(ranges)
        c = self.base.geometry.sound_speed

        def model(tx, rx):
            d = float(np.linalg.norm(np.subtract(rx, tx)))
            k = int(np.argmin([abs(d - r) for r in ranges]))
            return two_path_arrivals(tx, rx, float(cal[k][0]), float(cal[k][1]), c)

        return model

    def library(self, anchor_id: int, ams_on: bool, method: str) -> TemplateLibrary:
        key = (anchor_id, ams_on, method)
        if key not in self.libraries:
            grid = np.deg2rad(np.arange(0.0, 360.0, self.spec.template_step_deg))
            self.libraries[key] = build_templates(
                self.scenario(ams_on), anchor_id, grid, self.spec.calibration_ranges,
                method=method, params=self.params, path_model=self.calibration_model())
        return self.libraries[key]

    def draw_receiver(self, rng, lo, hi) -> np.ndarray:
        geom = self.base.geometry
        a0 = np.asarray(self.base.anchor(self.anchor_ids[0]).position, dtype=float)
        zr = self.spec.receiver_depth or (0.1 * geom.depth, 0.9 * geom.depth)
        for _ in range(1000):
            h = rng.uniform(lo, hi)
            th = rng.uniform(0.0, 2 * np.pi)
            z = rng.uniform(*zr)
            p = np.array([a0[0] + h * np.cos(th), a0[1] + h * np.sin(th), z])
            if geom.contains(p):
                return p
        raise ConfigurationError("could not place a receiver inside the water for this bin")

    def trial(self, cell: dict, rng, out: dict):
        """One test location; errors are appended to ``out`` stage by stage."""
        ams_on = cell["ams"]
        method = "suppressed" if cell["suppression"] else "raw"
        scn = self.scenario(ams_on)
        rx = self.draw_receiver(rng, *cell["distance_bin"])
        noisy = scn.with_receiver([rx])
        noisy.noise_snr_db = cell["snr_db"]
        noisy.noise_reference = self.spec.noise_reference
        c = scn.geometry.sound_speed
        refl = self.spec.reflection
        meas, anchors = [], []
        for aid in self.anchor_ids[: cell["anchors"]]:
            a = scn.anchor(aid)
            paths = None
            if refl is not None:
                echo = (rng.uniform(*refl["delay"]), rng.uniform(*refl["gain"]))
                paths = {aid: two_path_arrivals(a.position, rx, *echo, c)}
            cap = simulate_capture(noisy, 0, anchors=[aid], paths=paths,
                                   seed=int(rng.integers(2 ** 63)))
            t = cap.truth["anchors"][str(aid)]
            lib = self.library(aid, ams_on, method)
            feat = extract_feature(cap, scn.chirp, method, self.params, grid=lib.freq_grid)
            aoa = estimate_aoa(feat, lib)
            bearing = float(np.mod(aoa.angle + a.orientation, 2 * np.pi))
            out["aoa_deg"].append(_angle_error_deg(bearing, t["bearing"] + a.orientation))
            rng_est = estimate_range(cap, scn.chirp, c)
            out["range_m"].append(abs(rng_est.distance - t["slant_range"]))
            # depth comes from a pressure sensor model
            depth = float(rx[2] + rng.normal(0.0, self.spec.depth_sigma))
            out["depth_m"].append(abs(depth - rx[2]))
            meas.append(AnchorMeasurement(aid, bearing, rng_est.distance, depth,
                                          float(a.position[2]), (aoa.score, rng_est.score, 1.0)))
            anchors.append(a.position)
        if len(meas) == 1:
            p = single_anchor_fix(meas[0], anchors[0]).p
        else:
            p = solve_wnls(meas, anchors, self.weights).p
        out["pos3d_m"].append(float(np.linalg.norm(p - rx)))


def run_experiment(spec: ExperimentSpec) -> MetricsReport:
    """Run every cell of the sweep.

    Each trial draws from its own generator seeded by (cell seed, trial
    index). A failing stage is recorded with the trial index; metrics from
    the stages that completed before it are kept, later ones are absent.
    """
    runner = _Runner(spec)
    results = []
    for cell in spec.cells():
        base = cell_seed(spec.seed, cell)
        errors = {m: [] for m in METRICS}
        failures = []
        for k in range(spec.trials):
            rng = np.random.default_rng([base, k])
            try:
                runner.trial(cell, rng, errors)
            except AmslocError as exc:
                failures.append({"trial": k, "error": type(exc).__name__, "message": str(exc)})
        results.append(CellResult(cell, spec.trials, len(failures), errors, failures))
    report = MetricsReport(results, spec.to_dict())
    if spec.output_dir:
        write_report(report, spec.output_dir)
    return report


def write_report(report: MetricsReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json())
    return [path] + export_plotdata(report, "cdf", out)


def export_plotdata(report: MetricsReport, kind: str, out_dir, statistics=STATISTICS,
                    metrics=METRICS) -> list[Path]:
    """Write CSVs for external plotting.

    ``cdf``: one file per cell and metric with columns value, probability.
    ``error_vs_distance``: one file per metric and per combination of the
    other sweep axes, columns distance_bin, statistic, value, sorted by bin.
    """
    if kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    for s in statistics:
        if s not in STATISTICS + ("mean",):
            raise UsageError(f"unknown statistic {s!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if kind == "cdf":
        for c in report.cells:
            for m in metrics:
                if m not in c.errors:
                    continue
                v, p = c.cdf(m)
                path = out / f"cdf_{c.key}_{m}.csv"
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["value", "probability"])
                    w.writerows(zip(v.tolist(), p.tolist()))
                written.append(path)
        return written

    groups: dict = {}
    for c in report.cells:
        rest = {k: v for k, v in c.cell.items() if k != "distance_bin"}
        gkey = (f"snr{rest['snr_db']:g}_k{rest['anchors']}"
                f"_sup{int(rest['suppression'])}_ams{int(rest['ams'])}")
        groups.setdefault(gkey, []).append(c)
    for gkey, cells in sorted(groups.items()):
        cells = sorted(cells, key=lambda c: tuple(c.cell["distance_bin"]))
        for m in metrics:
            path = out / f"error_vs_distance_{gkey}_{m}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["distance_bin", "statistic", "value"])
                for c in cells:
                    lo, hi = c.cell["distance_bin"]
                    st = c.stats().get(m, {})
                    for s in statistics:
                        val = st.get(s)
                        w.writerow([f"{lo:g}-{hi:g}", s, "" if val is None else val])
            written.append(path)
    return written


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs=(), seeds=None) -> Path:
    """Record versions, seeds and input hashes for a run directory."""
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "versions": {
            "amsloc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "seeds": seeds or {},
        "config_sha256": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()
                          and p.name != "manifest.json"),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


__all__ = [
    "ExperimentSpec",
    "CellResult",
    "MetricsReport",
    "run_experiment",
    "export_plotdata",
    "write_report",
    "write_manifest",
    "cell_key",
    "cell_seed",
    "stable_seed",
]
