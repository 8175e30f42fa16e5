"""Command-line entry point.

Every subcommand reads a JSON config file, applies ``--set key=value``
overrides (dotted keys reach into nested objects, values parse as JSON when
possible) and writes its outputs plus a manifest into ``--out``.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .ams import MetasurfaceConfig, uniform_config
from .channel import RxCapture, ScenarioConfig, simulate_capture
from .dsp import SuppressionParams, suppress_multipath
from .errors import (
    AmslocError,
    ConfigurationError,
    InvalidArgumentError,
    InvalidSpecError,
    UsageError,
)
from .estimators import (
    AnchorMeasurement,
    TemplateLibrary,
    build_templates,
    locate_segment,
    measure_anchor,
)
from .harness import ExperimentSpec, MetricsReport, export_plotdata, run_experiment, write_manifest
from .localizer import ImuStream, KalmanParams, SolverWeights, fuse_track, solve_wnls
from .optimizer import OptimizerParams, optimize
from .waveform import AnchorFrame, ChirpSpec

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3
# TypeError and KeyError surface from unknown or missing config fields
CONFIG_ERRORS = (ConfigurationError, InvalidSpecError, InvalidArgumentError, UsageError,
                 TypeError, KeyError)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict in place."""
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        if isinstance(node, list):
            node[int(parts[-1])] = value
        else:
            node[parts[-1]] = value
    return cfg


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} not found")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigurationError("config root must be a JSON object")
    return apply_overrides(cfg, overrides)


def _read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"input file {p} not found")
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _base(args):
    return Path(args.config).parent if args.config else None


def _scenario(cfg: dict, base_dir=None) -> ScenarioConfig:
    doc = cfg.get("scenario", cfg)
    try:
        return ScenarioConfig.from_dict(doc, base_dir)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad scenario: {exc}") from exc


# --- subcommands --------------------------------------------------------------


def cmd_optimize_ams(args, cfg, out: Path):
    cfg = dict(cfg)
    template = cfg.pop("template", None)
    n_cells = int(cfg.pop("n_cells", 60))
    params = OptimizerParams.from_dict(cfg)
    if template is None:
        tmpl = uniform_config(n_cells, 0.0)
    elif isinstance(template, str):
        tmpl = MetasurfaceConfig.load_json(template)
    else:
        tmpl = MetasurfaceConfig.from_dict(template)
    res = optimize(params, tmpl)
    res.config.save_json(out / "ams.json")
    res.write_log(out / "iterations.csv")
    (out / "summary.json").write_text(json.dumps(res.summary(), indent=2))
    return {"seed": params.seed}, []


def cmd_simulate(args, cfg, out: Path):
    scn = _scenario(cfg, _base(args))
    frame = None
    if "frame" in cfg:
        frame = AnchorFrame.from_dict(cfg["frame"])
    rx = [args.rx_index] if args.rx_index is not None else range(len(scn.receiver_path))
    per_anchor = bool(cfg.get("per_anchor", True))
    ids = sorted(a.anchor_id for a in scn.anchors)
    for i in rx:
        if per_anchor:
            for aid in ids:
                cap = simulate_capture(scn, i, frame=frame, anchors=[aid])
                cap.save(out / f"capture_rx{i}_a{aid}.mbsg")
        else:
            simulate_capture(scn, i, frame=frame).save(out / f"capture_rx{i}.mbsg")
    return {"seed": scn.seed}, []


def cmd_suppress(args, cfg, out: Path):
    if not args.capture:
        raise UsageError("suppress needs --capture")
    spec = ChirpSpec.from_dict(cfg.get("chirp", {})) if "chirp" in cfg else _scenario(cfg, _base(args)).chirp
    params = SuppressionParams(**cfg.get("suppression", {}))
    for path in args.capture:
        cap = RxCapture.load(path)
        start = locate_segment(cap, spec)
        feat = suppress_multipath(cap.samples[start: start + spec.n_samples], spec, params)
        (out / (Path(path).stem + ".feature.json")).write_text(json.dumps(feat.to_dict()))
    return {}, list(args.capture)


def _library(scn, aid, cfg, params, out: Path, inputs: list):
    libs = cfg.get("libraries", {})
    if str(aid) in libs:
        inputs.append(libs[str(aid)])
        return TemplateLibrary.load_json(libs[str(aid)])
    grid = np.deg2rad(np.arange(0.0, 360.0, float(cfg.get("template_step_deg", 0.5))))
    calib = scn.with_receiver([scn.anchor(aid).position + np.array([0.5, 0.0, 0.0])])
    lib = build_templates(calib, aid, grid, cfg.get("calibration_ranges", [0.4, 0.7]),
                          method=cfg.get("method", "suppressed"), params=params)
    lib.save_json(out / f"templates_a{aid}.json")
    return lib


def cmd_estimate(args, cfg, out: Path):
    if not args.capture:
        raise UsageError("estimate needs --capture")
    scn = _scenario(cfg, _base(args))
    params = SuppressionParams(**cfg.get("suppression", {}))
    inputs = list(args.capture)
    libs, rows = {}, []
    for path in args.capture:
        cap = RxCapture.load(path)
        ids = cap.metadata.get("anchors")
        if not ids or len(ids) != 1:
            raise ConfigurationError(f"{path}: estimate needs single-anchor captures")
        aid = int(ids[0])
        if aid not in libs:
            libs[aid] = _library(scn, aid, cfg, params, out, inputs)
        a = scn.anchor(aid)
        m = measure_anchor(cap, scn.chirp, aid, a.position, libs[aid], params=params,
                           sound_speed=scn.geometry.sound_speed, orientation=a.orientation)
        row = m.to_dict()
        row["epoch"] = cap.metadata.get("rx_index", 0)
        rows.append(row)
    _write_jsonl(out / "measurements.jsonl", rows)
    return {"seed": scn.seed}, inputs


def _anchor_positions(args, cfg) -> dict:
    if "anchors" in cfg and isinstance(cfg["anchors"], dict):
        return {int(k): np.asarray(v, dtype=float) for k, v in cfg["anchors"].items()}
    scn = _scenario(cfg, _base(args))
    return {a.anchor_id: np.asarray(a.position, dtype=float) for a in scn.anchors}


def cmd_localize(args, cfg, out: Path):
    if not args.measurements:
        raise UsageError("localize needs --measurements")
    anchors = _anchor_positions(args, cfg)
    weights = SolverWeights(**cfg.get("weights", {}))
    epochs: dict = {}
    for row in _read_jsonl(args.measurements):
        epochs.setdefault(row.get("epoch", 0), []).append(row)
    rows = []
    for epoch in sorted(epochs):
        ms = [AnchorMeasurement.from_dict(r) for r in epochs[epoch]]
        try:
            pos = [anchors[m.anchor_id] for m in ms]
        except KeyError as exc:
            raise ConfigurationError(f"unknown anchor id {exc}") from exc
        fix = solve_wnls(ms, pos, weights)
        rows.append({"epoch": epoch, "t": epochs[epoch][0].get("t", float(epoch))} | fix.to_dict())
    _write_jsonl(out / "positions.jsonl", rows)
    return {}, [args.measurements]


def _read_csv(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"input file {p} not found")
    return np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)


def cmd_track(args, cfg, out: Path):
    if not args.fixes:
        raise UsageError("track needs --fixes")
    rows = _read_jsonl(args.fixes)
    t = np.array([float(r.get("t", r.get("epoch", 0))) for r in rows])
    p = np.array([r["p"] for r in rows], dtype=float)
    inputs = [args.fixes]
    imu = None
    if cfg.get("imu"):
        a = _read_csv(cfg["imu"])
        imu = ImuStream(a[:, 0], a[:, 1:4])
        inputs.append(cfg["imu"])
    truth = None
    if cfg.get("truth"):
        truth = _read_csv(cfg["truth"])
        inputs.append(cfg["truth"])
    states = fuse_track(t, p, imu, KalmanParams(**cfg.get("kalman", {})),
                        smooth=bool(cfg.get("smooth", True)))
    with open(out / "track.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "err"])
        for s in states:
            x, y, z = s.position
            err = ""
            if truth is not None:
                ref = np.array([np.interp(s.t, truth[:, 0], truth[:, k]) for k in (1, 2, 3)])
                err = float(np.linalg.norm(s.position - ref))
            w.writerow([s.t, x, y, z, err])
    return {}, inputs


def cmd_sweep(args, cfg, out: Path):
    base = Path(args.config).parent if args.config else None
    cfg = dict(cfg)
    cfg["output_dir"] = str(out)
    try:
        spec = ExperimentSpec.from_dict(cfg, base)
    except TypeError as exc:
        raise ConfigurationError(f"bad experiment spec: {exc}") from exc
    run_experiment(spec)
    return {"seed": spec.seed}, []


def cmd_export(args, cfg, out: Path):
    if not args.report:
        raise UsageError("export needs --report")
    if not Path(args.report).exists():
        raise ConfigurationError(f"report {args.report} not found")
    report = MetricsReport.load(args.report)
    kind = args.kind or cfg.get("kind", "cdf")
    stats = tuple(cfg.get("statistics", ("p50", "p75", "p90")))
    export_plotdata(report, kind, out, statistics=stats)
    return {}, [args.report]


COMMANDS = {
    "optimize-ams": cmd_optimize_ams,
    "simulate": cmd_simulate,
    "suppress": cmd_suppress,
    "estimate": cmd_estimate,
    "localize": cmd_localize,
    "track": cmd_track,
    "sweep": cmd_sweep,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amsloc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--out", default="run", help="run directory (default: ./run)")
        if name == "simulate":
            sp.add_argument("--rx-index", type=int)
        if name in ("suppress", "estimate"):
            sp.add_argument("--capture", nargs="+")
        if name == "localize":
            sp.add_argument("--measurements")
        if name == "track":
            sp.add_argument("--fixes")
        if name == "export":
            sp.add_argument("--report")
            sp.add_argument("--kind")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.set)
        out.mkdir(parents=True, exist_ok=True)
        snapshot = json.loads(json.dumps(cfg))
        seeds, inputs = COMMANDS[args.command](args, cfg, out)
        if args.config:
            inputs = [args.config] + list(inputs)
        write_manifest(out, args.command, snapshot, inputs, seeds)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AmslocError as exc:
        print(f"pipeline failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
