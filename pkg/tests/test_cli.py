import csv
import json

import numpy as np
import pytest

from amsloc.ams import MetasurfaceConfig
from amsloc.channel import AnchorSpec, RxCapture, ScenarioConfig, WaterGeometry
from amsloc.cli import apply_overrides, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, opt_cfg):
    root = tmp_path_factory.mktemp("cli")
    opt_cfg.save_json(root / "ams.json")
    scn = ScenarioConfig(
        WaterGeometry(2.0),
        [AnchorSpec((0.0, 0.0, 0.8), opt_cfg, anchor_id=0),
         AnchorSpec((4.0, 0.0, 0.8), opt_cfg, anchor_id=1)],
        [(0.0, 1.5, 1.0, 0.8), (1.0, 1.7, 1.1, 0.8)],
        noise_snr_db=20.0, noise_reference="source")
    doc = scn.to_dict()
    for a in doc["anchors"]:
        a["ams"] = "ams.json"
    (root / "scenario.json").write_text(json.dumps(doc))
    (root / "estimate.json").write_text(json.dumps(
        {"scenario": doc, "template_step_deg": 2.0}))
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_overrides():
    cfg = {"a": {"b": 1}, "xs": [1, 2]}
    apply_overrides(cfg, ["a.b=3", "a.c=[1, 2]", "name=hello", "xs.1=9"])
    assert cfg == {"a": {"b": 3, "c": [1, 2]}, "name": "hello", "xs": [1, 9]}


def test_optimize_ams(tmp_path):
    cfg = tmp_path / "opt.json"
    cfg.write_text(json.dumps({"seed": 1, "max_iters": 40}))
    out = tmp_path / "run"
    assert run("optimize-ams", "--config", cfg, "--set", "n_cells=12", "--out", out) == 0
    ams = MetasurfaceConfig.load_json(out / "ams.json")
    assert ams.n_cells == 12
    assert len((out / "iterations.csv").read_text().splitlines()) == 41
    summary = json.loads((out / "summary.json").read_text())
    assert summary["objective"] <= summary["initial_objective"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "optimize-ams" and manifest["seeds"] == {"seed": 1}
    assert str(cfg) in manifest["inputs"]


def test_pipeline_chain(workspace, tmp_path):
    sim = tmp_path / "sim"
    assert run("simulate", "--config", workspace / "scenario.json", "--out", sim) == 0
    caps = sorted(sim.glob("*.mbsg"))
    assert [c.name for c in caps] == ["capture_rx0_a0.mbsg", "capture_rx0_a1.mbsg",
                                      "capture_rx1_a0.mbsg", "capture_rx1_a1.mbsg"]
    assert (sim / "capture_rx0_a0.mbsg.json").exists()

    sup = tmp_path / "sup"
    assert run("suppress", "--config", workspace / "scenario.json", "--capture", caps[0],
               "--out", sup) == 0
    feat = json.loads((sup / "capture_rx0_a0.feature.json").read_text())
    assert len(feat["resampled_spectrum"]) == len(feat["freq_grid"]) == 64

    est = tmp_path / "est"
    assert run("estimate", "--config", workspace / "estimate.json", "--capture", *caps,
               "--out", est) == 0
    rows = [json.loads(x) for x in (est / "measurements.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and {r["epoch"] for r in rows} == {0, 1}
    assert (est / "templates_a0.json").exists() and (est / "templates_a1.json").exists()

    loc = tmp_path / "loc"
    assert run("localize", "--config", workspace / "scenario.json", "--measurements",
               est / "measurements.jsonl", "--out", loc) == 0
    fixes = [json.loads(x) for x in (loc / "positions.jsonl").read_text().splitlines()]
    truth = [np.array([1.5, 1.0, 0.8]), np.array([1.7, 1.1, 0.8])]
    for f, t in zip(fixes, truth):
        assert np.linalg.norm(np.array(f["p"][:2]) - t[:2]) < 0.1

    (tmp_path / "truth.csv").write_text("t,x,y,z\n0,1.5,1.0,0.8\n1,1.7,1.1,0.8\n")
    (tmp_path / "track.json").write_text(json.dumps({"truth": str(tmp_path / "truth.csv")}))
    trk = tmp_path / "trk"
    assert run("track", "--config", tmp_path / "track.json", "--fixes", loc / "positions.jsonl",
               "--out", trk) == 0
    rows = list(csv.reader((trk / "track.csv").open()))
    assert rows[0] == ["t", "x", "y", "z", "err"] and len(rows) == 3
    assert all(float(r[4]) < 0.2 for r in rows[1:])


def test_sweep_and_export(workspace, tmp_path):
    (workspace / "sweep.json").write_text(json.dumps({
        "scenario_path": "scenario.json", "distance_bins": [[0.5, 1.0], [1.0, 1.5]],
        "trials": 2, "template_step_deg": 5.0}))
    out = tmp_path / "sweep"
    assert run("sweep", "--config", workspace / "sweep.json", "--out", out) == 0
    assert (out / "report.json").exists() and (out / "manifest.json").exists()
    exp = tmp_path / "exp"
    assert run("export", "--report", out / "report.json", "--kind", "error_vs_distance",
               "--out", exp) == 0
    files = sorted(exp.glob("error_vs_distance_*.csv"))
    assert len(files) == 4
    assert len(files[0].read_text().splitlines()) == 1 + 2 * 3
    assert run("export", "--report", out / "report.json", "--kind", "heatmap",
               "--out", exp) == 2


def test_config_errors_exit_2(workspace, tmp_path):
    out = tmp_path / "o"
    assert run("simulate", "--config", tmp_path / "missing.json", "--out", out) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("simulate", "--config", bad, "--out", out) == 2
    assert run("optimize-ams", "--set", "bogus=1", "--out", out) == 2
    assert run("optimize-ams", "--set", "beta=-1", "--out", out) == 2
    assert run("localize", "--config", workspace / "scenario.json", "--out", out) == 2
    assert run("sweep", "--config", workspace / "scenario.json", "--out", out) == 2
    assert run("export", "--report", tmp_path / "nothing.json", "--out", out) == 2


def test_pipeline_failure_exit_3(workspace, tmp_path):
    noise = np.random.default_rng(0).standard_normal(6000)
    RxCapture(noise, 2e6, 0, metadata={"anchors": [0], "rx_index": 0}).save(tmp_path / "n.mbsg")
    cfg = json.loads((workspace / "estimate.json").read_text())
    cfg["template_step_deg"] = 30.0
    cfg["calibration_ranges"] = [0.5]
    (workspace / "noise.json").write_text(json.dumps(cfg))
    code = run("estimate", "--config", workspace / "noise.json", "--capture", tmp_path / "n.mbsg",
               "--out", tmp_path / "out")
    assert code == 3
