import csv
import json

import numpy as np
import pytest

from divflow.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from divflow.segmentation import read_f4m
from divflow.volume import read_f4d

SMALL = ["--kind", "pipe", "--dims", "12,8,8", "--spacing", "2e-3"]
TINY_TRAIN = ["--epochs", "15", "--m", "8", "--width", "16", "--depth", "2"]

REPORT_SCHEMA = {
    "vel_nrmse", "de", "div_rms", "pvnr_db", "wrapped_pct", "per_timeframe", "counts",
    "plane_flows", "biases", "venc_ms",
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def noisy(workdir):
    assert main(["phantom", *SMALL, "--noise", "4", "--nt", "2", "--waveform", "half-sine",
                 "--out", "p.f4d", "--lumen-mask", "lumen.f4m"]) == EXIT_OK
    assert main(["segment", "p.f4d", "--out", "m.f4m"]) == EXIT_OK
    return workdir


def test_phantom_writes_file_and_sidecar(workdir):
    assert main(["phantom", "--kind", "pipe", "--dims", "48,16,16", "--venc", "1.0", "--out", "a.f4d"]) == 0
    side = json.loads((workdir / "a.json").read_text())
    assert side["flow_rate_lmin"][0] > 0
    assert side["corruption"]["venc_ms"] == 1.0
    assert read_f4d(workdir / "a.f4d").dims == (48, 16, 16)


def test_phantom_seed_is_deterministic(workdir):
    for name in ("a", "b"):
        assert main(["phantom", *SMALL, "--noise", "4", "--seed", "7", "--out", f"{name}.f4d"]) == 0
    assert (workdir / "a.f4d").read_bytes() == (workdir / "b.f4d").read_bytes()


def test_phantom_venc_in_cms(workdir):
    assert main(["phantom", *SMALL, "--venc-cms", "150", "--out", "a.f4d"]) == 0
    assert read_f4d(workdir / "a.f4d").venc == pytest.approx(1.5)


@pytest.mark.parametrize("flag,value", [("--dims", "4,4"), ("--dims", "0,4,4"), ("--spacing", "-1")])
def test_phantom_bad_flags_name_the_flag(workdir, capsys, flag, value):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", flag, value, "--out", "x.f4d"])
    assert exc.value.code == EXIT_USAGE
    assert flag in capsys.readouterr().err


def test_phantom_radius_too_large_is_usage_error(workdir, capsys):
    assert main(["phantom", *SMALL, "--radius", "1.0", "--out", "x.f4d"]) == EXIT_USAGE
    assert "radius" in capsys.readouterr().err


def test_segment_matches_analytic_lumen(noisy):
    mask, _ = read_f4m(noisy / "m.f4m")
    lumen, _ = read_f4m(noisy / "lumen.f4m")
    iou = (mask & lumen).sum() / (mask | lumen).sum()
    assert iou >= 0.9


def test_segment_dilation_strictly_contains(noisy):
    assert main(["segment", "p.f4d", "--dilate", "18", "--out", "d.f4m"]) == 0
    base, _ = read_f4m(noisy / "m.f4m")
    dil, _ = read_f4m(noisy / "d.f4m")
    assert np.all(dil[base]) and dil.sum() > base.sum()


def test_segment_empty_mask_is_data_error(noisy, capsys):
    assert main(["segment", "p.f4d", "--frac", "1.5", "--out", "e.f4m"]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_missing_input_is_data_error(workdir):
    assert main(["segment", "nope.f4d", "--out", "e.f4m"]) == EXIT_DATA


def test_enhance_writes_outputs_and_manifest(noisy):
    rc = main(["enhance", "p.f4d", "--mask", "m.f4m", *TINY_TRAIN, "--workers", "1", "--out", "e.f4d"])
    assert rc == EXIT_OK
    manifest = json.loads((noisy / "e.run" / "manifest.json").read_text())
    assert len(manifest["checkpoints"]) == 2
    assert len(manifest["timing_s"]["per_timeframe"]) == 2
    for key in ("output", "config"):
        assert (noisy / manifest[key]).exists()
    for p in manifest["checkpoints"] + manifest["loss_histories"] + manifest["figures"]:
        assert (noisy / p).exists()
    cfg = json.loads((noisy / manifest["config"]).read_text())
    assert cfg["epochs"] == 15 and manifest["config_digest"]
    out = read_f4d(noisy / "e.f4d")
    mask, _ = read_f4m(noisy / "m.f4m")
    assert np.all(out.velocity[:, :, ~mask] == 0)


def test_enhance_config_file_with_flag_override(noisy):
    (noisy / "cfg.json").write_text(json.dumps({"epochs": 40, "m": 8, "width": 16, "depth": 2, "sigma": 0.7}))
    assert main(["enhance", "p.f4d", "--mask", "m.f4m", "--config", "cfg.json", "--epochs", "5",
                 "--workers", "1", "--no-figures", "--out", "e.f4d"]) == 0
    cfg = json.loads((noisy / "e.run" / "config.json").read_text())
    assert cfg["epochs"] == 5 and cfg["sigma"] == 0.7


def test_enhance_workers_do_not_change_checkpoints(noisy):
    for w in ("1", "4"):
        assert main(["enhance", "p.f4d", "--mask", "m.f4m", *TINY_TRAIN, "--workers", w, "--no-figures",
                     "--run-dir", f"run{w}", "--out", f"e{w}.f4d"]) == 0
    for t in range(2):
        assert (noisy / "run1" / f"tf{t:03d}.f4n").read_bytes() == (noisy / "run4" / f"tf{t:03d}.f4n").read_bytes()
    assert (noisy / "e1.f4d").read_bytes() == (noisy / "e4.f4d").read_bytes()


def test_enhance_sigma_from_scales_and_records_tau(noisy):
    from divflow.segmentation import build_geometry

    mask, spacing = read_f4m(noisy / "m.f4m")
    extent = build_geometry(mask, spacing).extent
    sim = {"sigma": 1.0, "spacing_m": [2 * s for s in spacing], "extent_m": list(extent)}
    (noisy / "sim.json").write_text(json.dumps(sim))
    assert main(["enhance", "p.f4d", "--mask", "m.f4m", *TINY_TRAIN, "--workers", "1", "--no-figures",
                 "--sigma-from", "sim.json", "--out", "e.f4d"]) == 0
    manifest = json.loads((noisy / "e.run" / "manifest.json").read_text())
    assert manifest["sigma_scaling"]["tau"] == pytest.approx(8.0)
    assert json.loads((noisy / "e.run" / "config.json").read_text())["sigma"] == pytest.approx(8.0)


def test_enhance_mask_mismatch_is_data_error(noisy):
    assert main(["phantom", "--dims", "10,8,8", "--out", "q.f4d", "--lumen-mask", "q.f4m"]) == 0
    assert main(["enhance", "p.f4d", "--mask", "q.f4m", *TINY_TRAIN, "--out", "e.f4d"]) == EXIT_DATA


def test_enhance_numeric_failure_exit_code(noisy, monkeypatch, capsys):
    import divflow.trainer as tr

    monkeypatch.setattr(tr, "compute_loss", lambda *a, **k: (float("inf"), {"L_d": 0.0, "L_ns": 0.0}))
    rc = main(["enhance", "p.f4d", "--mask", "m.f4m", *TINY_TRAIN, "--workers", "1", "--out", "e.f4d"])
    assert rc == EXIT_NUMERIC
    assert "timeframe 0" in capsys.readouterr().err


def test_metrics_identical_fields_report_pvnr_absent(noisy, capsys):
    assert main(["metrics", "--ref", "p.f4d", "--ref-field", "velocity", "--pred", "p.f4d", "--mask", "m.f4m",
                 "--json", "r.json"]) == 0
    report = json.loads((noisy / "r.json").read_text())
    assert report["vel_nrmse"] == 0 and report["de"] == 0 and report["wrapped_pct"] == 0
    assert report["pvnr_db"] is None
    assert "absent" in capsys.readouterr().out


def test_metrics_auto_prefers_reference_section(noisy, capsys):
    assert main(["metrics", "--ref", "p.f4d", "--pred", "p.f4d", "--mask", "m.f4m", "--json", "r.json"]) == 0
    assert json.loads((noisy / "r.json").read_text())["vel_nrmse"] > 0


def test_metrics_report_schema_is_stable(noisy):
    # clean reference against noisy measurement
    assert main(["phantom", *SMALL, "--nt", "2", "--waveform", "half-sine", "--venc", "1.6474780142305534",
                 "--out", "clean.f4d"]) == 0
    args = ["metrics", "--ref", "clean.f4d", "--pred", "p.f4d", "--mask", "m.f4m"]
    assert main(args + ["--json", "a.json", "--csv", "a.csv", "--figure", "a.png"]) == 0
    assert main(args + ["--json", "b.json"]) == 0
    a = json.loads((noisy / "a.json").read_text())
    assert set(a) == REPORT_SCHEMA
    assert (noisy / "a.json").read_text() == (noisy / "b.json").read_text()
    assert a["pvnr_db"] == pytest.approx(20 * np.log10(1 / a["vel_nrmse"]), rel=1e-12)
    assert len(a["per_timeframe"]) == 2
    with open(noisy / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["vel_nrmse"]) == pytest.approx(a["vel_nrmse"])
    assert (noisy / "a.png").stat().st_size > 0


def test_masscons_ideal_pipe_bias_small(workdir):
    assert main(["phantom", "--kind", "pipe", "--out", "ideal.f4d", "--lumen-mask", "l.f4m"]) == 0
    assert main(["masscons", "ideal.f4d", "--mask", "l.f4m", "--pair", "z:2", "z:13",
                 "--json", "b.json", "--csv", "b.csv", "--figure", "b.png"]) == 0
    table = json.loads((workdir / "b.json").read_text())
    assert table[0]["rel_bias_pct"] < 1.0
    assert (workdir / "b.png").exists() and (workdir / "b.csv").exists()


def test_masscons_needs_pairs(noisy):
    with pytest.raises(SystemExit) as exc:
        main(["masscons", "p.f4d", "--mask", "m.f4m", "--pair", "z:2"])
    assert exc.value.code == EXIT_USAGE
    assert main(["masscons", "p.f4d", "--mask", "m.f4m"]) == EXIT_USAGE
    assert main(["masscons", "p.f4d", "--mask", "m.f4m", "--pair", "q:1", "z:2"]) == EXIT_USAGE


def test_sweep_rows_and_empty_grid(noisy):
    grid = {"data": "p.f4d", "mask": "m.f4m", "base": {"epochs": 5, "m": 8, "width": 8, "depth": 1},
            "grid": {"sigma": [0.05, 0.1, 1.0, 3.0]}, "out": "sweep.csv"}
    (noisy / "g.json").write_text(json.dumps(grid))
    assert main(["sweep", "g.json"]) == 0
    with open(noisy / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["sigma"]) for r in rows] == [0.05, 0.1, 1.0, 3.0]
    assert {"vel_nrmse", "de", "div_rms", "runtime_s"} <= set(rows[0])
    assert (noisy / "sweep.png").exists()
    (noisy / "g0.json").write_text(json.dumps({**grid, "grid": {}}))
    assert main(["sweep", "g0.json"]) == EXIT_USAGE


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
