import json
import struct

import numpy as np
import pytest

from nvfp4qat.cli import (
    DataConfig, ExperimentSpec, SpecError, main, quantize_file, read_tensor, run_conformance, write_tensor,
)
from nvfp4qat.fp4core import E2M1_GRID, QuantizationError
from nvfp4qat.report import _Canvas, svg_path_points, write_report
from nvfp4qat.trainlab import RunRecord, TrainConfig, normalize_to_baseline

TINY = {
    "archs": ["cnn"], "tiers": ["s"], "recipes": ["baseline-bf16", "nvfp4-full"], "seeds": [0, 1, 2],
    "data": {"n_patients": 10, "slices_per_patient": 4},
    "train": {"epochs": 1, "batch_size": 16, "prc_points": 50},
}


# -- quantize --------------------------------------------------------------

def test_zero_tensor(tmp_path):
    write_tensor(tmp_path / "z.nvqt", np.zeros((4, 32)))
    s = quantize_file(tmp_path / "z.nvqt", tmp_path / "out")
    assert s["rmse"] == 0 and s["max_abs_err"] == 0 and s["saturation_fraction"] == 0
    for f in ("codes.bin", "scales.bin", "quantized.json", "stats.json"):
        assert (tmp_path / "out" / f).exists()


def test_grid_tensor_round_trips_exactly(tmp_path):
    rng = np.random.default_rng(0)
    grid = np.r_[E2M1_GRID, -E2M1_GRID]
    x = rng.choice(grid, size=(16, 48)) * 0.25
    x[:, ::16] = 1.5  # pin every block max so each block scale is exact
    write_tensor(tmp_path / "g.nvqt", x)
    for geom in ("1x16", "16x16"):
        assert quantize_file(tmp_path / "g.nvqt", tmp_path / geom, geometry=geom)["max_abs_err"] == 0


def test_rht_lowers_saturation_on_outlier_tensor(tmp_path):
    x = np.random.default_rng(0).normal(size=(32, 64)) * 0.5
    x[5, 7] = 40.0
    write_tensor(tmp_path / "o.nvqt", x)
    plain = quantize_file(tmp_path / "o.nvqt", tmp_path / "a")
    rot = quantize_file(tmp_path / "o.nvqt", tmp_path / "b", rht=True)
    assert rot["saturation_fraction"] < plain["saturation_fraction"]
    signs = json.loads((tmp_path / "b" / "quantized.json").read_text())["rht_signs"]
    assert len(signs) == 16


def test_sr_mode_from_header_replays(tmp_path):
    x = np.random.default_rng(1).normal(size=(8, 32))
    write_tensor(tmp_path / "s.nvqt", x, mode="stochastic", seed=4)
    quantize_file(tmp_path / "s.nvqt", tmp_path / "a")
    quantize_file(tmp_path / "s.nvqt", tmp_path / "b")
    assert (tmp_path / "a" / "codes.bin").read_bytes() == (tmp_path / "b" / "codes.bin").read_bytes()
    assert json.loads((tmp_path / "a" / "stats.json").read_text())["mode"] == "stochastic"


def test_malformed_files_name_offsets(tmp_path):
    p = tmp_path / "bad.nvqt"
    p.write_bytes(b"NOPE")
    with pytest.raises(QuantizationError, match="offset 0"):
        read_tensor(p)
    p.write_bytes(b"NVQT" + struct.pack("<I", 500) + b"{}")
    with pytest.raises(QuantizationError, match="offset 8"):
        read_tensor(p)
    meta = json.dumps({"shape": [2, 2]}).encode()
    p.write_bytes(b"NVQT" + struct.pack("<I", len(meta)) + meta + b"\0" * 12)
    with pytest.raises(QuantizationError, match=f"offset {8 + len(meta)}"):
        read_tensor(p)
    assert main(["quantize", str(p), "--out", str(tmp_path / "q")]) == 2


def test_tensor_file_round_trip(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_tensor(tmp_path / "t.nvqt", x, geometry="16x16")
    back, header = read_tensor(tmp_path / "t.nvqt")
    assert np.array_equal(back, x) and header["geometry"] == "16x16"


# -- spec ------------------------------------------------------------------

def test_spec_round_trip_and_validation(tmp_path):
    spec = ExperimentSpec.from_dict(TINY)
    assert ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    assert len(spec.runs()) == 6 and spec.runs() == ExperimentSpec.from_dict(TINY).runs()
    with pytest.raises(SpecError, match="unknown recipe"):
        ExperimentSpec.from_dict({**TINY, "recipes": ["fp2"]})
    with pytest.raises(SpecError, match="unknown spec keys"):
        ExperimentSpec.from_dict({**TINY, "color": 1})
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict({**TINY, "tiers": ["xl"]})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["sweep", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2


# -- sweep, resume, report -------------------------------------------------

@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    (root / "spec.json").write_text(json.dumps(TINY))
    assert main(["sweep", "--spec", str(root / "spec.json"), "--out", str(root / "out"), "--quiet"]) == 0
    return root / "out"


def test_sweep_writes_grid_and_report(sweep_dir):
    records = sorted(sweep_dir.glob("*/record.json"))
    assert len(records) == 6
    assert (sweep_dir / "report.json").exists()
    names = {p.parent.name for p in records}
    assert "cnn_s_nvfp4-full_s2" in names
    rec = RunRecord.read(sweep_dir / "cnn_s_nvfp4-full_s2")
    assert ExperimentSpec.from_dict(rec.config["spec"]) == ExperimentSpec.from_dict(
        json.loads((sweep_dir / "spec.json").read_text()))


def test_resume_trains_nothing(sweep_dir, capsys):
    before = {p: p.stat().st_mtime_ns for p in sweep_dir.glob("*/record.json")}
    spec = sweep_dir / "spec.json"
    assert main(["sweep", "--spec", str(spec), "--out", str(sweep_dir)]) == 0
    err = capsys.readouterr().err
    assert "train " not in err and err.count("skip ") == 6
    assert before == {p: p.stat().st_mtime_ns for p in sweep_dir.glob("*/record.json")}


def test_report_matches_normalization(sweep_dir):
    report = json.loads((sweep_dir / "report.json").read_text())
    recs = [RunRecord.read(p.parent) for p in sweep_dir.glob("*/record.json")]
    rows = normalize_to_baseline(recs)
    want = sorted(r["normalized"] for r in rows if r["recipe"] == "nvfp4-full")
    got = next(g for g in report["groups"] if g["recipe"] == "nvfp4-full")
    assert sorted(got["values"]) == pytest.approx(want, abs=1e-12)


def test_report_bytes_deterministic(sweep_dir, tmp_path):
    a = write_report(sweep_dir, tmp_path / "a")
    b = write_report(sweep_dir, tmp_path / "b")
    assert a == b
    for f in a["figures"] + ["summary.csv"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header = (tmp_path / "a" / "summary.csv").read_text().splitlines()[0]
    assert header.startswith("run,arch,tier,recipe,seed")


def test_prc_svg_matches_csv(sweep_dir, tmp_path):
    run = sweep_dir / "cnn_s_baseline-bf16_s0"
    write_report(sweep_dir, tmp_path)
    pts = svg_path_points((tmp_path / "prc_cnn_s_baseline-bf16_s0.svg").read_text())
    rows = [tuple(map(float, line.split(","))) for line in (run / "prc.csv").read_text().splitlines()[1:]]
    c = _Canvas("", "", "", (0.0, 1.0), (0.0, 1.0))
    assert len(pts) == len(rows)
    for (px, py), (r, p) in zip(pts, rows):
        assert abs(px - c.px(r)) <= 0.006 and abs(py - c.py(p)) <= 0.006


def test_report_errors_on_empty_dir(tmp_path):
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


# -- cross-validation ------------------------------------------------------

def test_cv_partitions_patients(tmp_path):
    spec = {**TINY, "recipes": ["baseline-bf16"], "seeds": [0]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["cv", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "cv"), "--quiet"]) == 0
    cv = json.loads((tmp_path / "cv" / "cv.json").read_text())
    assert len(list((tmp_path / "cv").glob("*_fold*/record.json"))) == 5
    tested = [p for f in cv["folds"] for p in f["test"]]
    assert len(tested) == len(set(tested)) == 10
    s = cv["summary"][0]
    assert s["mean"] == pytest.approx(np.mean(s["folds"]))


# -- conformance and single runs -------------------------------------------

def test_conformance_command(tmp_path, capsys):
    assert main(["conformance", "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "conformance.json").read_text())
    assert len(results) == 8 and all(r["passed"] for r in results)
    assert all(r["passed"] for r in run_conformance(["2d-rht-sr"], archs=("swin",)))


def test_run_command_and_literal_flag(tmp_path):
    spec = {**TINY, "recipes": ["nvfp4-full"], "seeds": [0]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    out = tmp_path / "r"
    assert main(["run", "--spec", str(tmp_path / "spec.json"), "--out", str(out), "--seed", "5",
                 "--literal-scaling", "--quiet"]) == 0
    rec = RunRecord.read(out / "cnn_s_nvfp4-full_s5")
    assert rec.config["recipe"]["literal_scaling"] is True
    assert main(["run", "--spec", str(tmp_path / "spec.json"), "--recipe", "nvfp4-full", "--out", str(out),
                 "--quiet"]) == 0
    with_two = {**spec, "seeds": [0, 1]}
    (tmp_path / "two.json").write_text(json.dumps(with_two))
    assert main(["run", "--spec", str(tmp_path / "two.json"), "--out", str(out)]) == 2


def test_data_config_defaults_match_dataset():
    assert DataConfig().n_patients == 40 and DataConfig().slices_per_patient == 12
    assert TrainConfig().batch_size == 16
