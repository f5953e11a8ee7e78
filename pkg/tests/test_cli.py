import csv
import json
import shutil
from pathlib import Path

import pytest

from mono3d_diag.cli import JOBS_ENV, build_config, build_parser, main, resolve_jobs

TOY = Path(__file__).parent / "fixtures" / "toy"
GOLDEN = TOY / "golden"


def _data(*extra, pred=None, raw=True):
    args = ["--gt", str(TOY / "label_2"), "--pred", str(pred or TOY / "pred"), "--calib", str(TOY / "calib")]
    if raw:
        args += ["--raw", str(TOY / "raw")]
    return args + list(extra)


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("jobs", ["1", "2"])
def test_eval_matches_golden(tmp_path, jobs, capsys):
    assert main(["eval", *_data("--out", str(tmp_path), "--jobs", jobs)]) == 0
    for name in ("eval.csv", "eval.json"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()
    assert "AP40" in capsys.readouterr().out


def test_diagnose_matches_golden(tmp_path):
    assert main(["diagnose", *_data("--out", str(tmp_path), "--jobs", "1")]) == 0
    for name in ("table1.csv", "table1.json"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()
    meta = json.loads((tmp_path / "table1.json").read_text())
    assert meta["metadata"]["degraded"] is False


def test_diagnose_degraded_without_raw(tmp_path, capsys):
    assert main(["diagnose", *_data("--out", str(tmp_path), "--jobs", "1", raw=False)]) == 0
    assert "Degraded" in capsys.readouterr().out
    assert json.loads((tmp_path / "table1.json").read_text())["metadata"]["degraded"] is True


def test_empty_prediction_dir_gives_zero(tmp_path):
    empty = tmp_path / "pred"
    empty.mkdir()
    out = tmp_path / "out"
    assert main(["eval", *_data("--out", str(out), "--jobs", "1", "--task", "3d", pred=empty, raw=False)]) == 0
    assert {float(r["ap40"]) for r in _csv(out / "eval.csv")} == {0.0}


def test_missing_calibration_dir(tmp_path, capsys):
    args = ["eval", "--gt", str(TOY / "label_2"), "--pred", str(TOY / "pred"), "--calib", str(tmp_path / "nope")]
    assert main(args) == 1
    assert "error" in capsys.readouterr().err


def test_no_shared_stems(tmp_path):
    calib = tmp_path / "calib"
    calib.mkdir()
    (calib / "999999.txt").write_text((TOY / "calib" / "000000.txt").read_text())
    assert main(["eval", "--gt", str(TOY / "label_2"), "--pred", str(TOY / "pred"), "--calib", str(calib)]) == 1


def test_partial_parse_failure(tmp_path, capsys):
    pred = tmp_path / "pred"
    shutil.copytree(TOY / "pred", pred)
    (pred / "000001.txt").write_text("Car 1 2 3\n")
    out = tmp_path / "out"
    assert main(["eval", *_data("--out", str(out), "--jobs", "1", pred=pred, raw=False)]) == 2
    assert "000001" in capsys.readouterr().err
    meta = json.loads((out / "eval.json").read_text())["metadata"]
    assert meta["failures"] and meta["frames"] == 2


def test_loc_error(tmp_path, capsys):
    assert main(["loc-error", "--shift", "2,2", "--shift", "8,6", "--depth", "60", "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "loc_error.csv")
    assert [round(float(r["60m"]), 2) for r in rows] == [0.24, 0.85]
    assert "0.85" in capsys.readouterr().out
    assert main(["loc-error", "--depth", "0"]) == 1


def test_loss_check_exit_codes(capsys):
    assert main(["loss-check", "--trials", "50"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert main(["loss-check", "--trials", "50", "--corrupt-gradient"]) == 3
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "failing case" in captured.err
    assert main(["loss-check", "--trials", "0"]) == 1


@pytest.mark.parametrize("argv", [[], ["bogus"], ["eval", "--task", "4d"], ["loc-error", "--shift", "x"]])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_toml_config_and_flag_override(tmp_path):
    cfg_file = tmp_path / "run.toml"
    cfg_file.write_text(
        "[run]\n"
        f'gt_dir = "{TOY / "label_2"}"\n'
        f'pred_dir = "{TOY / "pred"}"\n'
        'calib_dir = "calib"\n'
        'tasks = ["bev"]\n'
        "range_interval = 5.0\n"
        "jobs = 3\n"
    )
    cfg = build_config(build_parser().parse_args(["eval", "--config", str(cfg_file), "--jobs", "1"]))
    assert cfg.tasks == ["bev"] and cfg.range_interval == 5.0
    assert cfg.jobs == 1
    assert cfg.calib_dir == tmp_path / "calib"

    cfg_file.write_text("[run]\nnot_a_key = 1\n")
    assert main(["eval", "--config", str(cfg_file)]) == 1


def test_jobs_from_environment(monkeypatch):
    cfg = build_config(build_parser().parse_args(["eval"]))
    monkeypatch.setenv(JOBS_ENV, "3")
    assert resolve_jobs(cfg) == 3
    monkeypatch.setenv(JOBS_ENV, "many")
    assert main(["eval", *_data()]) == 1


def test_weight_flag_parsing():
    parse = lambda w: build_config(build_parser().parse_args(["stats", "--weight", w])).weight_scheme
    assert parse("hard:40").threshold == 40.0
    soft = parse("soft:50:2")
    assert (soft.center, soft.temperature) == (50.0, 2.0)


def test_range_eval_outputs(tmp_path):
    assert main(["range-eval", *_data("--out", str(tmp_path), "--jobs", "1", "--task", "bev")]) == 0
    rows = _csv(tmp_path / "range_eval.csv")
    assert {r["task"] for r in rows} == {"bev"}
    assert (tmp_path / "range_eval.dat").exists()
    meta = json.loads((tmp_path / "range_eval.json").read_text())["metadata"]
    assert meta["out_of_bucket_gt"] == "ignored"
    assert main(["range-eval", *_data("--out", str(tmp_path), "--jobs", "1", "--task", "bev", "--bucket-first")]) == 0
    meta = json.loads((tmp_path / "range_eval.json").read_text())["metadata"]
    assert meta["out_of_bucket_gt"] == "excluded"


def test_stats_outputs(tmp_path):
    assert main(["stats", *_data("--out", str(tmp_path), "--jobs", "1", "--weight", "soft:60:1")]) == 0
    for name in ("misalignment.csv", "depth_error.csv", "sample_weights.json", "stats.dat"):
        assert (tmp_path / name).exists(), name
    mis = _csv(tmp_path / "misalignment.csv")
    assert sum(int(r["count"]) for r in mis) == 5
    meta = json.loads((tmp_path / "misalignment.json").read_text())["metadata"]
    assert meta["reference_point"] == "volumetric"
