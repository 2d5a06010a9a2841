import json
import subprocess
import sys

import numpy as np
import pytest

from mscnet import cli, gradsuite
from mscnet.config import ModelConfig, TrainConfig
from mscnet.formats import load_mmct, read_pnm, write_pgm


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("MSCD_LOG", "quiet")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.run(["generate", "--out", str(d), "--count", "10", "--size", "64", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data_dir, tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "cfg.json"
    small = ModelConfig(widths=(4, 6, 8, 8), stem_width=4, awp_grid=2, image_size=64,
                        train=TrainConfig(iters=4, batch_size=2, val_interval=2))
    cfg.write_text(small.to_json())
    out = cfg.parent / "m.msck"
    assert cli.run(["train", "--data", str(data_dir), "--config", str(cfg), "--out", str(out)]) == 0
    return out


def _err_line(capsys):
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("mscnet: error: ")
    return err


def test_generate_writes_manifest(data_dir):
    lines = (data_dir / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10 and "label" in json.loads(lines[0])


def test_generate_ratio_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"buckets": [{"max_pct": 60, "proportion": 1.0}]}))
    assert cli.run(["generate", "--out", str(tmp_path / "x"), "--count", "2", "--ratio-spec", str(spec)]) == 1


def test_eval_prints_json_report(ckpt, data_dir, capsys):
    assert cli.run(["eval", "--data", str(data_dir), "--ckpt", str(ckpt), "--split", "train"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"precision", "recall", "f1", "iou", "kappa", "samples"}


def test_predict_and_render(ckpt, data_dir, tmp_path):
    sid = json.loads((data_dir / "manifest.jsonl").read_text().splitlines()[0])["id"]
    pgm, raw = tmp_path / "p.pgm", tmp_path / "p.mmct"
    base = ["predict", "--ckpt", str(ckpt), "--data", str(data_dir), "--sample", sid]
    assert cli.run(base + ["--out", str(pgm)]) == 0
    assert cli.run(base + ["--out", str(raw), "--raw"]) == 0
    prob = load_mmct(raw)
    assert prob.shape == (64, 64) and prob.dtype == np.float32
    assert np.array_equal(read_pnm(pgm), np.round(prob * 255).astype(np.uint8))
    label = data_dir / f"images/{sid}_label.pgm"
    assert cli.run(["render", "--pred", str(pgm), "--label", str(label), "--out", str(tmp_path / "r.ppm")]) == 0
    assert read_pnm(tmp_path / "r.ppm").shape == (64, 64, 3)


def test_predict_unknown_sample(ckpt, data_dir, tmp_path, capsys):
    code = cli.run(["predict", "--ckpt", str(ckpt), "--data", str(data_dir), "--sample", "nope",
                    "--out", str(tmp_path / "p.pgm")])
    assert code == 2
    _err_line(capsys)


def test_stats_formats(data_dir, capsys):
    assert cli.run(["stats", "--data", str(data_dir)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["changed"] + stats["unchanged"] == 10
    assert cli.run(["stats", "--data", str(data_dir), "--format", "table"]) == 0
    assert "changed images" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    for argv in (["frobnicate"], ["stats", "--data", "x", "--bogus"], [], ["eval", "--data", "x"]):
        assert cli.run(argv) == 1
        _err_line(capsys)


def test_missing_data_exit_2(tmp_path, capsys):
    assert cli.run(["stats", "--data", str(tmp_path / "missing")]) == 2
    _err_line(capsys)


def test_render_size_mismatch_exit_2(tmp_path, capsys):
    write_pgm(tmp_path / "a.pgm", np.zeros((4, 4), np.uint8))
    write_pgm(tmp_path / "b.pgm", np.zeros((4, 5), np.uint8))
    assert cli.run(["render", "--pred", str(tmp_path / "a.pgm"), "--label", str(tmp_path / "b.pgm"),
                    "--out", str(tmp_path / "o.ppm")]) == 2


def test_gradcheck_failure_exit_3(monkeypatch, capsys):
    monkeypatch.setattr(gradsuite, "run_suite", lambda seed: {"ops": {"x": 0.5}})
    assert cli.run(["gradcheck"]) == 3
    out = capsys.readouterr()
    assert "FAIL" in out.out and out.err.startswith("mscnet: error: ")


def test_bad_log_level_exit_1(monkeypatch, capsys):
    monkeypatch.setenv("MSCD_LOG", "loud")
    assert cli.run(["stats", "--data", "x"]) == 1
    _err_line(capsys)


def test_info_logging_goes_to_stderr(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("MSCD_LOG", "info")
    assert cli.run(["generate", "--out", str(tmp_path / "d"), "--count", "2", "--size", "64"]) == 0
    out = capsys.readouterr()
    assert out.out == "" and "wrote 2 samples" in out.err


def test_threads_must_be_positive(capsys):
    assert cli.run(["stats", "--data", "x", "--threads", "0"]) == 1


def test_entry_point_subprocess():
    proc = subprocess.run([sys.executable, "-m", "mscnet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "generate" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "mscnet.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("mscnet: error:")
