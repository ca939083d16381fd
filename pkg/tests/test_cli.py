import json

import pytest

from helpers import tiny_config
from spotpatch import harness
from spotpatch.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(tiny_config().to_json())
    assert main(["train-source", "--config", str(d / "cfg.json"), "--out-dir", str(d)]) == 0
    assert main(["run-decathlon", "--config", str(d / "cfg.json"), "--out-dir", str(d), "--sweep"]) == 0
    return d


def test_outputs_written(run_dir):
    for name in ("source.npz", "report.json", "gates.pgm", "sweep.csv", "a.sptp", "b.sptp"):
        assert (run_dir / name).exists(), name
    header = (run_dir / "sweep.csv").read_text().splitlines()[0]
    assert header == "lambda_sps,task,patched_fraction,footprint,map50"


def test_gen_data(run_dir, tmp_path, capsys):
    assert main(["gen-data", "--config", str(run_dir / "cfg.json"), "--out-dir", str(tmp_path),
                 "--task", "a"]) == 0
    written = json.loads(capsys.readouterr().out)["written"]
    assert sorted(p.rsplit("/", 1)[1] for p in written) == ["a_eval.npz", "a_train.npz"]


def test_train_patch_with_overrides(run_dir, tmp_path, capsys):
    argv = ["train-patch", "--config", str(run_dir / "cfg.json"), "--source", str(run_dir / "source.npz"),
            "--out-dir", str(tmp_path), "--task", "b", "--mode", "weight-transform", "--seed", "2"]
    assert main(argv) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["name"] == "b" and out["mode"] == "weight-transform" and all(out["gates"])
    assert (tmp_path / "b.sptp").exists()


def test_footprint_bit_modes(run_dir, capsys):
    base = ["footprint", "--config", str(run_dir / "cfg.json"), "--out-dir", str(run_dir),
            "--patch", str(run_dir / "a.sptp")]
    assert main(base) == 0
    r32 = json.loads(capsys.readouterr().out)
    assert main(base + ["--bit-mode", "8"]) == 0
    r8 = json.loads(capsys.readouterr().out)
    assert r32["mode"] == "base32" and r8["mode"] == "base8"
    assert r8["ratio"] == pytest.approx(4 * r32["mask_ratio"] + r32["float_ratio"])
    report = harness.RunReport.load(run_dir / "report.json")
    assert r32["ratio"] == pytest.approx(report.tasks[0].footprint.ratio)


def test_score_report_and_patch(run_dir, capsys):
    assert main(["score", "--out-dir", str(run_dir)]) == 0
    s = json.loads(capsys.readouterr().out)
    assert 0 <= s["score"] <= 10000
    assert main(["score", "--config", str(run_dir / "cfg.json"), "--out-dir", str(run_dir),
                 "--patch", str(run_dir / "a.sptp"), "--task", "a"]) == 0
    m = json.loads(capsys.readouterr().out)["map50"]
    report = harness.RunReport.load(run_dir / "report.json")
    assert m == pytest.approx(report.tasks[0].map50, abs=1e-9)


def test_inspect_and_dump_gates(run_dir, tmp_path, capsys):
    assert main(["inspect-patch", "--patch", str(run_dir / "a.sptp")]) == 0
    layers = json.loads(capsys.readouterr().out)["layers"]
    assert any(row["bn_channels"] for row in layers)
    out = tmp_path / "g.pgm"
    assert main(["dump-gates", "--out-dir", str(run_dir), "-o", str(out)]) == 0
    assert out.read_bytes() == (run_dir / "gates.pgm").read_bytes()


def test_errors_return_one(tmp_path, capsys):
    assert main(["inspect-patch", "--patch", str(tmp_path / "missing.sptp")]) == 1
    (tmp_path / "bad.sptp").write_bytes(b"nope")
    assert main(["inspect-patch", "--patch", str(tmp_path / "bad.sptp")]) == 1
    (tmp_path / "bad.json").write_text('{"bogus": 1}')
    assert main(["score", "--config", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_bit_mode_rejected_by_parser():
    with pytest.raises(SystemExit):
        main(["footprint", "--bit-mode", "16"])
