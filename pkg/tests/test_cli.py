import json
import subprocess
import sys
from dataclasses import asdict

import pytest

from lcdc.checks import mini_config
from lcdc.cli import main
from lcdc.io import write_labels_csv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def kv(out):
    return dict(line.split("=", 1) for line in out.splitlines() if "=" in line)


@pytest.fixture
def mini_cfg(tmp_path):
    net = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(mini_config()).items()}
    data = {"frames": 8, "height": 8, "width": 8, "radius": 2.5, "texture_scale": 2.0, "classes": ["up", "down", "left"]}
    p = tmp_path / "mini.json"
    p.write_text(json.dumps({"net": net, "data": data, "optimizer": {"batch_size": 4}}))
    return p


def test_prop1_translation(capsys):
    code, out = run(capsys, "prop1", "--translation", "1,0", "--tol", "1e-9")
    assert code == 0
    assert out.splitlines()[0] == "translation=1,0"
    assert out.splitlines()[-1] == "PASS"


def test_prop1_violated(capsys):
    code, out = run(capsys, "prop1", "--translation", "1,0", "--violate")
    assert code == 1 and out.splitlines()[-1] == "FAIL"


def test_params_ratio(capsys):
    code, out = run(capsys, "params", "--kh", 3, "--kw", 3, "--groups", 4)
    assert code == 0
    assert kv(out)["ratio"] == "36"


def test_params_of_config(capsys, mini_cfg):
    code, out = run(capsys, "params", "--config", mini_cfg)
    assert code == 0 and int(kv(out)["total"]) > 0


def test_taps(capsys):
    code, out = run(capsys, "taps", "--kh", 2, "--kw", 3, "--frames", 15)
    lines = out.splitlines()
    assert code == 0
    assert lines[0] == "anchor_shift=0,1"
    assert lines[2] == "0,0,0,0,-1"
    assert lines[-1].endswith(",1")


def test_taps_rejects_empty_schedule(capsys):
    code, out = run(capsys, "taps", "--frames", 15, "--t-stride", 2)
    assert code == 2
    assert out.splitlines()[-1].endswith(",0")


def test_eval_identical(capsys, tmp_path):
    labels = [0, 0, 1, 1, 1, 2]
    write_labels_csv(tmp_path / "a.csv", labels)
    code, out = run(capsys, "eval", tmp_path / "a.csv", tmp_path / "a.csv")
    assert code == 0 and out.strip() == "100,100,100"


def test_eval_values(capsys, tmp_path):
    write_labels_csv(tmp_path / "p.csv", [0, 0, 1, 1])
    write_labels_csv(tmp_path / "g.csv", [0, 1, 1, 1])
    code, out = run(capsys, "eval", tmp_path / "p.csv", tmp_path / "g.csv", "--k", "10,60")
    assert code == 0 and out.strip() == "75,100,100,50"


def test_eval_length_mismatch(capsys, tmp_path):
    write_labels_csv(tmp_path / "p.csv", [0, 0])
    write_labels_csv(tmp_path / "g.csv", [0])
    assert run(capsys, "eval", tmp_path / "p.csv", tmp_path / "g.csv")[0] == 2


def test_gen_is_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "gen", "--kind", "sequence", "--seed", 5, "--frames", 6, "--height", 10, "--width", 10, "--out", tmp_path / d)[0] == 0
    for name in ("frames.tsr", "labels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_then_motion(capsys, tmp_path, mini_cfg):
    code, out = run(capsys, "train", "--config", mini_cfg, "--epochs", 1, "--seed", 2, "--out", tmp_path / "run")
    assert code == 0 and kv(out)["epochs"] == "1"
    assert run(capsys, "gen", "--frames", 8, "--height", 8, "--width", 8, "--out", tmp_path / "clip")[0] == 0
    code, out = run(capsys, "motion", "--frames", tmp_path / "clip" / "frames.tsr", "--checkpoint", tmp_path / "run" / "checkpoint", "--out", tmp_path / "mo")
    assert code == 0
    assert kv(out)["frames"] == "8" and kv(out)["layers"] == "2"
    assert (tmp_path / "mo" / "energy.tsr").exists()


def test_motion_missing_checkpoint(capsys, tmp_path):
    code = main(["motion", "--frames", str(tmp_path / "x.tsr"), "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)])
    assert code == 2


@pytest.mark.parametrize(
    "argv",
    [["bogus"], ["params", "--kh", "three"], ["prop1", "--translation", "1"], ["gen"], ["equiv", "--seed", "-1"]],
)
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_threads(capsys):
    assert run(capsys, "degeneracy", "--threads", 0)[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lcdc", "params", "--groups", "4"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ratio=36" in proc.stdout.splitlines()
