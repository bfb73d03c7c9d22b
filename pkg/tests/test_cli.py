import csv
import io
import json
import os
import subprocess
import sys
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import pytest

from equilopo import container
from equilopo.cli import main
from equilopo.conv import rotate_field
from equilopo.so3_math import Rotation, octahedral_group

CONFIG = """
[dataset]
train = 9
val = 3
test = 6
seed = 3

[model]
blocks = 1
width = 2
activation = adaptive
input_pool = 2
downsample_before = 0
dropout = 0.0

[train]
epochs = 1
batch_size = 3
recalibrate = 9
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(CONFIG)
    code, _, _ = run("make-dataset", "--config", cfg, "--out", root / "data")
    assert code == 0
    code, out, _ = run("train", "--config", cfg, "--data", root / "data", "--out", root / "run", "--quiet", "--threads", 1)
    assert code == 0
    return root, json.loads(out)


def test_usage_errors_exit_2(tmp_path):
    assert run()[0] == 2
    assert run("fly")[0] == 2
    assert run("verify", "physics")[0] == 2
    assert run("verify", "math", "--threads", 0)[0] == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlr = 0.1\nlearning_rate = 2\n")
    code, _, err = run("make-dataset", "--config", bad, "--out", tmp_path / "d")
    assert code == 2 and "bad.ini:3:" in err
    assert run("grad-check", "fft")[0] == 2
    assert run("train", "--out", tmp_path / "r")[0] == 2


def test_help_exits_0():
    assert run("--help")[0] == 0


def test_verify_math_report(tmp_path):
    report = tmp_path / "report.json"
    code, out, _ = run("verify", "math", "--cg-cache", tmp_path / "cg.elpo", "--out", report)
    assert code == 0
    data = json.loads(report.read_text())
    assert data["passed"] and data["scope"] == "math"
    assert {c["name"] for c in data["checks"]} >= {"wigner_orthogonality", "cg_orthogonality"}
    assert json.loads(out) == data


def test_verify_corrupted_cg_cache_fails_with_named_check(tmp_path):
    path = tmp_path / "cg.elpo"
    assert run("verify", "math", "--cg-cache", path)[0] == 0
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    code, out, _ = run("verify", "math", "--cg-cache", path)
    assert code == 1
    failed = [c["name"] for c in json.loads(out)["checks"] if not c["passed"]]
    assert "cg_orthogonality" in failed


def test_verify_cg_cache_with_wrong_values_fails(tmp_path):
    path = tmp_path / "cg.elpo"
    assert run("verify", "math", "--cg-cache", path)[0] == 0
    arrays, manifest = container.read(path)
    key = max(arrays, key=lambda k: arrays[k].size)
    arrays[key] = arrays[key] * 1.01
    container.write(path, arrays, manifest)
    code, out, _ = run("verify", "math", "--cg-cache", path)
    assert code == 1
    assert not {c["name"]: c["passed"] for c in json.loads(out)["checks"]}["cg_orthogonality"]


def test_grad_check_subset(tmp_path):
    code, out, _ = run("grad-check", "cg_square", "softmax_so3", "--out", tmp_path / "g.json")
    assert code == 0
    assert [r["op"] for r in json.loads(out)["ops"]] == ["cg_square", "softmax_so3"]


def test_make_dataset_bit_exact(tmp_path):
    cfg = tmp_path / "d.ini"
    cfg.write_text("[dataset]\ntrain = 6\nval = 0\ntest = 3\n")
    for d in ("a", "b"):
        assert run("make-dataset", "--config", cfg, "--seed", 7, "--out", tmp_path / d)[0] == 0
    for name in ("train.elpo", "test.elpo"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "a" / "val.elpo").exists()


def test_train_writes_metrics_and_checkpoint(trained):
    root, summary = trained
    lines = (root / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["split"] for x in lines] == ["train", "val"]
    _, manifest = container.read(root / "run" / "checkpoint.elpo")
    assert manifest["kind"] == "checkpoint" and manifest["model"]["blocks"] == 1
    assert summary["checkpoint"].endswith("checkpoint.elpo")


def test_infer_csv_and_octahedral_label_invariance(trained, tmp_path):
    root, _ = trained
    ckpt = root / "run" / "checkpoint.elpo"
    code, out, err = run("infer", ckpt, root / "data" / "test.elpo")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["index", "score_0", "score_1", "score_2", "predicted", "label"]
    assert len(rows) == 7
    assert json.loads(err)["samples"] == 6

    arrays, manifest = container.read(root / "data" / "test.elpo")
    arrays["volumes"] = rotate_field(arrays["volumes"], Rotation.from_matrix(octahedral_group()[7]))
    rotated = tmp_path / "rotated.elpo"
    container.write(rotated, arrays, manifest)
    code, _, _ = run("infer", ckpt, rotated, "--out", tmp_path / "rot.csv")
    assert code == 0
    rows_rot = list(csv.reader(open(tmp_path / "rot.csv", newline="")))
    assert [r[4] for r in rows_rot] == [r[4] for r in rows]
    a = np.array([[float(v) for v in r[1:4]] for r in rows[1:]])
    b = np.array([[float(v) for v in r[1:4]] for r in rows_rot[1:]])
    assert np.abs(a - b).max() <= 1e-5 * np.abs(a).max()


def test_infer_rejects_non_checkpoint(trained):
    root, _ = trained
    code, _, err = run("infer", root / "data" / "test.elpo", root / "data" / "test.elpo")
    assert code == 2 and "not a checkpoint" in err


def test_training_deterministic_single_thread(trained, tmp_path):
    root, _ = trained
    cfg = root / "run.ini"
    run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "again", "--quiet", "--threads", 1)
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (root / "run" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "again" / "checkpoint.elpo").read_bytes() == (root / "run" / "checkpoint.elpo").read_bytes()


def test_audit_commands(tmp_path):
    code, out, _ = run("audit-activation", "--samples", 20000, "--bins", 5, "--out", tmp_path / "act")
    assert code == 0
    summary = json.loads((tmp_path / "act" / "summary.json").read_text())
    assert summary["fraction_full"] <= 0.05 <= summary["fraction_truncated"]
    assert os.path.exists(summary["files"]["points"])
    code, _, _ = run("audit-softmax", "--signals", 20, "--rotations", 5000, "--out", tmp_path / "sm")
    assert code == 0
    assert (tmp_path / "sm" / "softmax_points.csv").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "equilopo", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout
