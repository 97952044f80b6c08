import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sapiens_mini.cli import main
from sapiens_mini.io import read_dataset

FAST = ["data.synthetic_count=6", "data.batch_size=3", "head.proto_count=64", "head.proj_hidden=32",
        "head.bottleneck=16", "views.num_local=2", "schedule.warmup_iters=2"]


def sets(*items):
    out = []
    for it in FAST + list(items):
        out += ["--set", it]
    return out


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run_json(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run_json(["synth", "--out", str(tmp_path / name), "--count", "64", "--seed", "7",
                               "--run-dir", str(tmp_path / "r")], capsys)
        assert code == 0
    da, db = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    assert da == db and len([k for k in da if k.startswith("images/")]) == 64
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["count"] == 64 and manifest["seed"] == 7


def test_pretrain_writes_log_and_checkpoint(tmp_path, capsys):
    run = tmp_path / "pre"
    code, out, _ = run_json(["pretrain", "--run-dir", str(run)] + sets("schedule.total_iters=10"), capsys)
    assert code == 0
    lines = (run / "log.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert [json.loads(l)["iter"] for l in lines] == list(range(1, 11))
    result = json.loads(out)
    assert Path(result["checkpoint"]).name == "ckpt_000010.bin"
    assert (run / "config.resolved").is_file()
    report = json.loads((run / "reports" / "pretrain.json").read_text())
    assert report["metrics"]["iters"] == 10

    # resume to 12 iterations appends two records
    code, _, _ = run_json(["pretrain", "--run-dir", str(run), "--resume", result["checkpoint"]]
                          + sets("schedule.total_iters=12"), capsys)
    # the total-iteration count is part of the config hash, so resuming under a new length is refused
    assert code == 3

    # knn and pca on the pretrained encoder
    data = tmp_path / "ds"
    assert main(["synth", "--out", str(data), "--count", "4", "--seed", "1", "--run-dir", str(tmp_path / "s")]) == 0
    capsys.readouterr()
    code, out, _ = run_json(["knn", "--checkpoint", result["checkpoint"], "--data", str(data), "--query", "1",
                             "-k", "3", "--run-dir", str(tmp_path / "k")] + sets(), capsys)
    assert code == 0
    nb = json.loads(out)["neighbours"]
    assert nb[0] == 1 and len(nb) == 3
    code, out, _ = run_json(["pca", "--checkpoint", result["checkpoint"], "--data", str(data),
                             "--run-dir", str(tmp_path / "p")] + sets(), capsys)
    assert code == 0 and Path(json.loads(out)["image"]).is_file()


def test_eval_ground_truth_is_perfect(tmp_path, capsys):
    data = tmp_path / "ds"
    assert main(["synth", "--out", str(data), "--count", "3", "--seed", "2", "--run-dir", str(tmp_path / "s")]) == 0
    capsys.readouterr()
    code, _, _ = run_json(["eval", "--data", str(data), "--pred", str(data), "--run-dir", str(tmp_path / "e")],
                          capsys)
    assert code == 0
    rep = tmp_path / "e" / "reports"
    seg = json.loads((rep / "seg.json").read_text())["metrics"]
    assert seg["miou"] == pytest.approx(100.0) and seg["macc"] == pytest.approx(100.0)
    normal = json.loads((rep / "normal.json").read_text())["metrics"]
    # float32 storage leaves |n| = 1 +- 1e-7, i.e. a few thousandths of a degree after acos
    assert normal["mean"] == pytest.approx(0.0, abs=0.05)
    albedo = json.loads((rep / "albedo.json").read_text())["metrics"]
    assert albedo["mae"] == 0.0
    pose = json.loads((rep / "pose.json").read_text())["metrics"]
    assert pose["pck"] == pytest.approx(100.0)
    assert (rep / "summary.csv").read_text().startswith("task,metric,value")


def test_finetune_then_eval_checkpoint(tmp_path, capsys):
    run = tmp_path / "ft"
    code, out, _ = run_json(["finetune", "--task", "normal", "--run-dir", str(run)]
                            + sets("finetune.iters=2", "finetune.synthetic_count=3", "finetune.batch_size=2"),
                            capsys)
    assert code == 0
    ckpt = json.loads(out)["checkpoint"]
    data = tmp_path / "ds"
    main(["synth", "--out", str(data), "--count", "2", "--seed", "3", "--run-dir", str(tmp_path / "s")])
    capsys.readouterr()
    code, _, _ = run_json(["eval", "--data", str(data), "--checkpoint", ckpt, "--tasks", "normal",
                           "--run-dir", str(tmp_path / "e")] + sets(), capsys)
    assert code == 0
    m = json.loads((tmp_path / "e" / "reports" / "normal.json").read_text())["metrics"]
    assert np.isfinite(m["mean"])
    # a normal-head checkpoint cannot answer for segmentation
    code, _, err = run_json(["eval", "--data", str(data), "--checkpoint", ckpt, "--tasks", "seg",
                             "--run-dir", str(tmp_path / "e2")] + sets(), capsys)
    assert code == 2 and json.loads(err)["error"] == "config"


def test_probe_report(tmp_path, capsys):
    code, out, _ = run_json(["probe", "--task", "albedo", "--run-dir", str(tmp_path / "pr")]
                            + sets("probe.iters=3", "probe.train_count=3", "probe.test_count=2"), capsys)
    assert code == 0
    rep = json.loads((tmp_path / "pr" / "reports" / "probe_albedo.json").read_text())
    assert len(rep["extra"]["backbone_sha256"]) == 64 and "rng_transcript" not in rep["extra"]


@pytest.mark.parametrize("argv,code,kind", [
    (["pretrain", "--set", "optimizer.lr=abc"], 2, "config"),
    (["pretrain", "--set", "no_such.key=1"], 2, "config"),
    (["pretrain", "--config", "/nonexistent.toml"], 2, "config"),
    (["eval", "--data", "/nonexistent"], 2, "config"),
    (["synth", "--out", "x", "--count", "0"], 2, "config"),
])
def test_errors_are_json_records(tmp_path, capsys, argv, code, kind):
    got, _, err = run_json(argv + ["--run-dir", str(tmp_path / "r")], capsys)
    assert got == code
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == kind and rec["message"]


def test_resume_mismatch_exit_code(tmp_path, capsys):
    run = tmp_path / "pre"
    code, out, _ = run_json(["pretrain", "--run-dir", str(run)] + sets("schedule.total_iters=2"), capsys)
    ckpt = json.loads(out)["checkpoint"]
    code, _, err = run_json(["pretrain", "--run-dir", str(run), "--resume", ckpt]
                            + sets("schedule.total_iters=2", "optimizer.lr=0.5"), capsys)
    assert code == 3 and json.loads(err)["error"] == "input"


def test_seed_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SAPIENS_MINI_SEED", "nope")
    code, _, err = run_json(["synth", "--out", str(tmp_path / "x"), "--count", "1",
                             "--run-dir", str(tmp_path / "r")], capsys)
    assert code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sapiens_mini.cli", "synth", "--out", str(tmp_path / "d"),
                           "--count", "1", "--run-dir", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(read_dataset(tmp_path / "d")) == 1
