from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from imed.cli import EXIT_CONFIG, EXIT_EXISTS, EXIT_FAILED, EXIT_OK, main

GOLDEN = Path(__file__).parent / "golden"

SMOKE = {
    "epoch_c": 1,
    "epoch_t": 1,
    "epoch_s": 1,
    "iters": 6,
    "disc_hidden": 32,
    "projection_dim": 64,
    "endogeny_hidden": 16,
    "dataset": {"kind": "moons", "shift": 30.0, "n": 120, "seed": 0},
}


@pytest.fixture
def smoke_config(tmp_path) -> Path:
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(SMOKE))
    return path


def _run(*args, env=None) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "imed.cli", *map(str, args)],
        capture_output=True,
        text=True,
        env={**os.environ, **(env or {})},
    )


def _records(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines()]


def _header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_gen_data_and_refusal(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--kind", "blobs", "--n", "50", "--seed", "4", "--out", str(out)]) == EXIT_OK
    meta = json.loads((out / "meta.json").read_text())
    assert meta["generator"] == "blobs" and meta["seed"] == 4 and meta["shift"] == 1.5
    before = (out / "source.csv").read_bytes()
    assert main(["gen-data", "--kind", "moons", "--out", str(out)]) == EXIT_EXISTS
    assert (out / "source.csv").read_bytes() == before
    # global flags may also precede the command
    assert main(["--out", str(out), "--force", "--seed", "4", "gen-data", "--kind", "blobs", "--n", "50"]) == EXIT_OK
    assert (out / "source.csv").read_bytes() == before


def test_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"l0": -1.0}))
    assert main(["train-teacher", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "l0" in err
    assert not (tmp_path / "o").exists()


def test_train_eval_distill_pipeline(tmp_path, smoke_config):
    comp_dir, teach_dir, stu_dir = tmp_path / "c", tmp_path / "t", tmp_path / "s"
    assert main(["train-component", "--config", str(smoke_config), "--out", str(comp_dir)]) == EXIT_OK
    assert (comp_dir / "components.ckpt").exists()
    args = ["train-teacher", "--config", str(smoke_config), "--out", str(teach_dir)]
    assert main([*args, "--components", str(comp_dir / "components.ckpt")]) == EXIT_OK
    final = {r["model"]: r for r in _records(teach_dir / "metrics.jsonl") if r["phase"] == "final"}

    # eval reproduces the logged teacher accuracy exactly
    res = _run("eval", "--checkpoint", teach_dir / "teacher.ckpt")
    assert res.returncode == 0, res.stderr
    rec = json.loads(res.stdout.splitlines()[0])
    assert rec["model"] == "teacher"
    assert rec["target_acc"] == final["teacher"]["target_acc"]
    assert rec["source_acc"] == final["teacher"]["source_acc"]

    assert main(["distill", "--teacher", str(teach_dir / "teacher.ckpt"), "--out", str(stu_dir)]) == EXIT_OK
    params = json.loads((stu_dir / "params.json").read_text())
    assert params["student"] == params["component0"]
    res = _run("eval", "--checkpoint", stu_dir / "student.ckpt", "--out", tmp_path / "e")
    assert res.returncode == 0, res.stderr
    stu = json.loads((tmp_path / "e" / "eval.json").read_text())[0]
    logged = [r for r in _records(stu_dir / "metrics.jsonl") if r["model"] == "student" and r["phase"] == "final"]
    assert stu["target_acc"] == logged[0]["target_acc"]


def test_untrained_teacher_is_chance_level(tmp_path):
    cfg = {**SMOKE, "epoch_c": 0, "epoch_t": 0, "dataset": {"kind": "blobs", "n": 400, "seed": 1}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["train-teacher", "--config", str(path), "--out", str(tmp_path / "t")]) == EXIT_OK
    res = _run("eval", "--checkpoint", tmp_path / "t" / "teacher.ckpt")
    acc = json.loads(res.stdout)["target_acc"]
    # four balanced classes; a random network lands near 1/4, far from trained accuracy
    assert acc < 0.5


def test_ablate_h_rows_and_golden_header(tmp_path):
    # one fusion layer of width 2*512 -> 512: h=16 and h=32 satisfy h**2 | d_in, h=128 cannot
    cfg = {**SMOKE, "feature_dim": 512, "fusion_depth": 1}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "abl"
    code = main(["ablate", "--config", str(path), "--axis", "h", "--values", "16,32,128", "--out", str(out)])
    assert code == EXIT_FAILED
    assert _header(out / "ablation.csv") == _header(GOLDEN / "ablation_columns.csv")
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["16", "32", "128"]
    assert [r["status"] for r in rows] == ["ok", "ok", "failed"]
    assert "groups**2=16384" in rows[2]["error"]
    assert int(rows[0]["teacher_params"]) > int(rows[1]["teacher_params"])
    assert (out / "accuracy_h.png").stat().st_size > 0
    assert (out / "h=16" / "metrics.jsonl").exists()


def test_ablate_plan_file_and_distill_axis(tmp_path, smoke_config):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"base_config": smoke_config.name, "axis": "distill", "values": ["on", "off"]}))
    out = tmp_path / "abl"
    assert main(["ablate", "--plan", str(plan), "--in-process", "--out", str(out)]) == EXIT_OK
    with open(out / "ablation.csv", newline="") as fh:
        on, off = list(csv.DictReader(fh))
    assert on["model"] == "student" and off["model"] == "teacher"
    assert int(on["params"]) == int(on["component_params"])
    assert int(off["params"]) == int(off["teacher_params"]) > 2 * int(off["component_params"])


def test_report_golden_columns(tmp_path, smoke_config):
    runs = []
    for seed in (0, 1):
        out = tmp_path / f"run{seed}"
        assert main(["train-teacher", "--config", str(smoke_config), "--seed", str(seed), "--out", str(out)]) == EXIT_OK
        runs.append(str(out))
    assert main(["report", *runs, "--out", str(tmp_path / "rep")]) == EXIT_OK
    path = tmp_path / "rep" / "summary.csv"
    assert _header(path) == _header(GOLDEN / "summary_columns.csv")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["model"] for r in rows} == {"component0", "component1", "teacher"}
    assert len(rows) == 6


def test_report_missing_run(tmp_path):
    assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "rep")]) == EXIT_CONFIG


def test_log_level_env(tmp_path):
    out = tmp_path / "d"
    res = _run("gen-data", "--n", "20", "--out", out, env={"IMED_LOG_LEVEL": "debug"})
    assert res.returncode == 0 and "wrote moons bundle" in res.stderr
    res = _run("gen-data", "--n", "20", "--out", out, "--force", env={"IMED_LOG_LEVEL": "warn"})
    assert res.returncode == 0 and "wrote" not in res.stderr
    res = _run("gen-data", "--n", "20", "--out", out, "--force", env={"IMED_LOG_LEVEL": "loud"})
    assert res.returncode == EXIT_CONFIG and "IMED_LOG_LEVEL" in res.stderr
