"""CLI subcommands driven through main(argv): artifacts, determinism, resume."""

import json
import os

import pytest

from upq.cli import main

CFG = {
    "model": {"dim": 32, "n_layers": 2, "n_heads": 2, "context_length": 32,
              "mlp_mult": 2},
    "train": {"total_tokens": 6_000, "batch_sequences": 8, "eval_every": 10,
              "log_every": 5, "eval_sequences": 4},
    "ptq": {"calib_tokens": 1024, "steps_per_block": 5, "batch_sequences": 4},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(CFG))
    return str(p)


def _common(cfg_path, out):
    return ["--config", cfg_path, "--out", str(out), "--synthetic-bytes", "50000"]


def test_pretrain_teacher_writes_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pretrain-teacher", *_common(cfg_path, out)]) == 0
    assert (out / "teacher.upqc").exists()
    assert (out / "teacher_metrics.jsonl").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["command"] == "pretrain-teacher"
    assert "teacher" in capsys.readouterr().out


def test_pretrain_deterministic_and_resume(cfg_path, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["pretrain-teacher", *_common(cfg_path, a), "--seed", "1"])
    main(["pretrain-teacher", *_common(cfg_path, b), "--seed", "1"])
    assert (a / "teacher.upqc").read_bytes() == (b / "teacher.upqc").read_bytes()
    assert (a / "teacher_metrics.jsonl").read_bytes() == (
        b / "teacher_metrics.jsonl"
    ).read_bytes()
    before = (a / "teacher.upqc").stat().st_mtime_ns
    main(["pretrain-teacher", *_common(cfg_path, a), "--seed", "1", "--resume"])
    assert (a / "teacher.upqc").stat().st_mtime_ns == before  # cache hit


def test_full_cli_chain(cfg_path, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain-teacher", *_common(cfg_path, run)]) == 0
    assert main(["ptq", *_common(cfg_path, run),
                 "--teacher", str(run / "teacher.upqc")]) == 0
    assert (run / "int4.upqc").exists()
    report = [json.loads(l) for l in (run / "ptq_report.jsonl").read_text().splitlines()]
    assert report[0]["kind"] == "ptq-report"
    assert len(report) == 1 + CFG["model"]["n_layers"]

    assert main(["qat", *_common(cfg_path, run), "--regime", "upq",
                 "--teacher", str(run / "teacher.upqc"),
                 "--int4", str(run / "int4.upqc")]) == 0
    assert (run / "int2_upq.upqc").exists()

    assert main(["eval-ppl", *_common(cfg_path, run),
                 "--model", str(run / "int2_upq.upqc")]) == 0
    assert "eval_ppl=" in capsys.readouterr().out

    diag = tmp_path / "diag"
    assert main(["analyze", "--model", str(run / "int2_upq.upqc"),
                 "--metrics", str(run / "metrics_upq.jsonl"),
                 "--out", str(diag)]) == 0
    assert (diag / "bin_utilization.csv").exists()
    assert (diag / "l1_dynamics.csv").exists()


def test_qat_int4_regime_requires_int4(cfg_path, tmp_path, capsys):
    run = tmp_path / "run"
    main(["pretrain-teacher", *_common(cfg_path, run)])
    rc = main(["qat", *_common(cfg_path, run), "--regime", "upq",
               "--teacher", str(run / "teacher.upqc")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_pipeline_comparison_table(cfg_path, tmp_path, capsys):
    from upq.analyze import read_csv_checked

    run = tmp_path / "pipe"
    assert main(["pipeline", *_common(cfg_path, run), "--seeds", "0"]) == 0
    rows = read_csv_checked(run / "comparison.csv", "regime-comparison")
    assert sorted(r["regime"] for r in rows) == sorted(
        ["ntp-qat", "distill-qat", "ptq-ntp", "upq"]
    )
    # resume reuses the cached teacher and INT4 checkpoints
    t_mtime = (run / "teacher.upqc").stat().st_mtime_ns
    q_mtime = (run / "int4.upqc").stat().st_mtime_ns
    assert main(["pipeline", *_common(cfg_path, run), "--seeds", "0",
                 "--resume"]) == 0
    assert (run / "teacher.upqc").stat().st_mtime_ns == t_mtime
    assert (run / "int4.upqc").stat().st_mtime_ns == q_mtime


def test_unknown_config_key_rejected(tmp_path, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    rc = main(["pretrain-teacher", "--config", str(p), "--out",
               str(tmp_path / "x"), "--synthetic-bytes", "50000"])
    assert rc == 2
