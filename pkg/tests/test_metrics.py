"""Metrics JSONL: schema validation, monotone steps, finiteness."""

import json

import numpy as np
import pytest

from upq.errors import FormatError
from upq.metrics import METRICS_SCHEMA, MetricsWriter, read_metrics


def _record(step=1, **extra):
    rec = {"step": step, "tokens": step * 128, "lr": 1e-4, "train_loss": 0.5}
    rec.update(extra)
    return rec


def test_write_read_roundtrip(tmp_path):
    p = tmp_path / "m.jsonl"
    with MetricsWriter(p) as w:
        w.write(_record(1))
        w.write(_record(2, eval_ppl=12.5, eval_jsd=None,
                        bin_util={"vod": np.array([0.1, 0.4, 0.4, 0.1])},
                        l1_scale={"vod": 0.01}, l1_weight={"vod": 0.02}))
    rows = read_metrics(p)
    assert [r["step"] for r in rows] == [1, 2]
    assert rows[1]["bin_util"]["vod"] == [0.1, 0.4, 0.4, 0.1]


def test_non_monotone_step_rejected(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        w.write(_record(3))
        with pytest.raises(FormatError, match="increase"):
            w.write(_record(3))


def test_nonfinite_loss_rejected(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        with pytest.raises(FormatError):
            w.write(_record(1, train_loss=float("nan")))


def test_unknown_field_rejected(tmp_path):
    import jsonschema

    with MetricsWriter(tmp_path / "m.jsonl") as w:
        with pytest.raises(jsonschema.ValidationError):
            w.write(_record(1, surprise=1.0))


def test_read_rejects_corrupt_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(_record(1)) + "\nnot json\n")
    with pytest.raises(FormatError, match="line 2"):
        read_metrics(p)


def test_read_rejects_non_monotone_file(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(_record(2)) + "\n" + json.dumps(_record(1)) + "\n")
    with pytest.raises(FormatError):
        read_metrics(p)


def test_schema_requires_core_fields():
    assert set(METRICS_SCHEMA["required"]) == {"step", "tokens", "lr", "train_loss"}
