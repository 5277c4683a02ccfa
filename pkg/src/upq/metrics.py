"""Step-level metrics records: JSONL with a published schema."""

from __future__ import annotations

import json

import jsonschema
import numpy as np

from .errors import FormatError

_GROUP_FRACTIONS = {
    "type": "object",
    "additionalProperties": {
        "type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4,
    },
}
_GROUP_SCALARS = {"type": "object", "additionalProperties": {"type": "number"}}

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["step", "tokens", "lr", "train_loss"],
    "properties": {
        "step": {"type": "integer", "minimum": 0},
        "tokens": {"type": "integer", "minimum": 0},
        "lr": {"type": "number"},
        "train_loss": {"type": "number"},
        "eval_ppl": {"type": ["number", "null"]},
        "eval_jsd": {"type": ["number", "null"]},
        "bin_util": _GROUP_FRACTIONS,
        "l1_scale": _GROUP_SCALARS,
        "l1_weight": _GROUP_SCALARS,
    },
    "additionalProperties": False,
}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


class MetricsWriter:
    """Validating JSONL writer; one record per call, steps strictly increasing."""

    def __init__(self, path):
        self.path = path
        self._last_step = -1
        self._f = open(path, "w")

    def write(self, record: dict) -> None:
        record = _jsonable(record)
        jsonschema.validate(record, METRICS_SCHEMA)
        for key in ("train_loss", "lr"):
            if not np.isfinite(record[key]):
                raise FormatError(f"non-finite {key} in metrics record")
        if record["step"] <= self._last_step:
            raise FormatError(
                f"metrics steps must increase: {record['step']} after {self._last_step}"
            )
        self._last_step = record["step"]
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    rows = []
    last = -1
    with open(path) as f:
        for i, line in enumerate(f):
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"bad JSONL at line {i + 1}: {e}") from e
            jsonschema.validate(row, METRICS_SCHEMA)
            if row["step"] <= last:
                raise FormatError(f"non-increasing step at line {i + 1}")
            last = row["step"]
            rows.append(row)
    return rows
