"""Plot-ready CSV diagnostics: bin-utilization tables, per-layer quantization
error norms, normalized-L1 training dynamics, and weight histograms annotated
with the four INT2 reconstruction levels."""

from __future__ import annotations

import csv

import numpy as np

from . import kernels, quant
from .errors import ConfigurationError, FormatError
from .metrics import read_metrics
from .model import LAYER_GROUPS, ToyLM, load_model
from .train import group_layers

INT2_LEVEL_MULTIPLIERS = (-0.75, -0.25, 0.25, 0.75)  # x row scale

# Column contracts for each CSV kind: name -> "int" | "float" | "str".
CSV_SCHEMAS = {
    "bin-utilization": {
        "layer": "str", "group": "str",
        "frac_m3": "float", "frac_m1": "float", "frac_p1": "float", "frac_p3": "float",
    },
    "error-norms": {"layer": "str", "group": "str", "scheme": "str", "fro_error": "float"},
    "l1-dynamics": {
        "step": "int", "group": "str", "l1_scale": "float", "l1_weight": "float",
    },
    "weight-histogram": {
        "layer": "str", "bin_left": "float", "bin_right": "float", "count": "int",
    },
    "int2-levels": {"layer": "str", "level_index": "int", "level_value": "float"},
    "regime-comparison": {
        "regime": "str", "seed": "int", "train_loss": "float", "eval_ppl": "float",
        "eval_jsd": "float", "outer_bin_frac": "float",
    },
}


def write_csv(path, kind: str, rows: list[dict]) -> None:
    fields = list(CSV_SCHEMAS[kind])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fields})


def read_csv_checked(path, kind: str) -> list[dict]:
    """Read a diagnostics CSV and coerce/validate it against its column contract."""
    fields = CSV_SCHEMAS[kind]
    casts = {"int": int, "float": float, "str": str}
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(fields):
            raise FormatError(
                f"{path}: columns {reader.fieldnames} != expected {list(fields)}"
            )
        for i, row in enumerate(reader):
            try:
                rows.append({k: casts[t](row[k]) for k, t in fields.items()})
            except (TypeError, ValueError) as e:
                raise FormatError(f"{path}: bad value in row {i + 1}: {e}") from e
    return rows


def _group_of(layer_name: str) -> str:
    kind = layer_name.rsplit(".", 1)[1]
    for g, kinds in LAYER_GROUPS.items():
        if kind in kinds:
            return g
    raise ConfigurationError(f"layer {layer_name!r} belongs to no diagnostic group")


def _int2_dequant(lin) -> tuple[np.ndarray, np.ndarray] | None:
    if "seq_delta" not in lin.params:
        return None
    d = lin.params["seq_delta"].data[:, 0]
    wq = kernels.seq_forward(lin.weight.data, d, quant.SeqConfig().epsilon)
    return wq, d


def bin_utilization_table(model: ToyLM) -> list[dict]:
    """Per-layer INT2 level-usage fractions, plus one aggregate row per group."""
    rows = []
    totals = {g: np.zeros(4, dtype=np.int64) for g in LAYER_GROUPS}
    for name, lin in model.projection_layers().items():
        deq = _int2_dequant(lin)
        if deq is None:
            continue
        wq, d = deq
        counts, _ = kernels.bin_count_int2(wq, d)
        g = _group_of(name)
        totals[g] += counts
        frac = counts / counts.sum()
        rows.append({"layer": name, "group": g,
                     "frac_m3": frac[0], "frac_m1": frac[1],
                     "frac_p1": frac[2], "frac_p3": frac[3]})
    for g, counts in totals.items():
        if counts.sum():
            frac = counts / counts.sum()
            rows.append({"layer": "<all>", "group": g,
                         "frac_m3": frac[0], "frac_m1": frac[1],
                         "frac_p1": frac[2], "frac_p3": frac[3]})
    return rows


def error_norm_table(model: ToyLM) -> list[dict]:
    """Frobenius distance between each layer's latent weight and its quantized
    reconstruction under the layer's current scheme."""
    rows = []
    for name, lin in model.projection_layers().items():
        if lin.scheme == "fp":
            err = 0.0
        else:
            wq = lin.effective_weight().data
            err = quant.quant_error_norm(lin.weight.data, wq)
        rows.append({"layer": name, "group": _group_of(name),
                     "scheme": lin.scheme, "fro_error": err})
    return rows


def l1_dynamics_table(metrics_path) -> list[dict]:
    """Flatten the logged per-group normalized-L1 series into long-form rows."""
    rows = []
    for rec in read_metrics(metrics_path):
        scales = rec.get("l1_scale") or {}
        weights = rec.get("l1_weight") or {}
        for g in sorted(set(scales) | set(weights)):
            rows.append({"step": rec["step"], "group": g,
                         "l1_scale": scales.get(g, 0.0),
                         "l1_weight": weights.get(g, 0.0)})
    if not rows:
        raise ConfigurationError(f"{metrics_path}: no normalized-L1 records")
    return rows


def weight_histogram_tables(model: ToyLM, bins: int = 64
                            ) -> tuple[list[dict], list[dict]]:
    """Per-layer latent-weight histograms plus the four INT2 reconstruction
    levels (at the layer-mean row scale) to overlay as vertical lines."""
    hist_rows, level_rows = [], []
    for name, lin in model.projection_layers().items():
        w = lin.weight.data.ravel()
        counts, edges = np.histogram(w, bins=bins)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            hist_rows.append({"layer": name, "bin_left": float(lo),
                              "bin_right": float(hi), "count": int(c)})
        deq = _int2_dequant(lin)
        if deq is not None:
            mean_delta = float(deq[1].mean())
            for i, m in enumerate(INT2_LEVEL_MULTIPLIERS):
                level_rows.append({"layer": name, "level_index": i,
                                   "level_value": m * mean_delta})
    return hist_rows, level_rows


def checkpoint_l1_table(path_a, path_b) -> list[dict]:
    """Per-group normalized L1 between two checkpoints of the same shape
    (identical checkpoints give all zeros)."""
    a, b = load_model(path_a), load_model(path_b)
    la, lb = a.projection_layers(), b.projection_layers()
    if la.keys() != lb.keys():
        raise ConfigurationError("checkpoints have different layer sets")
    rows = []
    for g, names in group_layers(a).items():
        norm = float(np.mean([np.abs(la[n].weight.data).mean() for n in names]))
        dw = float(np.mean([
            np.abs(la[n].weight.data - lb[n].weight.data).mean() for n in names
        ]))
        ds_terms = [
            np.abs(la[n].params["seq_delta"].data - lb[n].params["seq_delta"].data).mean()
            for n in names
            if "seq_delta" in la[n].params and "seq_delta" in lb[n].params
        ]
        ds = float(np.mean(ds_terms)) if ds_terms else 0.0
        rows.append({"step": 0, "group": g, "l1_scale": ds / norm,
                     "l1_weight": dw / norm})
    return rows


def analyze_checkpoint(model_path, out_dir, metrics_path=None) -> dict:
    """Emit the full diagnostics bundle for one checkpoint; returns the paths."""
    import os

    model = load_model(model_path)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def emit(stem, kind, rows):
        p = os.path.join(out_dir, stem + ".csv")
        write_csv(p, kind, rows)
        paths[stem] = p

    emit("bin_utilization", "bin-utilization", bin_utilization_table(model))
    emit("error_norms", "error-norms", error_norm_table(model))
    hist, levels = weight_histogram_tables(model)
    emit("weight_histogram", "weight-histogram", hist)
    if levels:
        emit("int2_levels", "int2-levels", levels)
    if metrics_path is not None:
        emit("l1_dynamics", "l1-dynamics", l1_dynamics_table(metrics_path))
    return paths
