"""Teacher pretraining and the four INT2 QAT regimes.

Regimes:

* ``ntp-qat``      FP teacher weights -> INT2, next-token loss
* ``distill-qat``  FP teacher weights -> INT2, teacher-student generalized JSD
* ``ptq-ntp``      INT4 PTQ weights -> INT2, next-token loss
* ``upq``          INT4 PTQ weights -> INT2, generalized JSD (the progressive
                   pipeline: the INT4 latents are trained as continuous values)

During QAT the straight-through estimator carries gradients to the latent
weights and the INT2 scales; embeddings, norms and the head train with plain
gradients.  Scales are floored at a tiny positive value after each step to
keep the per-channel positivity invariant.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import kernels, quant
from .errors import ConfigurationError, OptimizationError
from .losses import JsdConfig, LogitsBatch, generalized_jsd, ntp_loss
from .metrics import MetricsWriter
from .model import LAYER_GROUPS, ToyLM, mean_eval_jsd, perplexity, quantize_model, save_model
from .optim import Adam, cosine_lr

REGIMES = ("ntp-qat", "distill-qat", "ptq-ntp", "upq")
SCALE_FLOOR = 1e-6


@dataclass
class TrainConfig:
    regime: str = "distill-qat"
    total_tokens: int = 2_000_000
    batch_sequences: int = 16
    peak_lr: float = 2e-4
    warmup_steps: int = 20
    lr_floor_frac: float = 0.1
    beta: float = 0.5
    ntp_mix: float = 0.0          # lambda for the JSD + NTP mixed objective
    scale_lr_mult: float = 1.0    # lr multiplier for quantizer scales (LSQ-style)
    eval_every: int = 100
    log_every: int = 10
    eval_sequences: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES and self.regime != "pretrain":
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.total_tokens < 1 or self.batch_sequences < 1:
            raise ConfigurationError("token budget and batch size must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "regime", "total_tokens", "batch_sequences", "peak_lr", "warmup_steps",
            "lr_floor_frac", "beta", "ntp_mix", "scale_lr_mult", "eval_every",
            "log_every", "eval_sequences", "seed")}


@dataclass
class TrainRun:
    """Outcome of one training run."""

    config: TrainConfig
    steps: int
    final_train_loss: float
    best_eval_ppl: float
    final_eval_ppl: float
    final_eval_jsd: float | None = None
    initial_train_loss: float = np.nan
    aborted: bool = False
    extra: dict = field(default_factory=dict)


def clone_model(model: ToyLM) -> ToyLM:
    return copy.deepcopy(model)


def init_student(teacher: ToyLM, int4_model: ToyLM | None, regime: str) -> ToyLM:
    """Build the INT2 student for a regime from the right source checkpoint."""
    if regime in ("ntp-qat", "distill-qat"):
        student = clone_model(teacher)
        quantize_model(student, "int2-seq", source="fp")
    elif regime in ("ptq-ntp", "upq"):
        if int4_model is None:
            raise ConfigurationError(f"regime {regime!r} needs an INT4 PTQ checkpoint")
        student = clone_model(int4_model)
        quantize_model(student, "int4->int2-seq", source="int4")
    else:
        raise ConfigurationError(f"unknown regime {regime!r}")
    return student


# ---------------------------------------------------------------------------
# Diagnostics helpers


def group_layers(model: ToyLM) -> dict[str, list[str]]:
    out = {g: [] for g in LAYER_GROUPS}
    for name in model.projection_layers():
        kind = name.rsplit(".", 1)[1]
        for g, kinds in LAYER_GROUPS.items():
            if kind in kinds:
                out[g].append(name)
    return out


def bin_util_by_group(model: ToyLM) -> dict[str, np.ndarray]:
    """INT2 level-usage fractions aggregated per diagnostic layer group."""
    groups = group_layers(model)
    out = {}
    for g, names in groups.items():
        counts = np.zeros(4, dtype=np.int64)
        for name in names:
            lin = model.projection_layers()[name]
            if lin.scheme not in ("int2-seq", "int4->int2-seq"):
                continue
            d = lin.params["seq_delta"].data[:, 0]
            wq = kernels.seq_forward(lin.weight.data, d, quant.SeqConfig().epsilon)
            c, _ = kernels.bin_count_int2(wq, d)
            counts += c
        if counts.sum():
            out[g] = counts / counts.sum()
    return out


def snapshot_qat_state(model: ToyLM) -> dict[str, dict[str, np.ndarray]]:
    """theta_0 for the normalized-L1 dynamics: latent weights and INT2 scales."""
    weights, scales = {}, {}
    for name, lin in model.projection_layers().items():
        weights[name] = lin.weight.data.copy()
        if "seq_delta" in lin.params:
            scales[name] = lin.params["seq_delta"].data.copy()
    return {"weights": weights, "scales": scales}


def original_weight_norms(original: ToyLM) -> dict[str, float]:
    """mean|W_original| per layer group, the L1 normalizer."""
    groups = group_layers(original)
    layers = original.projection_layers()
    return {
        g: float(np.mean([np.abs(layers[n].weight.data).mean() for n in names]))
        for g, names in groups.items()
    }


def l1_dynamics(model: ToyLM, theta0: dict, norms: dict[str, float]
                ) -> tuple[dict[str, float], dict[str, float]]:
    groups = group_layers(model)
    layers = model.projection_layers()
    l1_w, l1_s = {}, {}
    for g, names in groups.items():
        dw = [np.abs(layers[n].weight.data - theta0["weights"][n]).mean() for n in names]
        l1_w[g] = float(np.mean(dw) / norms[g])
        ds = [
            np.abs(layers[n].params["seq_delta"].data - theta0["scales"][n]).mean()
            for n in names if n in theta0["scales"]
        ]
        if ds:
            l1_s[g] = float(np.mean(ds) / norms[g])
    return l1_s, l1_w


def _floor_scales(model: ToyLM) -> None:
    for lin in model.projection_layers().values():
        d = lin.params.get("seq_delta")
        if d is not None:
            np.maximum(d.data, SCALE_FLOOR, out=d.data)


# ---------------------------------------------------------------------------
# Training loops


def _eval_model(model: ToyLM, splits, cfg: TrainConfig, teacher: ToyLM | None):
    eval_seqs = splits["eval"].sequences[: cfg.eval_sequences]
    ppl = perplexity(model, eval_seqs.reshape(-1), model.cfg.context_length)
    jsd = None
    if teacher is not None:
        jsd = mean_eval_jsd(teacher, model, eval_seqs, beta=cfg.beta)
    return ppl, jsd


def train_model(
    model: ToyLM,
    splits: dict[str, corpus_mod.PackedDataset],
    cfg: TrainConfig,
    metrics_path=None,
    teacher: ToyLM | None = None,
    best_path=None,
    original: ToyLM | None = None,
) -> TrainRun:
    """The shared step loop.

    teacher=None trains with the next-token loss only (teacher pretraining or
    the NTP regimes); otherwise the regime decides the objective.  When
    best_path is set, the best-eval checkpoint is written there (and the
    last-good one on divergence)."""
    distill = cfg.regime in ("distill-qat", "upq")
    if distill and teacher is None:
        raise ConfigurationError(f"regime {cfg.regime!r} requires a teacher")
    track_quant = cfg.regime in REGIMES
    theta0 = snapshot_qat_state(model) if track_quant else None
    norms = original_weight_norms(original or teacher or model) if track_quant else None

    if track_quant:
        # QAT optimizes the quantized projection weights and their scales
        # only; embeddings, norms and the head stay at their teacher values.
        named = {}
        for lname, lin in model.projection_layers().items():
            named[f"{lname}.weight"] = lin.weight
            for pname, p in lin.params.items():
                named[f"{lname}.{pname}"] = p
    else:
        named = model.named_parameters()
    params = list(named.values())
    # Saturated weights get no weight gradient; only a fast-moving scale can
    # pull them back into the trainable zone, hence the separate scale lr.
    lr_scales = [cfg.scale_lr_mult if name.endswith(".seq_delta") else 1.0
                 for name in named]
    opt = Adam(params, lr=cfg.peak_lr, lr_scales=lr_scales)
    total_steps = max(1, cfg.total_tokens // (cfg.batch_sequences * model.cfg.context_length))
    writer = MetricsWriter(metrics_path) if metrics_path else None

    step = 0
    tokens_seen = 0
    epoch = 0
    best_ppl = np.inf
    initial_loss = np.nan
    last_loss = np.nan
    run = None
    try:
        while step < total_steps:
            for batch in corpus_mod.batches(
                splits["train"], cfg.batch_sequences, seed=cfg.seed * 100003 + epoch
            ):
                if step >= total_steps:
                    break
                lr = cosine_lr(step, total_steps, cfg.peak_lr, cfg.warmup_steps,
                               cfg.lr_floor_frac)
                opt.lr = lr
                inputs, targets = batch[:, :-1], batch[:, 1:]
                logits = model.forward(inputs)
                if distill:
                    with ad.no_grad():
                        t_logits = teacher.forward(inputs).data
                    loss = generalized_jsd(
                        LogitsBatch(t_logits, logits), JsdConfig(beta=cfg.beta)
                    )
                    if cfg.ntp_mix:
                        loss = ad.add(loss, ad.scale(ntp_loss(logits, targets), cfg.ntp_mix))
                else:
                    loss = ntp_loss(logits, targets)
                val = float(loss.item())
                if step == 0:
                    initial_loss = val
                    if writer is not None:
                        record0 = {"step": 0, "tokens": 0, "lr": lr,
                                   "train_loss": val}
                        if track_quant:
                            record0["bin_util"] = bin_util_by_group(model)
                            l1s0, l1w0 = l1_dynamics(model, theta0, norms)
                            record0["l1_scale"] = l1s0
                            record0["l1_weight"] = l1w0
                        writer.write(record0)
                if not np.isfinite(val):
                    if best_path is not None and np.isfinite(best_ppl):
                        pass  # best checkpoint already on disk
                    raise OptimizationError(
                        f"non-finite training loss {val} at step {step}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                if track_quant:
                    _floor_scales(model)
                last_loss = val
                step += 1
                tokens_seen += int(batch.size)

                do_eval = step % cfg.eval_every == 0 or step == total_steps
                do_log = step % cfg.log_every == 0 or step == total_steps
                record = None
                if do_log:
                    record = {"step": step, "tokens": tokens_seen, "lr": lr,
                              "train_loss": val}
                    if track_quant:
                        record["bin_util"] = bin_util_by_group(model)
                        l1s, l1w = l1_dynamics(model, theta0, norms)
                        record["l1_scale"] = l1s
                        record["l1_weight"] = l1w
                if do_eval:
                    ppl, jsd = _eval_model(model, splits, cfg, teacher)
                    if record is not None:
                        record["eval_ppl"] = ppl
                        record["eval_jsd"] = jsd
                    if ppl < best_ppl:
                        best_ppl = ppl
                        if best_path is not None:
                            save_model(model, best_path)
                if record is not None and writer is not None:
                    writer.write(record)
            epoch += 1

        final_ppl, final_jsd = _eval_model(model, splits, cfg, teacher)
        if final_ppl < best_ppl:
            best_ppl = final_ppl
            if best_path is not None:
                save_model(model, best_path)
        run = TrainRun(cfg, step, last_loss, best_ppl, final_ppl, final_jsd,
                       initial_train_loss=initial_loss)
        return run
    finally:
        if writer is not None:
            writer.close()


def pretrain_teacher(model: ToyLM, splits, cfg: TrainConfig, metrics_path=None,
                     best_path=None) -> TrainRun:
    if cfg.regime != "pretrain":
        cfg = dataclasses.replace(cfg, regime="pretrain")
    return train_model(model, splits, cfg, metrics_path, teacher=None, best_path=best_path)
