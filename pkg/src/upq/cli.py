"""Command-line entry points.

Subcommands: pretrain-teacher, ptq, qat, analyze, pipeline, eval-ppl.
Every run directory gets a config echo (config.json) so it can be reproduced
from the persisted config + seed alone.  UPQ_THREADS caps the accelerated
backend's worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analyze as analyze_mod
from . import corpus as corpus_mod
from .errors import ConfigurationError, UpqError
from .model import ModelConfig, ToyLM, load_model, mean_eval_jsd, perplexity
from .ptq import PtqConfig, run_ptq
from .train import REGIMES, TrainConfig, clone_model, init_student, pretrain_teacher, train_model

DEFAULT_SYNTH_BYTES = 400_000


def _apply_threads_cap() -> None:
    cap = os.environ.get("UPQ_THREADS")
    if not cap:
        return
    n = int(cap)
    if n < 1:
        raise ConfigurationError("UPQ_THREADS must be >= 1")
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return cfg


def _build(cls, overrides: dict, **extra):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(overrides) - known
    if bad:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    merged = {**overrides, **extra}
    return cls(**merged)


def _echo_config(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_splits(args, model_cfg: ModelConfig) -> dict:
    if args.corpus:
        ids = corpus_mod.load_text(args.corpus)
    else:
        ids = corpus_mod.tokenize(
            corpus_mod.synthetic_text(args.synthetic_bytes, seed=args.seed)
        )
    return corpus_mod.pack(ids, model_cfg.context_length, seed=args.seed)


def _model_config(cfg: dict, seed: int) -> ModelConfig:
    return _build(ModelConfig, cfg.get("model", {}), seed=seed)


def _train_config(cfg: dict, seed: int, regime: str) -> TrainConfig:
    overrides = dict(cfg.get("train", {}))
    if regime == "pretrain":
        # the teacher may get its own (usually larger) budget
        overrides.update(cfg.get("teacher", {}))
    return _build(TrainConfig, overrides, seed=seed, regime=regime)


def _ptq_config(cfg: dict, seed: int) -> PtqConfig:
    return _build(PtqConfig, cfg.get("ptq", {}), seed=seed)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_pretrain_teacher(args) -> int:
    cfg = load_config(args.config)
    model_cfg = _model_config(cfg, args.seed)
    train_cfg = _train_config(cfg, args.seed, "pretrain")
    splits = _load_splits(args, model_cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "pretrain-teacher", "seed": args.seed,
                            "model": model_cfg.to_dict(), "train": train_cfg.to_dict()})
    ckpt = os.path.join(args.out, "teacher.upqc")
    if args.resume and os.path.exists(ckpt):
        print(f"teacher checkpoint exists, skipping: {ckpt}")
        return 0
    model = ToyLM(model_cfg)
    run = pretrain_teacher(model, splits, train_cfg,
                           metrics_path=os.path.join(args.out, "teacher_metrics.jsonl"),
                           best_path=ckpt)
    print(f"teacher: steps={run.steps} eval_ppl={run.final_eval_ppl:.4f} -> {ckpt}")
    return 0


def cmd_ptq(args) -> int:
    cfg = load_config(args.config)
    ptq_cfg = _ptq_config(cfg, args.seed)
    model = load_model(args.teacher)
    splits = _load_splits(args, model.cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "ptq", "seed": args.seed,
                            "teacher": str(args.teacher), "ptq": ptq_cfg.to_dict()})
    ckpt = os.path.join(args.out, "int4.upqc")
    if args.resume and os.path.exists(ckpt):
        print(f"INT4 checkpoint exists, skipping: {ckpt}")
        return 0
    report = run_ptq(model, splits["calib"].sequences, ptq_cfg,
                     report_path=os.path.join(args.out, "ptq_report.jsonl"))
    from .model import save_model

    save_model(model, ckpt)
    worst = max(r["loss_final"] / max(r["loss_init"], 1e-30) for r in report)
    print(f"ptq: {len(report)} blocks, worst final/init loss ratio {worst:.4f} -> {ckpt}")
    return 0


def cmd_qat(args) -> int:
    cfg = load_config(args.config)
    train_cfg = _train_config(cfg, args.seed, args.regime)
    teacher = load_model(args.teacher)
    int4 = load_model(args.int4) if args.int4 else None
    splits = _load_splits(args, teacher.cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "qat", "seed": args.seed,
                            "regime": args.regime, "teacher": str(args.teacher),
                            "int4": str(args.int4), "train": train_cfg.to_dict()})
    student = init_student(teacher, int4, args.regime)
    ckpt = os.path.join(args.out, f"int2_{args.regime}.upqc")
    run = train_model(
        student, splits, train_cfg,
        metrics_path=os.path.join(args.out, f"metrics_{args.regime}.jsonl"),
        teacher=teacher if train_cfg.regime in ("distill-qat", "upq") else None,
        best_path=ckpt, original=teacher)
    print(f"{args.regime}: steps={run.steps} train_loss={run.final_train_loss:.6f} "
          f"eval_ppl={run.final_eval_ppl:.4f} -> {ckpt}")
    return 0


def cmd_eval_ppl(args) -> int:
    model = load_model(args.model)
    splits = _load_splits(args, model.cfg)
    ppl = perplexity(model, splits["eval"].sequences.reshape(-1),
                     model.cfg.context_length)
    print(f"eval_ppl={ppl:.6f}")
    return 0


def cmd_analyze(args) -> int:
    paths = analyze_mod.analyze_checkpoint(args.model, args.out,
                                           metrics_path=args.metrics)
    for stem, p in sorted(paths.items()):
        print(f"{stem}: {p}")
    return 0


def _outer_bin_frac(model: ToyLM) -> float:
    rows = analyze_mod.bin_utilization_table(model)
    agg = [r for r in rows if r["layer"] == "<all>"]
    if not agg:
        return 0.0
    return float(np.mean([r["frac_m3"] + r["frac_p3"] for r in agg]))


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    seeds = args.seeds or [args.seed]
    model_cfg = _model_config(cfg, seeds[0])
    splits = _load_splits(args, model_cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "pipeline", "seeds": seeds,
                            "model": model_cfg.to_dict(),
                            "train": cfg.get("train", {}), "ptq": cfg.get("ptq", {})})

    from .model import save_model

    teacher_ckpt = os.path.join(args.out, "teacher.upqc")
    if args.resume and os.path.exists(teacher_ckpt):
        teacher = load_model(teacher_ckpt)
        print(f"reusing teacher: {teacher_ckpt}")
    else:
        teacher = ToyLM(model_cfg)
        run = pretrain_teacher(
            teacher, splits, _train_config(cfg, seeds[0], "pretrain"),
            metrics_path=os.path.join(args.out, "teacher_metrics.jsonl"),
            best_path=teacher_ckpt)
        teacher = load_model(teacher_ckpt)
        print(f"teacher: eval_ppl={run.final_eval_ppl:.4f}")

    int4_ckpt = os.path.join(args.out, "int4.upqc")
    if args.resume and os.path.exists(int4_ckpt):
        int4 = load_model(int4_ckpt)
        print(f"reusing INT4 model: {int4_ckpt}")
    else:
        int4 = clone_model(teacher)
        run_ptq(int4, splits["calib"].sequences, _ptq_config(cfg, seeds[0]),
                report_path=os.path.join(args.out, "ptq_report.jsonl"))
        save_model(int4, int4_ckpt)
        print(f"ptq: -> {int4_ckpt}")

    rows, failures = [], []
    for seed in seeds:
        for regime in REGIMES:
            tag = f"{regime}_seed{seed}"
            try:
                student = init_student(teacher, int4, regime)
                train_cfg = _train_config(cfg, seed, regime)
                ckpt = os.path.join(args.out, f"int2_{tag}.upqc")
                run = train_model(
                    student, splits, train_cfg,
                    metrics_path=os.path.join(args.out, f"metrics_{tag}.jsonl"),
                    teacher=teacher if regime in ("distill-qat", "upq") else None,
                    best_path=ckpt, original=teacher)
                best = load_model(ckpt)
                jsd = run.final_eval_jsd
                if jsd is None:
                    jsd = mean_eval_jsd(teacher, best, splits["eval"].sequences,
                                        beta=train_cfg.beta)
                rows.append({"regime": regime, "seed": seed,
                             "train_loss": run.final_train_loss,
                             "eval_ppl": run.best_eval_ppl, "eval_jsd": jsd,
                             "outer_bin_frac": _outer_bin_frac(best)})
                print(f"{tag}: train_loss={run.final_train_loss:.6f} "
                      f"eval_ppl={run.best_eval_ppl:.4f} jsd={jsd:.6f}")
            except UpqError as e:
                failures.append((tag, str(e)))
                print(f"{tag}: FAILED ({e})", file=sys.stderr)

    analyze_mod.write_csv(os.path.join(args.out, "comparison.csv"),
                          "regime-comparison", rows)
    print(f"comparison table: {os.path.join(args.out, 'comparison.csv')}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p, corpus=True):
    p.add_argument("--config", default=None, help="JSON config overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", action="store_true",
                   help="reuse cached checkpoints when present")
    if corpus:
        p.add_argument("--corpus", default=None,
                       help="text file, directory, or glob (default: synthetic)")
        p.add_argument("--synthetic-bytes", type=int, default=DEFAULT_SYNTH_BYTES,
                       help="size of the synthetic corpus when --corpus is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upq",
        description="Progressive INT4 -> INT2 quantization experiments on a toy LM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-teacher", help="train the FP teacher")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("ptq", help="block-wise INT4 post-training quantization")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="FP teacher checkpoint")
    p.set_defaults(func=cmd_ptq)

    p = sub.add_parser("qat", help="INT2 quantization-aware training")
    _add_common(p)
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--teacher", required=True, help="FP teacher checkpoint")
    p.add_argument("--int4", default=None, help="INT4 checkpoint (ptq-ntp/upq)")
    p.set_defaults(func=cmd_qat)

    p = sub.add_parser("eval-ppl", help="held-out perplexity of a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("analyze", help="emit CSV diagnostics for a checkpoint")
    _add_common(p, corpus=False)
    p.add_argument("--model", required=True)
    p.add_argument("--metrics", default=None, help="metrics JSONL for L1 curves")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pipeline", help="teacher + PTQ + all four INT2 regimes")
    _add_common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    _apply_threads_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UpqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
