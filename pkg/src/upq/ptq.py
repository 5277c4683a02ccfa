"""INT4 block-wise post-training quantization.

Calibration activations are captured with sequential propagation: block k sees
inputs that already passed through the quantized blocks 1..k-1.  Each block's
learnable rounding/clipping parameters are then tuned to minimize the squared
Frobenius distance between the full-precision block output and the quantized
block output on those activations; the best-seen parameters are kept, so the
final loss never exceeds the initial one.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quant
from .errors import ConfigurationError, ContractViolation, OptimizationError
from .model import Block, ToyLM, quantize_model
from .optim import Adam

PTQ_METHODS = ("flexround", "omniquant")


@dataclass
class PtqConfig:
    method: str = "flexround"
    calib_tokens: int = 2**17
    steps_per_block: int = 100
    lr: float = 1e-3
    batch_sequences: int = 8
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in PTQ_METHODS:
            raise ConfigurationError(f"unknown PTQ method {self.method!r}")
        if self.steps_per_block < 1:
            raise ConfigurationError("steps per block must be >= 1")
        if self.calib_tokens < 1:
            raise ConfigurationError("calibration token budget must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "method", "calib_tokens", "steps_per_block", "lr",
            "batch_sequences", "eval_every", "seed")}


@dataclass
class BlockCalibration:
    """Per-block optimization state."""

    index: int
    method: str
    inputs: np.ndarray            # (n_seq, ctx, dim)
    param_tensors: list[ad.Tensor] = field(default_factory=list)
    loss_init: float = np.nan
    loss_final: float = np.nan


def _scheme_for(method: str) -> str:
    return {"flexround": "int4-flexround", "omniquant": "int4-omniquant"}[method]


@contextlib.contextmanager
def _freeze_except(block: Block, trainable: list[ad.Tensor]):
    """Turn off requires_grad for everything in the block except `trainable`."""
    keep = {id(t) for t in trainable}
    touched = []
    tensors = [block.attn_norm, block.mlp_norm]
    for lin in block.linears().values():
        tensors.append(lin.weight)
        tensors.extend(lin.params.values())
    for t in tensors:
        if id(t) not in keep and t.requires_grad:
            t.requires_grad = False
            touched.append(t)
    try:
        yield
    finally:
        for t in touched:
            t.requires_grad = True


def _block_forward(model: ToyLM, block: Block, X, quantized: bool,
                   chunk: int = 64) -> np.ndarray:
    """Run one block over captured activations without taping.

    quantized=False bypasses the quantization schemes (the latent weights are
    still the original FP weights during PTQ, so this is the FP reference)."""
    s = X.shape[1]
    rope, mask = model._rope(s), model._mask(s)
    schemes = None
    if not quantized:
        schemes = [(lin, lin.scheme) for lin in block.linears().values()]
        for lin, _ in schemes:
            lin.scheme = "fp"
    try:
        out = np.empty_like(X)
        with ad.no_grad():
            for start in range(0, X.shape[0], chunk):
                xb = ad.Tensor(X[start : start + chunk], _check=False)
                out[start : start + chunk] = block(xb, rope, mask).data
        return out
    finally:
        if schemes:
            for lin, sch in schemes:
                lin.scheme = sch


def capture_activations(model: ToyLM, seqs: np.ndarray, cfg: PtqConfig) -> list[np.ndarray]:
    """Per-block calibration inputs under the model's current schemes, with
    sequential propagation from the first block to the last."""
    seqs = _calib_sequences(seqs, model.cfg.context_length, cfg.calib_tokens)
    with ad.no_grad():
        x = model.hidden_states(seqs, upto=0).data
    captured = [x]
    for block in model.blocks[:-1]:
        x = _block_forward(model, block, x, quantized=True)
        captured.append(x)
    return captured


def _calib_sequences(seqs: np.ndarray, ctx: int, token_budget: int) -> np.ndarray:
    seqs = np.asarray(seqs)
    if seqs.ndim != 2 or seqs.shape[0] == 0:
        raise ConfigurationError("calibration corpus is empty")
    n = max(1, min(seqs.shape[0], token_budget // ctx))
    return seqs[:n]


def reconstruction_loss(model: ToyLM, block: Block, X: np.ndarray,
                        fp_reference: np.ndarray | None = None) -> float:
    """Squared Frobenius distance between FP and quantized block outputs."""
    if fp_reference is None:
        fp_reference = _block_forward(model, block, X, quantized=False)
    q_out = _block_forward(model, block, X, quantized=True)
    diff = (q_out.astype(np.float64) - fp_reference.astype(np.float64)).ravel()
    return float(diff @ diff)


def calibrate_block(model: ToyLM, index: int, X: np.ndarray,
                    cfg: PtqConfig) -> BlockCalibration:
    """Optimize one block's INT4 parameters on its captured inputs."""
    block = model.blocks[index]
    params: list[ad.Tensor] = []
    for lin in block.linears().values():
        if lin.scheme != _scheme_for(cfg.method):
            raise ContractViolation(
                f"block {index}: layer scheme {lin.scheme!r} does not match "
                f"method {cfg.method!r}"
            )
        params.extend(lin.params.values())

    state = BlockCalibration(index, cfg.method, X, params)
    fp_ref = _block_forward(model, block, X, quantized=False)
    state.loss_init = reconstruction_loss(model, block, X, fp_ref)

    best_loss = state.loss_init
    best = [p.data.copy() for p in params]
    rng = np.random.default_rng(cfg.seed + 7919 * index)
    opt = Adam(params, lr=cfg.lr)
    s = X.shape[1]
    rope, mask = model._rope(s), model._mask(s)
    trace: list[float] = []

    with _freeze_except(block, params):
        for step in range(cfg.steps_per_block):
            take = min(cfg.batch_sequences, X.shape[0])
            idx = rng.choice(X.shape[0], size=take, replace=False)
            xb = ad.Tensor(X[idx], _check=False)
            ref = ad.Tensor(fp_ref[idx], _check=False)
            diff = ad.sub(block(xb, rope, mask), ref)
            loss = ad.sum_all(ad.mul(diff, diff))
            val = loss.item()
            trace.append(val)
            if not np.isfinite(val):
                raise OptimizationError(
                    f"block {index}: non-finite reconstruction loss at step {step}; "
                    f"trace tail {trace[-5:]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            last = step == cfg.steps_per_block - 1
            if last or (step + 1) % cfg.eval_every == 0:
                full = reconstruction_loss(model, block, X, fp_ref)
                if full < best_loss:
                    best_loss = full
                    best = [p.data.copy() for p in params]

    for p, b in zip(params, best):
        p.data = b
    state.loss_final = best_loss
    return state


def run_ptq(model: ToyLM, calib_seqs: np.ndarray, cfg: PtqConfig,
            report_path=None) -> list[dict]:
    """FP model -> INT4 model, block by block from first to last."""
    if not model.blocks:
        raise ConfigurationError("model has no blocks")
    for name, lin in model.projection_layers().items():
        if lin.scheme != "fp":
            raise ContractViolation(f"run_ptq expects an FP model; {name} is {lin.scheme!r}")
    quantize_model(model, _scheme_for(cfg.method), source="fp")

    seqs = _calib_sequences(calib_seqs, model.cfg.context_length, cfg.calib_tokens)
    with ad.no_grad():
        x = model.hidden_states(seqs, upto=0).data

    report: list[dict] = []
    for index in range(len(model.blocks)):
        try:
            state = calibrate_block(model, index, x, cfg)
        except (OptimizationError, ContractViolation) as e:
            raise OptimizationError(f"PTQ aborted at block {index}: {e}") from e
        report.append({
            "block": index,
            "method": cfg.method,
            "loss_init": state.loss_init,
            "loss_final": state.loss_final,
            "steps": cfg.steps_per_block,
        })
        if index + 1 < len(model.blocks):
            x = _block_forward(model, model.blocks[index], x, quantized=True)

    if report_path is not None:
        with open(report_path, "w") as f:
            header = {"kind": "ptq-report", "method": cfg.method,
                      "calibration": "propagated", "seed": cfg.seed,
                      "calib_tokens": int(seqs.size)}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for row in report:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return report


def calibrate_single_linear(W: np.ndarray, X: np.ndarray, cfg: PtqConfig) -> tuple[dict, float]:
    """Layer-level variant used for oracle checks: minimize ||W X - Wq X||_F^2
    over the method's learnable parameters for a lone weight matrix."""
    W = np.asarray(W, dtype=np.float32)
    X = np.asarray(X, dtype=np.float32)
    if cfg.method == "flexround":
        p0 = quant.FlexRoundParams.init(W)
        params = {
            "log_delta": ad.Tensor(p0.log_delta, requires_grad=True),
            "log_S": ad.Tensor(p0.log_S, requires_grad=True),
            "log_s": ad.Tensor(p0.log_s, requires_grad=True),
        }
        def wq():
            return quant.apply_ste("flexround", W, params["log_delta"],
                                   params["log_S"], params["log_s"])
    else:
        p0 = quant.OmniQuantParams.init(W)
        params = {
            "raw_gamma": ad.Tensor(p0.raw_gamma, requires_grad=True),
            "raw_beta": ad.Tensor(p0.raw_beta, requires_grad=True),
        }
        def wq():
            return quant.apply_ste("omniquant", W, params["raw_gamma"], params["raw_beta"])

    ref = W @ X

    def loss_value() -> float:
        with ad.no_grad():
            diff = (wq().data @ X - ref).astype(np.float64).ravel()
        return float(diff @ diff)

    opt = Adam(list(params.values()), lr=cfg.lr)
    best_loss = loss_value()
    best = {k: p.data.copy() for k, p in params.items()}
    for step in range(cfg.steps_per_block):
        diff = ad.sub(ad.matmul(wq(), ad.Tensor(X)), ad.Tensor(ref))
        loss = ad.sum_all(ad.mul(diff, diff))
        if not np.isfinite(loss.item()):
            raise OptimizationError(f"single-layer calibration diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = loss_value()
        if val < best_loss:
            best_loss = val
            best = {k: p.data.copy() for k, p in params.items()}
    for k, p in params.items():
        p.data = best[k]
    return {k: p.data for k, p in params.items()}, best_loss
