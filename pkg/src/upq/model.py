"""A small decoder-only transformer with quantization-aware linear layers.

Llama-flavored at desk scale: byte-level vocab, RMSNorm pre-norm blocks,
rotary position embeddings, SwiGLU MLP.  All projection layers inside blocks
(query/key/value/output and gate/up/down) are :class:`QuantizedLinear`;
embedding, final norm and the output head stay full precision.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import checkpoint, quant
from .errors import ConfigurationError, ContractViolation

PROJECTION_NAMES = ("q", "k", "v", "o", "gate", "up", "down")
SCHEMES = ("fp", "int4-flexround", "int4-omniquant", "int2-seq", "int4->int2-seq")

# layer groupings used by the parameter-dynamics diagnostics
LAYER_GROUPS = {"vod": ("v", "o", "down"), "qkug": ("q", "k", "up", "gate")}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_mult: int = 2
    context_length: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ContractViolation("dim must be divisible by n_heads")
        if (self.dim // self.n_heads) % 2:
            raise ContractViolation("head dimension must be even for rotary embeddings")
        if self.context_length < 2:
            raise ContractViolation("context length must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return self.dim * self.mlp_mult

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class QuantizedLinear:
    """y = x @ W_eff^T where W_eff is the latent weight pushed through the
    layer's quantization scheme (identity for 'fp')."""

    def __init__(self, weight: np.ndarray, scheme: str = "fp"):
        self.weight = ad.Tensor(np.asarray(weight, dtype=np.float32), requires_grad=True)
        self.scheme = scheme
        self.params: dict[str, ad.Tensor] = {}
        self._check_scheme()

    def _check_scheme(self):
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"unknown scheme {self.scheme!r}")
        needed = {
            "fp": set(),
            "int4-flexround": {"log_delta", "log_S", "log_s"},
            "int4-omniquant": {"raw_gamma", "raw_beta"},
            "int2-seq": {"seq_delta"},
            "int4->int2-seq": {"seq_delta"},
        }[self.scheme]
        if set(self.params) != needed:
            raise ContractViolation(
                f"scheme {self.scheme!r} requires params {sorted(needed)}, "
                f"got {sorted(self.params)}"
            )

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> ad.Tensor:
        if self.scheme == "fp":
            return self.weight
        if self.scheme == "int4-flexround":
            return quant.apply_ste(
                "flexround",
                self.weight,
                self.params["log_delta"],
                self.params["log_S"],
                self.params["log_s"],
            )
        if self.scheme == "int4-omniquant":
            return quant.apply_ste(
                "omniquant", self.weight, self.params["raw_gamma"], self.params["raw_beta"]
            )
        return quant.apply_ste("seq", self.weight, self.params["seq_delta"])

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(x, ad.transpose_last2(self.effective_weight()))

    def set_scheme(self, scheme: str, params: dict[str, np.ndarray]):
        self.scheme = scheme
        self.params = {
            k: ad.Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in params.items()
        }
        self._check_scheme()


class Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, ff = cfg.dim, cfg.mlp_dim

        def lin(m, n):
            return QuantizedLinear(rng.normal(0.0, 0.02, (m, n)).astype(np.float32))

        self.attn_norm = ad.Tensor(np.ones(d, np.float32), requires_grad=True)
        self.q, self.k, self.v, self.o = lin(d, d), lin(d, d), lin(d, d), lin(d, d)
        self.mlp_norm = ad.Tensor(np.ones(d, np.float32), requires_grad=True)
        self.gate, self.up = lin(ff, d), lin(ff, d)
        self.down = lin(d, ff)
        self.cfg = cfg

    def linears(self) -> dict[str, QuantizedLinear]:
        return {name: getattr(self, name) for name in PROJECTION_NAMES}

    def __call__(self, x: ad.Tensor, rope: tuple, mask: np.ndarray) -> ad.Tensor:
        cfg = self.cfg
        b, s, d = x.shape
        h, hd = cfg.n_heads, cfg.head_dim
        xn = ad.rmsnorm(x, self.attn_norm)

        def heads(t):
            return ad.permute(ad.reshape(t, (b, s, h, hd)), (0, 2, 1, 3))

        cos, sin = rope
        q, k = heads(self.q(xn)), heads(self.k(xn))
        q = ad.add(ad.mul(q, cos), ad.mul(ad.rotate_half(q), sin))
        k = ad.add(ad.mul(k, cos), ad.mul(ad.rotate_half(k), sin))
        v = heads(self.v(xn))
        scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(hd))
        probs = ad.softmax(ad.add(scores, ad.Tensor(mask, _check=False)))
        ctx = ad.reshape(ad.permute(ad.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
        x = ad.add(x, self.o(ctx))

        xn = ad.rmsnorm(x, self.mlp_norm)
        hidden = ad.mul(ad.silu(self.gate(xn)), self.up(xn))
        return ad.add(x, self.down(hidden))


class ToyLM:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embed = ad.Tensor(
            rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.dim)).astype(np.float32),
            requires_grad=True,
        )
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = ad.Tensor(np.ones(cfg.dim, np.float32), requires_grad=True)
        self.head = QuantizedLinear(
            rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.dim)).astype(np.float32)
        )
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- forward ----------------------------------------------------------

    def _rope(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        if s not in self._rope_cache:
            hd = self.cfg.head_dim
            inv = 1.0 / (10000.0 ** (np.arange(0, hd, 2) / hd))
            ang = np.outer(np.arange(s), inv)
            ang = np.concatenate([ang, ang], axis=-1)
            self._rope_cache[s] = (
                np.cos(ang).astype(np.float32),
                np.sin(ang).astype(np.float32),
            )
        return self._rope_cache[s]

    def _mask(self, s: int) -> np.ndarray:
        return np.triu(np.full((s, s), -1e9, np.float32), k=1)

    def hidden_states(self, tokens: np.ndarray, upto: int | None = None) -> ad.Tensor:
        """Embedding plus the first ``upto`` blocks (all when None)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractViolation("token batch must be 2-D (batch, seq)")
        s = tokens.shape[1]
        if s > self.cfg.context_length:
            raise ContractViolation(
                f"sequence length {s} exceeds context {self.cfg.context_length}"
            )
        x = ad.embedding(self.embed, tokens)
        rope, mask = self._rope(s), self._mask(s)
        for block in self.blocks[: len(self.blocks) if upto is None else upto]:
            x = block(x, rope, mask)
        return x

    def forward(self, tokens: np.ndarray) -> ad.Tensor:
        x = self.hidden_states(tokens)
        return self.head(ad.rmsnorm(x, self.final_norm))

    def __call__(self, tokens: np.ndarray) -> ad.Tensor:
        return self.forward(tokens)

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.attn_norm"] = blk.attn_norm
            out[f"blocks.{i}.mlp_norm"] = blk.mlp_norm
            for name, lin in blk.linears().items():
                out[f"blocks.{i}.{name}.weight"] = lin.weight
                for pname, p in lin.params.items():
                    out[f"blocks.{i}.{name}.{pname}"] = p
        out["final_norm"] = self.final_norm
        out["head.weight"] = self.head.weight
        return out

    def projection_layers(self) -> dict[str, QuantizedLinear]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, lin in blk.linears().items():
                out[f"blocks.{i}.{name}"] = lin
        return out

    def schemes(self) -> dict[str, str]:
        return {name: lin.scheme for name, lin in self.projection_layers().items()}


# ---------------------------------------------------------------------------
# Scheme application


def quantize_model(model: ToyLM, scheme: str, source: str = "fp") -> ToyLM:
    """Apply a quantization scheme to every projection layer in place.

    source='fp' expects fp (or same-scheme, for idempotent re-application)
    layers; source='int4' expects INT4 layers, freezes their effective weights
    as the new continuous latents, and initializes the INT2 scale to the
    per-row max of those INT4 weights.
    """
    if scheme not in SCHEMES or scheme == "fp":
        raise ContractViolation(f"cannot quantize to scheme {scheme!r}")
    for name, lin in model.projection_layers().items():
        W = lin.weight.data
        if scheme in ("int4-flexround", "int4-omniquant"):
            if source != "fp" or lin.scheme not in ("fp", scheme):
                raise ContractViolation(
                    f"{name}: scheme {lin.scheme!r} cannot take INT4 PTQ from {source!r}"
                )
            if scheme == "int4-flexround":
                p = quant.FlexRoundParams.init(W)
                lin.set_scheme(scheme, {"log_delta": p.log_delta, "log_S": p.log_S, "log_s": p.log_s})
            else:
                p = quant.OmniQuantParams.init(W)
                lin.set_scheme(scheme, {"raw_gamma": p.raw_gamma, "raw_beta": p.raw_beta})
        elif scheme == "int2-seq":
            if source != "fp" or lin.scheme not in ("fp", "int2-seq"):
                raise ContractViolation(f"{name}: expected fp source, layer is {lin.scheme!r}")
            lin.set_scheme(scheme, {"seq_delta": quant.init_seq_scale(W).values})
        else:  # int4->int2-seq
            if source != "int4":
                raise ContractViolation("int4->int2-seq requires source='int4'")
            if lin.scheme in ("int4-flexround", "int4-omniquant"):
                with ad.no_grad():
                    w4 = lin.effective_weight().data
                lin.weight = ad.Tensor(w4.copy(), requires_grad=True)
            elif lin.scheme == "int4->int2-seq":
                w4 = lin.weight.data  # idempotent re-application
            else:
                raise ContractViolation(f"{name}: expected INT4 layer, got {lin.scheme!r}")
            lin.set_scheme("int4->int2-seq", {"seq_delta": quant.init_seq_scale(w4).values})
    return model


# ---------------------------------------------------------------------------
# Evaluation


def perplexity(model: ToyLM, token_ids: np.ndarray, context_length: int,
               batch_windows: int = 32) -> float:
    """exp(mean NLL) over non-overlapping windows of the stream."""
    token_ids = np.asarray(token_ids).reshape(-1)
    if len(token_ids) < context_length:
        raise ConfigurationError(
            f"stream of {len(token_ids)} tokens is shorter than context {context_length}"
        )
    n_win = len(token_ids) // context_length
    windows = token_ids[: n_win * context_length].reshape(n_win, context_length)
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, n_win, batch_windows):
            batch = windows[start : start + batch_windows]
            logits = model.forward(batch[:, :-1]).data.astype(np.float64)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(logp, batch[:, 1:, None], axis=-1)
            total += -picked.sum()
            count += picked.size
    return float(np.exp(total / count))


def mean_eval_jsd(teacher: ToyLM, student: ToyLM, dataset_seqs: np.ndarray,
                  beta: float = 0.5, batch_windows: int = 32) -> float:
    """Mean teacher-student generalized JSD over packed eval sequences."""
    from .losses import JsdConfig, LogitsBatch, generalized_jsd

    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(dataset_seqs), batch_windows):
            batch = dataset_seqs[start : start + batch_windows]
            t_logits = teacher.forward(batch).data
            s_logits = student.forward(batch).data
            loss = generalized_jsd(
                LogitsBatch(t_logits, s_logits), JsdConfig(beta=beta)
            )
            n = batch.shape[0] * batch.shape[1]
            total += loss.item() * n
            count += n
    return total / count


# ---------------------------------------------------------------------------
# Checkpoint round-trip


def save_model(model: ToyLM, path) -> None:
    config = {
        "kind": "model",
        "model": model.cfg.to_dict(),
        "schemes": model.schemes(),
    }
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    checkpoint.write_container(path, config, tensors)


def load_model(path) -> ToyLM:
    config, tensors = checkpoint.read_container(path)
    if config.get("kind") != "model":
        raise ConfigurationError(f"{path} is not a model checkpoint")
    model = ToyLM(ModelConfig.from_dict(config["model"]))
    for name, lin in model.projection_layers().items():
        scheme = config["schemes"][name]
        if scheme != "fp":
            pnames = {
                "int4-flexround": ("log_delta", "log_S", "log_s"),
                "int4-omniquant": ("raw_gamma", "raw_beta"),
                "int2-seq": ("seq_delta",),
                "int4->int2-seq": ("seq_delta",),
            }[scheme]
            lin.set_scheme(scheme, {p: tensors[f"{name}.{p}"] for p in pnames})
    params = model.named_parameters()
    expected = set(params)
    if set(tensors) != expected:
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        raise ConfigurationError(
            f"checkpoint tensors do not match config (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    for name, p in params.items():
        if tuple(tensors[name].shape) != p.shape:
            raise ConfigurationError(f"tensor {name} has shape {tensors[name].shape}")
        p.data = tensors[name].astype(np.float32)
    return model
