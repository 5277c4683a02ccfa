"""Byte-level text ingestion, fixed-length packing, deterministic batching.

One corpus, three disjoint splits (calibration / train / eval) cut from
non-overlapping fixed-length sequences, so PTQ calibration data never leaks
into QAT training data.
"""

from __future__ import annotations

import glob
import hashlib
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import checkpoint
from .errors import ConfigurationError, ContractViolation

VOCAB_SIZE = 256

SPLIT_NAMES = ("calib", "train", "eval")
DEFAULT_SPLIT_FRACTIONS = (0.05, 0.90, 0.05)


@dataclass
class TokenStream:
    ids: np.ndarray  # int64, all in [0, 256)
    digest: str      # sha256 of the source bytes

    def __len__(self):
        return len(self.ids)


@dataclass
class PackedDataset:
    context_length: int
    sequences: np.ndarray  # (count, context_length) int64
    split: str

    def __len__(self):
        return len(self.sequences)

    @property
    def token_count(self) -> int:
        return int(self.sequences.size)


def tokenize(data: bytes) -> TokenStream:
    """Byte-level tokenization: one token per byte, reversible."""
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    return TokenStream(ids=ids, digest=hashlib.sha256(data).hexdigest())


def detokenize(stream: TokenStream) -> bytes:
    return stream.ids.astype(np.uint8).tobytes()


def load_text(path: str) -> TokenStream:
    """Read one file, or every file matching a glob / inside a directory."""
    if os.path.isdir(path):
        paths = sorted(glob.glob(os.path.join(path, "*")))
    elif any(ch in path for ch in "*?["):
        paths = sorted(glob.glob(path))
    else:
        paths = [path]
    if not paths:
        raise ConfigurationError(f"no corpus files match {path!r}")
    chunks = []
    for p in paths:
        with open(p, "rb") as f:
            chunks.append(f.read())
    data = b"".join(chunks)
    if not data:
        raise ConfigurationError(f"corpus {path!r} is empty")
    return tokenize(data)


def pack(
    stream: TokenStream,
    context_length: int,
    split_fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict[str, PackedDataset]:
    """Chop into non-overlapping context-length sequences, shuffle once with
    the seed, and deal whole sequences out to the three splits."""
    if context_length < 2:
        raise ContractViolation("context length must be >= 2")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be three values summing to 1")
    n_seq = len(stream.ids) // context_length
    if n_seq < 3:
        raise ConfigurationError(
            f"stream of {len(stream.ids)} tokens is too short for one sequence per split"
        )
    seqs = stream.ids[: n_seq * context_length].reshape(n_seq, context_length)
    order = np.random.default_rng(seed).permutation(n_seq)
    n_calib = max(1, int(n_seq * split_fractions[0]))
    n_eval = max(1, int(n_seq * split_fractions[2]))
    n_train = n_seq - n_calib - n_eval
    if n_train < 1:
        raise ConfigurationError("not enough sequences for a train split")
    bounds = {
        "calib": order[:n_calib],
        "train": order[n_calib : n_calib + n_train],
        "eval": order[n_calib + n_train :],
    }
    return {
        name: PackedDataset(context_length, seqs[idx].copy(), name)
        for name, idx in bounds.items()
    }


def batches(
    dataset: PackedDataset, batch_size: int, seed: int = 0
) -> Iterator[np.ndarray]:
    """One epoch of deterministically shuffled batches; every sequence once."""
    if batch_size < 1:
        raise ContractViolation("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield dataset.sequences[order[start : start + batch_size]]


def save_packed(path, splits: dict[str, PackedDataset], digest: str) -> None:
    config = {
        "kind": "packed-dataset",
        "digest": digest,
        "context_length": next(iter(splits.values())).context_length,
        "splits": sorted(splits),
    }
    tensors = {name: ds.sequences.astype(np.float32) for name, ds in splits.items()}
    checkpoint.write_container(path, config, tensors)


def load_packed(path) -> tuple[dict[str, PackedDataset], str]:
    config, tensors = checkpoint.read_container(path)
    if config.get("kind") != "packed-dataset":
        raise ConfigurationError(f"{path} is not a packed dataset cache")
    ctx = config["context_length"]
    splits = {
        name: PackedDataset(ctx, tensors[name].astype(np.int64), name)
        for name in config["splits"]
    }
    return splits, config["digest"]


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic toy corpus: word-salad sentences over a mid-sized
    vocabulary.  The vocabulary is deliberately large enough that a small
    byte-level model does not saturate the task within a few million tokens,
    so training-efficiency comparisons between objectives stay meaningful."""
    words = (
        "the quick brown fox jumps over a lazy dog while rain falls on "
        "green hills and small birds sing songs about long summer days "
        "old river stones turn slowly under cold water as grey clouds drift "
        "past tall pine trees near quiet northern lakes where silver fish "
        "swim between dark reeds and pale light moves across open fields "
        "every morning warm wind carries dry leaves down narrow dusty roads "
        "toward distant blue mountains whose steep slopes hold late spring "
        "snow above deep valleys full of wild flowers that bloom after "
        "heavy storms wash through ancient stone walls around empty gardens "
        "children often walk along sandy paths beside broad calm bays "
        "watching white boats sail slowly out beyond low rocky islands "
        "until bright stars appear in clear evening skies above sleeping "
        "villages where soft yellow lamps glow behind small round windows "
        "farmers plant young seeds in rich black soil before first frost "
        "covers fallow ground with thin white layers of early winter ice "
        "travelers rest near warm fires telling strange tales of far lands "
        "merchants trade sweet fruit fresh bread sharp tools woven cloth "
        "sailors read shifting winds and follow old charts across wide seas"
    ).split()
    rng = np.random.default_rng(seed)
    # Zipfian word frequencies (like natural text): frequent words dominate,
    # the tail is rare, so next-token statistics are genuinely long-tailed.
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = 1.0 / (ranks + 2.7) ** 1.07
    probs /= probs.sum()
    parts: list[bytes] = []
    total = 0
    while total < n_bytes:
        length = int(rng.integers(4, 10))
        sentence = " ".join(words[i] for i in rng.choice(len(words), length, p=probs))
        chunk = (sentence.capitalize() + ". ").encode("ascii")
        parts.append(chunk)
        total += len(chunk)
    return b"".join(parts)[:n_bytes]
