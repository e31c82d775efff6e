"""Token vocabularies and the sequence encoders of both towers.

Each encoder maps padded token ids ``(B, L)`` to contextualized vectors
``(B, L, d_r)``: trainable token embeddings plus fixed sinusoidal positions,
followed by ``layers`` transformer or bidirectional recurrent blocks.
"""
from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numeric as nx
from .attention import multi_head_attention
from .numeric import ParameterStore, Tensor

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
ENCODER_KINDS = ("transformer", "rnn", "gru", "lstm")
TOWERS = ("dual", "cross")
_GATES = {"rnn": 1, "gru": 3, "lstm": 4}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token to id map with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 30000) -> "Vocabulary":
        """Most frequent tokens first (ties alphabetical), capped at ``max_size`` ids."""
        if max_size < 2:
            raise ValueError("max_size must leave room for the reserved ids")
        counts = Counter(tok for text in texts for tok in split_tokens(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(tok for tok, _ in ranked[: max_size - 2])

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.itos[2:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos[2:]).encode("utf-8")).hexdigest()


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    tokens = split_tokens(text) if text is not None else []
    if not tokens:
        raise ValueError("empty input")
    return [vocab.id(tok) for tok in tokens[:max_len]]


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into ``(ids, mask)`` arrays."""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
    return ids, ids != PAD_ID


@dataclass
class EncoderConfig:
    kind: str = "transformer"
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    max_question_len: int = 64
    max_answer_len: int = 128
    share_towers: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"encoder kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.layers < 1 or self.d_model < 1:
            raise ValueError("layers and d_model must be positive")
        if self.kind == "transformer" and (self.heads < 1 or self.d_model % self.heads):
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.max_question_len < 1 or self.max_answer_len < 1:
            raise ValueError("maximum lengths must be positive")

    def max_len(self, side: str) -> int:
        return self.max_question_len if side == "question" else self.max_answer_len

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContextualizedSeq:
    """Batched token representations ``values`` (B, L, d) with validity ``mask`` (B, L)."""

    values: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape[:2] != self.mask.shape:
            raise ValueError(f"mask {self.mask.shape} does not match values {self.values.shape}")


def positional_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(d) // 2)) / d)
    angles = pos * rates[None, :]
    pe = np.where(np.arange(d) % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


def tower_prefix(cfg: EncoderConfig, tower: str) -> str:
    if tower not in TOWERS:
        raise ValueError(f"tower must be one of {TOWERS}")
    return "dual" if cfg.share_towers else tower


def init_encoder(store: ParameterStore, cfg: EncoderConfig, vocab_size: int, tower: str,
                 rng: np.random.Generator) -> None:
    """Create the parameters of one tower's encoder (no-op for a shared cross tower)."""
    if tower_prefix(cfg, tower) != tower:
        return
    d = cfg.d_model
    store.glorot(f"{tower}.embed", (vocab_size, d), rng)
    for layer in range(cfg.layers):
        p = f"{tower}.enc.{layer}"
        if cfg.kind == "transformer":
            for w in ("Wq", "Wk", "Wv", "Wo"):
                store.glorot(f"{p}.attn.{w}", (d, d), rng)
            store.ones(f"{p}.ln1.gain", (d,))
            store.zeros(f"{p}.ln1.bias", (d,))
            store.glorot(f"{p}.ffn.W1", (d, 4 * d), rng)
            store.zeros(f"{p}.ffn.b1", (4 * d,))
            store.glorot(f"{p}.ffn.W2", (4 * d, d), rng)
            store.zeros(f"{p}.ffn.b2", (d,))
            store.ones(f"{p}.ln2.gain", (d,))
            store.zeros(f"{p}.ln2.bias", (d,))
        else:
            gates = _GATES[cfg.kind]
            for direction in ("fwd", "bwd"):
                store.glorot(f"{p}.{direction}.Wx", (d, gates * d), rng)
                store.glorot(f"{p}.{direction}.Uh", (d, gates * d), rng)
                store.zeros(f"{p}.{direction}.b", (gates * d,))


def _transformer_block(x: Tensor, mask: np.ndarray, store: ParameterStore, p: str,
                       heads: int) -> Tensor:
    attended = multi_head_attention(x, x, mask, store[f"{p}.attn.Wq"], store[f"{p}.attn.Wk"],
                                    store[f"{p}.attn.Wv"], heads) @ store[f"{p}.attn.Wo"]
    x = nx.layer_norm(x + attended, store[f"{p}.ln1.gain"], store[f"{p}.ln1.bias"])
    ff = nx.feed_forward(x, store[f"{p}.ffn.W1"], store[f"{p}.ffn.b1"],
                         store[f"{p}.ffn.W2"], store[f"{p}.ffn.b2"])
    return nx.layer_norm(x + ff, store[f"{p}.ln2.gain"], store[f"{p}.ln2.bias"])


def _recurrent_pass(x: Tensor, mask: np.ndarray, store: ParameterStore, p: str, kind: str,
                    reverse: bool) -> Tensor:
    b, length, d = x.shape
    projected = x @ store[f"{p}.Wx"] + store[f"{p}.b"]
    uh = store[f"{p}.Uh"]
    keep = mask.astype(x.dtype)[:, :, None]
    h = Tensor(np.zeros((b, d), dtype=x.dtype))
    c = h
    outputs: list = [None] * length
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        m = keep[:, t]
        xt = projected[:, t, :]
        hu = h @ uh
        if kind == "rnn":
            h_new = nx.tanh(xt + hu)
        elif kind == "gru":
            z = nx.sigmoid(xt[:, :d] + hu[:, :d])
            r = nx.sigmoid(xt[:, d:2 * d] + hu[:, d:2 * d])
            n = nx.tanh(xt[:, 2 * d:] + r * hu[:, 2 * d:])
            h_new = (1.0 - z) * n + z * h
        else:
            gates = xt + hu
            i = nx.sigmoid(gates[:, :d])
            f = nx.sigmoid(gates[:, d:2 * d])
            g = nx.tanh(gates[:, 2 * d:3 * d])
            o = nx.sigmoid(gates[:, 3 * d:])
            c_new = f * c + i * g
            h_new = o * nx.tanh(c_new)
            # padded steps carry the state through unchanged
            c = c_new * m + c * (1.0 - m)
        h = h_new * m + h * (1.0 - m)
        outputs[t] = h * m
    return nx.stack(outputs, axis=1)


def encode(ids: np.ndarray, mask: np.ndarray, cfg: EncoderConfig, store: ParameterStore,
           tower: str, max_len: int | None = None) -> ContextualizedSeq:
    """Contextualize a padded batch of id sequences with one tower's encoder."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ValueError("ids and mask must be matching (batch, length) arrays")
    limit = max_len if max_len is not None else max(cfg.max_question_len, cfg.max_answer_len)
    if ids.shape[1] > limit:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {limit}")
    prefix = tower_prefix(cfg, tower)
    table = store[f"{prefix}.embed"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("token id outside the vocabulary")
    # token vectors are scaled up so the unit-amplitude positions do not drown them
    x = (nx.take_rows(table, ids) * math.sqrt(cfg.d_model)
         + positional_encoding(ids.shape[1], cfg.d_model, table.dtype))
    keep = mask.astype(table.dtype)[:, :, None]
    for layer in range(cfg.layers):
        p = f"{prefix}.enc.{layer}"
        if cfg.kind == "transformer":
            x = _transformer_block(x, mask, store, p, cfg.heads)
        else:
            x = (_recurrent_pass(x, mask, store, f"{p}.fwd", cfg.kind, reverse=False)
                 + _recurrent_pass(x, mask, store, f"{p}.bwd", cfg.kind, reverse=True))
    return ContextualizedSeq(x * keep, mask)


def encode_sequence(ids: Sequence[int], cfg: EncoderConfig, store: ParameterStore, tower: str,
                    max_len: int | None = None) -> ContextualizedSeq:
    """Single-sequence convenience wrapper around :func:`encode` (batch of one)."""
    ids = np.asarray([list(ids)], dtype=np.int64)
    return encode(ids, ids != PAD_ID, cfg, store, tower, max_len)
