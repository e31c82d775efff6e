"""Multi-hop self-attentive pooling of token representations into one vector.

Each of ``hops`` attention distributions over the valid positions is computed
as ``softmax(W2 tanh(W1 H^T))``; the ``hops`` pooled vectors are flattened and
projected to the embedding size.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nx
from .encoders import ContextualizedSeq
from .numeric import ParameterStore, Tensor


@dataclass
class AggregatorConfig:
    hops: int = 4
    d_att: int | None = None
    d_out: int | None = None
    penalty: float = 0.0

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        for name in ("d_att", "d_out"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")

    def resolved(self, d_model: int) -> "AggregatorConfig":
        return AggregatorConfig(self.hops, self.d_att or d_model, self.d_out or d_model,
                                self.penalty)

    def to_dict(self) -> dict:
        return asdict(self)


def init_aggregator(store: ParameterStore, prefix: str, d_model: int, cfg: AggregatorConfig,
                    rng: np.random.Generator) -> None:
    cfg = cfg.resolved(d_model)
    store.glorot(f"{prefix}.W1", (d_model, cfg.d_att), rng)
    store.glorot(f"{prefix}.W2", (cfg.d_att, cfg.hops), rng)
    # shrunk so that inner products of fresh embeddings are O(1); at full Glorot
    # scale the in-batch softmax starts saturated and training collapses
    store.glorot(f"{prefix}.Wp", (cfg.hops * d_model, cfg.d_out), rng,
                 scale=1.0 / math.sqrt(cfg.d_out))
    store.zeros(f"{prefix}.bp", (cfg.d_out,))


def hop_attention(seq: ContextualizedSeq, store: ParameterStore, prefix: str) -> Tensor:
    """Attention weights (B, hops, L); padded positions get exactly zero."""
    if not np.all(seq.mask.any(axis=1)):
        raise ValueError("cannot aggregate an all-pad sequence")
    logits = nx.tanh(seq.values @ store[f"{prefix}.W1"]) @ store[f"{prefix}.W2"]
    return nx.softmax_rows(nx.swapaxes(logits, 1, 2), mask=seq.mask[:, None, :])


def aggregate(seq: ContextualizedSeq, store: ParameterStore, prefix: str,
              return_attention: bool = False):
    """Pool ``seq`` into (B, d_out) sentence embeddings."""
    weights = hop_attention(seq, store, prefix)
    pooled = weights @ seq.values
    b, hops, d = pooled.shape
    out = nx.reshape(pooled, (b, hops * d)) @ store[f"{prefix}.Wp"] + store[f"{prefix}.bp"]
    return (out, weights) if return_attention else out


def orthogonality_penalty(weights: Tensor) -> Tensor:
    """Mean squared Frobenius norm of A A^T - I over the batch."""
    b, hops, _ = weights.shape
    gram = weights @ nx.swapaxes(weights, 1, 2)
    diff = gram - np.eye(hops, dtype=weights.dtype)
    return nx.sum(diff * diff) * (1.0 / b)
