"""The interaction block of the cross tower.

One sentence (the *source*) is re-read under the guidance of its matched
counterpart (the *guide*): the guide supplies the attention queries, the
source supplies keys and values.  Refining the question therefore yields one
row per answer position, and vice versa.  Every call is counted so that the
inference path can prove it never runs this block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import instrumentation
from . import numeric as nx
from .aggregator import aggregate
from .attention import multi_head_attention
from .encoders import ContextualizedSeq
from .numeric import ParameterStore, Tensor

PREFIX = "cross"


@dataclass
class CrossAttentionConfig:
    heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.ffn_mult < 1:
            raise ValueError("heads and ffn_mult must be positive")

    def head_dim(self, d_model: int) -> int:
        if d_model % self.heads:
            raise ValueError(f"d_model {d_model} not divisible by {self.heads} cross heads")
        return d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_cross_attention(store: ParameterStore, d_model: int, cfg: CrossAttentionConfig,
                         rng: np.random.Generator) -> None:
    cfg.head_dim(d_model)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        store.glorot(f"{PREFIX}.attn.{w}", (d_model, d_model), rng)
    inner = cfg.ffn_mult * d_model
    store.glorot(f"{PREFIX}.ffn.W1", (d_model, inner), rng)
    store.zeros(f"{PREFIX}.ffn.b1", (inner,))
    store.glorot(f"{PREFIX}.ffn.W2", (inner, d_model), rng)
    store.zeros(f"{PREFIX}.ffn.b2", (d_model,))
    store.ones(f"{PREFIX}.ln.gain", (d_model,))
    store.zeros(f"{PREFIX}.ln.bias", (d_model,))


def _check_pair(source: ContextualizedSeq, guide: ContextualizedSeq) -> None:
    if source.values.shape[-1] != guide.values.shape[-1]:
        raise ValueError("source and guide must share the representation size")
    if source.values.shape[0] != guide.values.shape[0]:
        raise ValueError("source and guide batch sizes differ")
    if guide.values.shape[1] == 0 or not np.all(guide.mask.any(axis=1)):
        raise ValueError("guide sequence is empty")
    if not np.all(source.mask.any(axis=1)):
        raise ValueError("source sequence is empty")


def cross_head(source: ContextualizedSeq, guide: ContextualizedSeq, store: ParameterStore,
               cfg: CrossAttentionConfig, head: int) -> Tensor:
    """A single attention head: (B, guide_len, d_h)."""
    _check_pair(source, guide)
    instrumentation.bump(instrumentation.CROSS_ATTENTION)
    dh = cfg.head_dim(source.values.shape[-1])
    cols = slice(head * dh, (head + 1) * dh)
    q = guide.values @ store[f"{PREFIX}.attn.Wq"][:, cols]
    k = source.values @ store[f"{PREFIX}.attn.Wk"][:, cols]
    v = source.values @ store[f"{PREFIX}.attn.Wv"][:, cols]
    logits = (q @ nx.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(dh))
    return nx.softmax_rows(logits, mask=source.mask[:, None, :]) @ v


def cross_refine(source: ContextualizedSeq, guide: ContextualizedSeq, store: ParameterStore,
                 cfg: CrossAttentionConfig) -> ContextualizedSeq:
    """LayerNorm(H' + FFN(H')) with H' the projected concatenation of all heads.

    The result is indexed by guide positions and carries the guide's mask.
    """
    _check_pair(source, guide)
    instrumentation.bump(instrumentation.CROSS_ATTENTION)
    cfg.head_dim(source.values.shape[-1])
    heads = multi_head_attention(guide.values, source.values, source.mask,
                                 store[f"{PREFIX}.attn.Wq"], store[f"{PREFIX}.attn.Wk"],
                                 store[f"{PREFIX}.attn.Wv"], cfg.heads)
    attended = heads @ store[f"{PREFIX}.attn.Wo"]
    ff = nx.feed_forward(attended, store[f"{PREFIX}.ffn.W1"], store[f"{PREFIX}.ffn.b1"],
                         store[f"{PREFIX}.ffn.W2"], store[f"{PREFIX}.ffn.b2"])
    out = nx.layer_norm(attended + ff, store[f"{PREFIX}.ln.gain"], store[f"{PREFIX}.ln.bias"])
    keep = guide.mask.astype(out.dtype)[:, :, None]
    return ContextualizedSeq(out * keep, guide.mask)


def cross_embed(q_seq: ContextualizedSeq, a_seq: ContextualizedSeq, store: ParameterStore,
                cfg: CrossAttentionConfig) -> tuple[Tensor, Tensor]:
    """Cross-embeddings (R_q, R_a) for aligned question/answer batches."""
    refined_q = cross_refine(source=q_seq, guide=a_seq, store=store, cfg=cfg)
    refined_a = cross_refine(source=a_seq, guide=q_seq, store=store, cfg=cfg)
    return (aggregate(refined_q, store, f"{PREFIX}.agg.q"),
            aggregate(refined_a, store, f"{PREFIX}.agg.a"))
