"""The two-tower model: parameters, configs and the forward passes used by training and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import instrumentation
from .aggregator import AggregatorConfig, aggregate, init_aggregator
from .cross_attention import CrossAttentionConfig, cross_embed, init_cross_attention
from .encoders import (
    EncoderConfig,
    Vocabulary,
    encode,
    init_encoder,
    pad_batch,
    tokenize,
)
from .numeric import ParameterStore, Tensor, precision

SIDES = ("question", "answer")


@dataclass
class EndxModel:
    vocab: Vocabulary
    encoder: EncoderConfig
    aggregator: AggregatorConfig
    cross: CrossAttentionConfig
    params: ParameterStore

    @classmethod
    def initialize(cls, vocab: Vocabulary, encoder: EncoderConfig | None = None,
                   aggregator: AggregatorConfig | None = None,
                   cross: CrossAttentionConfig | None = None, seed: int = 0,
                   dtype: str = "float64") -> "EndxModel":
        """Fresh parameters; creation order is fixed so a seed fully determines them."""
        encoder = encoder or EncoderConfig()
        aggregator = aggregator or AggregatorConfig()
        cross = cross or CrossAttentionConfig()
        cross.head_dim(encoder.d_model)
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        with precision(dtype):
            init_encoder(store, encoder, len(vocab), "dual", rng)
            init_aggregator(store, "dual.agg.q", encoder.d_model, aggregator, rng)
            init_aggregator(store, "dual.agg.a", encoder.d_model, aggregator, rng)
            init_encoder(store, encoder, len(vocab), "cross", rng)
            init_cross_attention(store, encoder.d_model, cross, rng)
            init_aggregator(store, "cross.agg.q", encoder.d_model, aggregator, rng)
            init_aggregator(store, "cross.agg.a", encoder.d_model, aggregator, rng)
        return cls(vocab, encoder, aggregator, cross, store)

    @property
    def embedding_dim(self) -> int:
        return self.aggregator.resolved(self.encoder.d_model).d_out

    @property
    def dtype(self):
        return self.params["dual.embed"].dtype

    def dual_parameter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("dual.")]

    def cross_parameter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("cross.")]

    # ------------------------------------------------------------ text -> ids

    def token_ids(self, texts: Sequence[str], side: str) -> list[list[int]]:
        if side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        limit = self.encoder.max_len(side)
        return [tokenize(t, self.vocab, limit) for t in texts]

    # ------------------------------------------------------------ forward passes

    def dual_embed(self, ids: np.ndarray, mask: np.ndarray, side: str) -> Tensor:
        """Dual-tower sentence embeddings; sees nothing but the given sentences."""
        key = (instrumentation.QUESTION_ENCODINGS if side == "question"
               else instrumentation.ANSWER_ENCODINGS)
        instrumentation.bump(key, int(np.asarray(ids).shape[0]))
        seq = encode(ids, mask, self.encoder, self.params, "dual", self.encoder.max_len(side))
        return aggregate(seq, self.params, f"dual.agg.{side[0]}")

    def cross_embed(self, q_ids, q_mask, a_ids, a_mask) -> tuple[Tensor, Tensor]:
        """Cross-tower embeddings of aligned (question, answer) batches."""
        q_seq = encode(q_ids, q_mask, self.encoder, self.params, "cross",
                       self.encoder.max_question_len)
        a_seq = encode(a_ids, a_mask, self.encoder, self.params, "cross",
                       self.encoder.max_answer_len)
        return cross_embed(q_seq, a_seq, self.params, self.cross)

    # ------------------------------------------------------------ inference

    def embed_texts(self, texts: Sequence[str], side: str, batch_size: int = 128) -> np.ndarray:
        """Embed sentences with the dual tower (no tape, no cross-attention)."""
        if not len(texts):
            return np.zeros((0, self.embedding_dim), dtype=self.dtype)
        seqs = self.token_ids(texts, side)
        # sort by length so padding stays small; restore order afterwards
        order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
        out = np.empty((len(seqs), self.embedding_dim), dtype=self.dtype)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            ids, mask = pad_batch([seqs[i] for i in chunk])
            out[chunk] = self.dual_embed(ids, mask, side).data
        return out

    def cross_embed_texts(self, questions: Sequence[str], answers: Sequence[str],
                          ) -> tuple[np.ndarray, np.ndarray]:
        """Cross-embeddings for aligned text pairs (training-time analysis only)."""
        q_ids, q_mask = pad_batch(self.token_ids(questions, "question"))
        a_ids, a_mask = pad_batch(self.token_ids(answers, "answer"))
        rq, ra = self.cross_embed(q_ids, q_mask, a_ids, a_mask)
        return rq.data, ra.data

    def config_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "aggregator": self.aggregator.to_dict(),
            "cross_attention": self.cross.to_dict(),
        }
