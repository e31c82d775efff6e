"""scikit-learn style wrappers around the trainer and the BM25 baseline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import evaluation as ev
from .aggregator import AggregatorConfig
from .cross_attention import CrossAttentionConfig
from .data import RetrievalDataset, make_splits
from .encoders import EncoderConfig, Vocabulary
from .losses import DEFAULT_TARGETS, GAMConfig, LossWeights
from .numeric import OptimizerConfig
from .trainer import TrainConfig, train


def as_dataset(X) -> RetrievalDataset:
    """Accept a RetrievalDataset or an iterable of (question, answer) strings."""
    if isinstance(X, RetrievalDataset):
        return X
    questions, answers, pairs = {}, {}, []
    q_ids, a_ids = {}, {}
    for item in X:
        if not (isinstance(item, (tuple, list)) and len(item) == 2
                and all(isinstance(t, str) for t in item)):
            raise ValueError("expected (question, answer) string pairs")
        q, a = item
        qid = q_ids.setdefault(q, f"q{len(q_ids)}")
        aid = a_ids.setdefault(a, len(a_ids))
        questions[qid], answers[aid] = q, a
        if (qid, aid) not in pairs:
            pairs.append((qid, aid))
    if not pairs:
        raise ValueError("no training pairs")
    return RetrievalDataset(questions, answers, pairs)


def _texts(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("expected a sequence of strings, got a single string")
    texts = list(X)
    if not all(isinstance(t, str) for t in texts):
        raise ValueError("expected strings")
    return texts


class ENDXRetriever(BaseEstimator):
    """Dual-encoder retriever trained jointly with a cross-encoder teacher.

    ``fit`` holds out 10% of the questions for checkpoint selection and indexes
    every answer of the training data; ``index`` swaps in another pool.
    """

    def __init__(self, epochs=30, batch_size=32, learning_rate=1e-3, encoder_kind="transformer",
                 layers=2, d_model=64, heads=4, hops=4, alpha_dual=0.25, alpha_cross=0.25,
                 alpha_ga=0.5, gam_targets=None, warmup_epochs=5, kernel="inner", seed=0,
                 precision="float32"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.encoder_kind = encoder_kind
        self.layers = layers
        self.d_model = d_model
        self.heads = heads
        self.hops = hops
        self.alpha_dual = alpha_dual
        self.alpha_cross = alpha_cross
        self.alpha_ga = alpha_ga
        self.gam_targets = gam_targets
        self.warmup_epochs = warmup_epochs
        self.kernel = kernel
        self.seed = seed
        self.precision = precision

    def to_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            precision=self.precision,
            encoder=EncoderConfig(kind=self.encoder_kind, layers=self.layers,
                                  d_model=self.d_model, heads=self.heads),
            aggregator=AggregatorConfig(hops=self.hops),
            cross=CrossAttentionConfig(heads=self.heads),
            optimizer=OptimizerConfig(lr=self.learning_rate),
            weights=LossWeights(self.alpha_dual, self.alpha_cross, self.alpha_ga),
            gam=GAMConfig(kernel=self.kernel, warmup_epochs=self.warmup_epochs,
                          targets=dict(self.gam_targets or DEFAULT_TARGETS)))

    def fit(self, X, y=None):
        ds = as_dataset(X)
        cfg = self.to_config()
        train_ds, val_ds = make_splits(ds, 0.9, self.seed)
        if not val_ds.pairs:
            raise ValueError("too few questions to hold out a validation split")
        val_ds = ds.restrict(question_ids=val_ds.questions, keep_pool=True)
        vocab = Vocabulary.build([*train_ds.questions.values(), *ds.answers.values()])
        result = train(train_ds, val_ds, cfg, vocab)
        self.model_ = result.model
        self.training_log_ = result.log
        self.best_epoch_ = result.state.best_epoch
        self.index(ds.answers)
        return self

    def index(self, answers):
        """Embed a candidate pool (id -> text mapping or list of texts)."""
        check_is_fitted(self, "model_")
        if not isinstance(answers, dict):
            answers = dict(enumerate(_texts(answers)))
        self.index_ = ev.embed_corpus(answers, self.model_)
        return self

    def transform(self, X, side: str = "question") -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.embed_texts(_texts(X), side)

    def rank(self, questions, top: int = 10) -> list[list[tuple[int, float]]]:
        check_is_fitted(self, "index_")
        emb = self.transform(questions)
        return [ev.rank_answers(e, self.index_)[:top] for e in emb]

    def predict(self, X) -> np.ndarray:
        """Best-scoring answer id per question."""
        return np.array([r[0][0] for r in self.rank(X, top=1)])

    def score(self, X, y=None) -> float:
        """R@1 on a RetrievalDataset whose answers are all in the current index."""
        check_is_fitted(self, "index_")
        return ev.evaluate(self.model_, as_dataset(X), self.index_).recall[1]


class BM25Retriever(BaseEstimator):
    """Okapi BM25 over a fixed answer pool (a dataset, an id -> text dict or a text list)."""

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def fit(self, X, y=None):
        if isinstance(X, RetrievalDataset):
            answers = X.answers
        elif isinstance(X, dict):
            answers = X
        else:
            answers = dict(enumerate(_texts(X)))
        if not answers:
            raise ValueError("BM25 needs a non-empty corpus")
        self.answer_ids_ = np.array(sorted(answers), dtype=np.int64)
        self.bm25_ = ev.BM25([answers[a] for a in self.answer_ids_], self.k1, self.b)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "bm25_")
        return np.stack([self.bm25_.scores(q) for q in _texts(X)])

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return np.array([self.answer_ids_[ev.order_by_score(s, self.answer_ids_)[0]]
                         for s in scores])

    def score(self, X, y=None) -> float:
        ds = as_dataset(X)
        matched = ds.matched_answers()
        qids = [q for q in sorted(ds.questions) if matched[q]]
        scores = self.decision_function([ds.questions[q] for q in qids])
        return ev.metrics_from_scores(scores, self.answer_ids_,
                                      [matched[q] for q in qids]).recall[1]
