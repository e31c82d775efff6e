"""Offline answer indexing, ranking and retrieval metrics, plus the BM25 baseline.

Answers are embedded once by the dual tower; a question then costs one
encoding and one matrix-vector product against the index.  Ties in score are
broken by ascending answer id so that metrics are reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from . import instrumentation
from .data import RetrievalDataset
from .encoders import split_tokens

RECALL_AT = (1, 5, 10)
INDEX_FILE = "index.npz"
ANSWERS_FILE = "answers.json"


@dataclass
class AnswerIndex:
    answer_ids: np.ndarray
    embeddings: np.ndarray
    fingerprint: str = ""
    texts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.answer_ids = np.asarray(self.answer_ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.answer_ids) != self.embeddings.shape[0]:
            raise ValueError("one embedding row per answer id is required")
        if len(self.answer_ids) > 1 and np.any(np.diff(self.answer_ids) <= 0):
            raise ValueError("answer ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.answer_ids)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / INDEX_FILE, answer_ids=self.answer_ids, embeddings=self.embeddings,
                 fingerprint=np.array(self.fingerprint))
        (directory / ANSWERS_FILE).write_text(
            json.dumps({str(k): v for k, v in sorted(self.texts.items())}, ensure_ascii=False),
            encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "AnswerIndex":
        directory = Path(directory)
        if not (directory / INDEX_FILE).exists():
            raise FileNotFoundError(
                f"no answer index in {directory}; build one with `endx eval --build-index {directory}`")
        with np.load(directory / INDEX_FILE) as z:
            index = cls(z["answer_ids"], z["embeddings"], str(z["fingerprint"]))
        answers = directory / ANSWERS_FILE
        if answers.exists():
            index.texts = {int(k): v for k, v in
                           json.loads(answers.read_text(encoding="utf-8")).items()}
        return index


@dataclass
class MetricsReport:
    mrr: float
    recall: dict
    ranks: dict
    num_questions: int
    subset_min_questions: int | None = None

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "recall": {str(n): v for n, v in sorted(self.recall.items())},
            "num_questions": self.num_questions,
            "subset_min_questions": self.subset_min_questions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- indexing


def corpus_digest(answers: Mapping[int, str]) -> str:
    h = hashlib.sha256()
    for aid in sorted(answers):
        h.update(f"{aid}\t{answers[aid]}\n".encode("utf-8"))
    return h.hexdigest()


def model_digest(model) -> str:
    h = hashlib.sha256(json.dumps(model.config_dict(), sort_keys=True).encode("utf-8"))
    h.update(model.vocab.digest().encode("ascii"))
    for name in sorted(model.params.names()):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def embed_corpus(answers: Mapping[int, str], model, cache_dir=None,
                 batch_size: int = 128) -> AnswerIndex:
    """Embed every candidate answer independently with the frozen dual tower.

    With ``cache_dir`` an index whose fingerprint matches is reused as is.
    """
    fingerprint = f"{model_digest(model)}:{corpus_digest(answers)}"
    if cache_dir is not None and (Path(cache_dir) / INDEX_FILE).exists():
        cached = AnswerIndex.load(cache_dir)
        if cached.fingerprint == fingerprint:
            if cached.embeddings.shape[1] != model.embedding_dim:
                raise ValueError("cached index embedding size does not match the checkpoint")
            return cached
    ids = sorted(answers)
    matrix = model.embed_texts([answers[a] for a in ids], "answer", batch_size)
    index = AnswerIndex(np.array(ids, dtype=np.int64), matrix, fingerprint, dict(answers))
    if cache_dir is not None:
        index.save(cache_dir)
    return index


def score_questions(question_embeddings: np.ndarray, index: AnswerIndex) -> np.ndarray:
    """Inner products against the index: one matrix-vector product per question."""
    q = np.atleast_2d(question_embeddings)
    if q.shape[1] != index.embeddings.shape[1]:
        raise ValueError(
            f"question embedding size {q.shape[1]} != index size {index.embeddings.shape[1]}")
    instrumentation.bump(instrumentation.INDEX_PRODUCTS, q.shape[0])
    return q @ index.embeddings.T


def order_by_score(scores: np.ndarray, answer_ids: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ascending answer id on ties."""
    return np.lexsort((answer_ids, -scores))


def rank_answers(question_embedding: np.ndarray, index: AnswerIndex
                 ) -> list[tuple[int, float]]:
    if not len(index):
        raise ValueError("cannot rank against an empty index")
    scores = score_questions(question_embedding, index)[0]
    order = order_by_score(scores, index.answer_ids)
    return [(int(index.answer_ids[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------- metrics


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank of the first correct answer (ranks start at 1)."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no questions to score")
    if any(r is None or r < 1 for r in ranks):
        raise ValueError("every question needs a correct answer in the pool")
    return math.fsum(1.0 / r for r in ranks) / len(ranks)


def recall_at_n(rankings: Sequence[Sequence[int]], gold: Sequence[set], n: int) -> float:
    """Mean over questions of |top_n ∩ gold| / |gold|."""
    if n < 1:
        raise ValueError("N must be >= 1")
    if len(rankings) != len(gold) or not rankings:
        raise ValueError("need one non-empty gold set per ranking")
    return math.fsum(len(set(list(ranked)[:n]) & set(correct)) / len(correct)
                     for ranked, correct in zip(rankings, gold)) / len(rankings)


def _score_block(scores: np.ndarray, answer_ids: np.ndarray, gold: list, ns) -> tuple:
    firsts, hits = [], {n: [] for n in ns}
    for row, correct in zip(scores, gold):
        ordered = answer_ids[order_by_score(row, answer_ids)]
        is_gold = np.isin(ordered, list(correct))
        if not is_gold.any():
            raise ValueError("a question has no correct answer in the candidate pool")
        firsts.append(int(np.argmax(is_gold)) + 1)
        for n in ns:
            hits[n].append(int(is_gold[:n].sum()) / len(correct))
    return firsts, hits


def evaluation_threads() -> int:
    try:
        return max(1, int(os.environ.get("ENDX_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def metrics_from_scores(scores: np.ndarray, answer_ids: np.ndarray, gold: list,
                        question_ids: Sequence | None = None, ns=RECALL_AT,
                        subset_min_questions: int | None = None) -> MetricsReport:
    """MRR and R@N for a (questions x answers) score matrix."""
    answer_ids = np.asarray(answer_ids)
    question_ids = list(range(len(gold))) if question_ids is None else list(question_ids)
    chunk = 256
    blocks = [(scores[s:s + chunk], gold[s:s + chunk]) for s in range(0, len(gold), chunk)]
    with ThreadPoolExecutor(max_workers=evaluation_threads()) as pool:
        results = list(pool.map(lambda b: _score_block(b[0], answer_ids, b[1], ns), blocks))
    firsts = [r for block, _ in results for r in block]
    # fsum is correctly rounded, so the result does not depend on the block split
    recall = {n: math.fsum(h for _, hits in results for h in hits[n]) / len(firsts) for n in ns}
    return MetricsReport(mrr(firsts), recall, dict(zip(question_ids, firsts)), len(firsts),
                         subset_min_questions)


def evaluate(model, ds: RetrievalDataset, index: AnswerIndex | None = None,
             subset_min_questions: int | None = None) -> MetricsReport:
    """Rank every question of ``ds`` against its candidate pool with the dual tower."""
    if index is None:
        index = embed_corpus(ds.answers, model)
    matched = ds.matched_answers()
    qids = [q for q in sorted(ds.questions) if matched[q]]
    if not qids:
        raise ValueError("dataset has no answerable questions")
    q_emb = model.embed_texts([ds.questions[q] for q in qids], "question")
    scores = score_questions(q_emb, index)
    return metrics_from_scores(scores, index.answer_ids, [matched[q] for q in qids], qids,
                               subset_min_questions=subset_min_questions)


def one_to_many_subset(ds: RetrievalDataset, min_questions: int) -> RetrievalDataset:
    """Answers with at least ``min_questions`` matched questions, with those questions."""
    if min_questions < 1:
        raise ValueError("min_questions must be >= 1")
    if min_questions == 1:
        return ds
    by_answer = ds.matched_questions()
    keep = [a for a, qs in by_answer.items() if len(qs) >= min_questions]
    questions = {q for a in keep for q in by_answer[a]}
    return ds.restrict(question_ids=questions, answer_ids=keep)


# ---------------------------------------------------------------- BM25


class BM25:
    """Okapi BM25 over a fixed corpus, IDF = ln((N - df + 0.5) / (df + 0.5) + 1)."""

    def __init__(self, corpus: Sequence[str], k1: float = 1.2, b: float = 0.75):
        if not len(corpus):
            raise ValueError("BM25 needs a non-empty corpus")
        self.k1, self.b = k1, b
        self.docs = [Counter(split_tokens(doc)) for doc in corpus]
        self.lengths = np.array([sum(d.values()) for d in self.docs], dtype=float)
        self.avg_length = float(self.lengths.mean()) or 1.0
        df = Counter(tok for d in self.docs for tok in d)
        n = len(self.docs)
        self.idf = {t: math.log((n - f + 0.5) / (f + 0.5) + 1.0) for t, f in df.items()}

    def scores(self, query: str) -> np.ndarray:
        norm = self.k1 * (1.0 - self.b + self.b * self.lengths / self.avg_length)
        out = np.zeros(len(self.docs))
        for term in split_tokens(query):
            idf = self.idf.get(term)
            if idf is None:
                continue
            tf = np.array([d.get(term, 0) for d in self.docs], dtype=float)
            out += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out


def bm25_rank(question: str, corpus: Mapping[int, str], k1: float = 1.2, b: float = 0.75,
              model: BM25 | None = None) -> list[tuple[int, float]]:
    """Answer ids of ``corpus`` ordered by BM25 score (ties by ascending id)."""
    ids = np.array(sorted(corpus), dtype=np.int64)
    model = model or BM25([corpus[a] for a in ids], k1, b)
    scores = model.scores(question)
    return [(int(ids[i]), float(scores[i])) for i in order_by_score(scores, ids)]


def evaluate_bm25(ds: RetrievalDataset, k1: float = 1.2, b: float = 0.75) -> MetricsReport:
    ids = np.array(sorted(ds.answers), dtype=np.int64)
    model = BM25([ds.answers[a] for a in ids], k1, b)
    matched = ds.matched_answers()
    qids = [q for q in sorted(ds.questions) if matched[q]]
    scores = np.stack([model.scores(ds.questions[q]) for q in qids])
    return metrics_from_scores(scores, ids, [matched[q] for q in qids], qids)


# ---------------------------------------------------------------- analysis


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] < 1:
        raise ValueError("need at least one embedding")
    return e @ e.T


def write_matrix_csv(path, ids: Sequence, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [str(i) for i in ids])
        for ident, row in zip(ids, matrix):
            writer.writerow([str(ident)] + [repr(float(v)) for v in row])


def significance_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Welch's two-sample t-test; returns (t statistic, two-sided p-value)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two samples per side")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(2.0 * sps.t.sf(abs(t), dof))
