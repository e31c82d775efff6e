"""Sentence-level retrieval datasets built from reading-comprehension JSON.

A SQuAD-style file is parsed into (context, question, answer offset) records,
each context is split into sentences, and every question is linked to the
sentence containing its answer.  Identical sentence strings share one answer
id and identical question strings share one question id.
"""
from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

ABBREVIATIONS = frozenset(
    {"Mr.", "Mrs.", "Dr.", "St.", "U.S.", "e.g.", "i.e.", "etc.", "vs.", "No."})


class SchemaError(ValueError):
    """The input document does not follow the data -> paragraphs -> qas layout."""


@dataclass
class RCQuestion:
    qid: str
    question: str
    answer_start: int
    answer_text: str


@dataclass
class Passage:
    context: str
    questions: list


@dataclass
class QAPair:
    question_id: str
    question: str
    answer_id: int
    answer: str
    label: bool = True


@dataclass
class DatasetStats:
    num_questions: int
    num_answers: int
    num_pairs: int
    answers_per_question: float
    questions_per_answer: float
    num_candidates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RetrievalDataset:
    """Unique questions, unique candidate answers and the many-to-many links between them.

    ``answers`` is the candidate pool; it may hold sentences no question points to.
    """

    questions: dict = field(default_factory=dict)      # question id -> text
    answers: dict = field(default_factory=dict)        # answer id -> text
    pairs: list = field(default_factory=list)          # (question id, answer id)
    skipped: int = field(default=0, compare=False)     # records dropped during ingestion

    def __post_init__(self):
        seen = set()
        for qid, aid in self.pairs:
            if qid not in self.questions or aid not in self.answers:
                raise ValueError(f"pair ({qid!r}, {aid!r}) references an unknown id")
            if (qid, aid) in seen:
                raise ValueError(f"duplicate pair ({qid!r}, {aid!r})")
            seen.add((qid, aid))

    def __len__(self) -> int:
        return len(self.pairs)

    def matched_answers(self) -> dict:
        """Question id -> set of matched answer ids."""
        out: dict = {qid: set() for qid in self.questions}
        for qid, aid in self.pairs:
            out[qid].add(aid)
        return out

    def matched_questions(self) -> dict:
        out: dict = {aid: set() for aid in self.answers}
        for qid, aid in self.pairs:
            out[aid].add(qid)
        return out

    def answer_ids(self) -> list:
        return sorted(self.answers)

    def restrict(self, question_ids=None, answer_ids=None, keep_pool: bool = False
                 ) -> "RetrievalDataset":
        """Sub-dataset over the given ids; the pool shrinks to linked answers unless ``keep_pool``."""
        qset = set(self.questions) if question_ids is None else set(question_ids)
        aset = set(self.answers) if answer_ids is None else set(answer_ids)
        pairs = [(q, a) for q, a in self.pairs if q in qset and a in aset]
        linked_q = {q for q, _ in pairs}
        linked_a = {a for _, a in pairs}
        pool = aset if keep_pool else linked_a
        return RetrievalDataset(
            {q: t for q, t in self.questions.items() if q in linked_q},
            {a: t for a, t in self.answers.items() if a in pool},
            pairs,
        )

    def records(self) -> list[QAPair]:
        return [QAPair(q, self.questions[q], a, self.answers[a]) for q, a in self.pairs]


# ---------------------------------------------------------------- parsing


def _require(node, key, path, kind):
    if not isinstance(node, dict) or key not in node:
        raise SchemaError(f"{path}: missing field '{key}'")
    value = node[key]
    if not isinstance(value, kind):
        raise SchemaError(f"{path}.{key}: expected {kind.__name__}")
    return value


def parse_rc_json(path) -> list[Passage]:
    """Read a SQuAD v1.1-layout file; the first listed answer of each question is used."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc})") from exc
    passages = []
    for i, article in enumerate(_require(doc, "data", "$", list)):
        for j, para in enumerate(_require(article, "paragraphs", f"$.data[{i}]", list)):
            where = f"$.data[{i}].paragraphs[{j}]"
            context = _require(para, "context", where, str)
            items = []
            for k, qa in enumerate(_require(para, "qas", where, list)):
                qpath = f"{where}.qas[{k}]"
                question = _require(qa, "question", qpath, str)
                answers = _require(qa, "answers", qpath, list)
                if not answers:
                    raise SchemaError(f"{qpath}.answers: empty")
                start = _require(answers[0], "answer_start", f"{qpath}.answers[0]", int)
                text = _require(answers[0], "text", f"{qpath}.answers[0]", str)
                qid = str(qa.get("id", f"{i}-{j}-{k}"))
                items.append(RCQuestion(qid, question, start, text))
            passages.append(Passage(context, items))
    return passages


# ---------------------------------------------------------------- sentences

_TERMINATOR = re.compile(r"[.!?]")


def _is_abbreviation(context: str, end: int) -> bool:
    """Whether the word ending at ``end`` (inclusive, a period) is a listed abbreviation."""
    start = end
    while start > 0 and not context[start - 1].isspace():
        start -= 1
    return context[start:end + 1] in ABBREVIATIONS


def split_sentences(context: str) -> list[tuple[str, tuple[int, int]]]:
    """Split at . ! ? followed by whitespace and then an uppercase letter or the end.

    Returns ``(sentence, (start, end))`` with half-open, ordered character ranges
    that together cover every non-whitespace character of ``context``.
    """
    out = []
    n = len(context)
    start = 0
    for match in _TERMINATOR.finditer(context):
        i = match.start()
        j = i + 1
        if j < n and not context[j].isspace():
            continue
        k = j
        while k < n and context[k].isspace():
            k += 1
        if k < n and not context[k].isupper():
            continue
        if context[i] == "." and _is_abbreviation(context, i):
            continue
        _emit_sentence(context, start, j, out)
        start = j
    _emit_sentence(context, start, n, out)
    return out


def _emit_sentence(context: str, start: int, end: int, out: list) -> None:
    while start < end and context[start].isspace():
        start += 1
    while end > start and context[end - 1].isspace():
        end -= 1
    if start < end:
        out.append((context[start:end], (start, end)))


# ---------------------------------------------------------------- ReQA


def _sentence_for_offset(sentences, offset: int):
    """The sentence whose range (extended over the following gap) holds ``offset``."""
    chosen = None
    for sentence, (start, _end) in sentences:
        if start <= offset:
            chosen = sentence
        else:
            break
    return chosen


def build_reqa(passages: Sequence[Passage],
               splitter: Callable = split_sentences,
               candidates: str = "answers") -> RetrievalDataset:
    """Link each question to its answer sentence and deduplicate by exact string.

    ``candidates="all-sentences"`` also puts every unlinked sentence in the pool.
    """
    if candidates not in ("answers", "all-sentences"):
        raise ValueError("candidates must be 'answers' or 'all-sentences'")
    questions: dict = {}
    question_by_text: dict = {}
    answers: dict = {}
    answer_by_text: dict = {}
    pairs: list = []
    seen_pairs: set = set()
    skipped = 0

    def answer_id(text: str) -> int:
        if text not in answer_by_text:
            answer_by_text[text] = len(answers)
            answers[answer_by_text[text]] = text
        return answer_by_text[text]

    for passage in passages:
        sentences = splitter(passage.context)
        if candidates == "all-sentences":
            for sentence, _ in sentences:
                answer_id(sentence)
        for rc in passage.questions:
            offset = rc.answer_start
            sentence = None
            if 0 <= offset < len(passage.context):
                sentence = _sentence_for_offset(sentences, offset)
            if sentence is None or not rc.question.strip():
                skipped += 1
                log.warning("skipping question %s: answer offset %d outside context",
                            rc.qid, offset)
                continue
            if rc.question not in question_by_text:
                question_by_text[rc.question] = rc.qid
                questions[rc.qid] = rc.question
            qid = question_by_text[rc.question]
            link = (qid, answer_id(sentence))
            if link not in seen_pairs:
                seen_pairs.add(link)
                pairs.append(link)
    return RetrievalDataset(questions, answers, pairs, skipped)


def dataset_stats(ds: RetrievalDataset) -> DatasetStats:
    n_pairs = len(ds.pairs)
    n_q = len({q for q, _ in ds.pairs})
    n_a = len({a for _, a in ds.pairs})
    return DatasetStats(
        num_questions=n_q,
        num_answers=n_a,
        num_pairs=n_pairs,
        answers_per_question=round(n_pairs / n_q, 2) if n_q else 0.0,
        questions_per_answer=round(n_pairs / n_a, 2) if n_a else 0.0,
        num_candidates=len(ds.answers),
    )


# ---------------------------------------------------------------- splits & batches


def make_splits(ds: RetrievalDataset, ratio: float = 0.9, seed: int = 0,
                ) -> tuple[RetrievalDataset, RetrievalDataset]:
    """Seeded split by question; answers may end up on both sides."""
    if not ds.questions:
        raise ValueError("cannot split an empty dataset")
    qids = sorted(ds.questions)
    order = np.random.default_rng(seed).permutation(len(qids))
    n_train = int(len(qids) * ratio)
    train_q = [qids[i] for i in order[:n_train]]
    val_q = [qids[i] for i in order[n_train:]]
    return ds.restrict(question_ids=train_q), ds.restrict(question_ids=val_q)


def batch_iter(ds: RetrievalDataset, batch_size: int, seed: int, epoch: int
               ) -> Iterator[list[tuple]]:
    """Yield aligned batches of (question id, answer id) pairs for in-batch negatives.

    A pair whose question or answer already sits in the forming batch is deferred
    to a later one.  Once nothing else is left, deferred pairs may repeat an
    answer (never a question).  The final incomplete batch is dropped.
    """
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    if batch_size > len(ds.pairs):
        raise ValueError(f"batch size {batch_size} exceeds the {len(ds.pairs)} available pairs")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds.pairs))
    pending = deque(ds.pairs[i] for i in order)
    deferred: deque = deque()
    while True:
        batch, seen_q, seen_a = [], set(), set()

        def take(pair) -> bool:
            if pair[0] in seen_q or pair[1] in seen_a:
                return False
            batch.append(pair)
            seen_q.add(pair[0])
            seen_a.add(pair[1])
            return True

        for _ in range(len(deferred)):
            pair = deferred.popleft()
            if len(batch) >= batch_size or not take(pair):
                deferred.append(pair)
        while len(batch) < batch_size and pending:
            pair = pending.popleft()
            if not take(pair):
                deferred.append(pair)
        if len(batch) < batch_size:
            # only conflicting pairs remain: allow repeated answers
            for _ in range(len(deferred)):
                pair = deferred.popleft()
                if len(batch) < batch_size and pair[0] not in seen_q:
                    batch.append(pair)
                    seen_q.add(pair[0])
                else:
                    deferred.append(pair)
        if len(batch) < batch_size:
            return
        yield batch


# ---------------------------------------------------------------- files


def write_jsonl(ds: RetrievalDataset, path) -> None:
    """One record per pair, then pool-only sentences with a null question."""
    linked = {a for _, a in ds.pairs}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in ds.records():
            fh.write(json.dumps({"question_id": rec.question_id, "question": rec.question,
                                 "answer_id": rec.answer_id, "answer": rec.answer},
                                ensure_ascii=False) + "\n")
        for aid in sorted(set(ds.answers) - linked):
            fh.write(json.dumps({"question_id": None, "question": None, "answer_id": aid,
                                 "answer": ds.answers[aid]}, ensure_ascii=False) + "\n")


def read_jsonl(path) -> RetrievalDataset:
    questions, answers, pairs, seen = {}, {}, [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                aid, answer = rec["answer_id"], rec["answer"]
                qid, question = rec["question_id"], rec["question"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad record ({exc})") from exc
            if answers.setdefault(aid, answer) != answer:
                raise SchemaError(f"{path}:{lineno}: answer id {aid} has two texts")
            if qid is None:
                continue
            if questions.setdefault(qid, question) != question:
                raise SchemaError(f"{path}:{lineno}: question id {qid} has two texts")
            if (qid, aid) not in seen:
                seen.add((qid, aid))
                pairs.append((qid, aid))
    return RetrievalDataset(questions, answers, pairs)


def write_stats(stats: DatasetStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
