"""Seeded synthetic one-to-many retrieval data.

Every answer is a template sentence describing one made-up entity by a name
and four attributes.  Its questions are paraphrases: each picks a question
template, addresses the entity through some of its attributes and swaps words
for synonyms.  Several distinct questions therefore share one answer, and the
word overlap between a question and its answer is only partial.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RetrievalDataset
from .evaluation import one_to_many_subset

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gr", "kl", "pr", "st", "tr", "sk")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "n", "r", "s", "l", "m", "k")

SLOTS = ("adj", "kind", "place", "verb", "obj")
SLOT_SIZES = {"adj": 40, "kind": 30, "place": 60, "verb": 30, "obj": 60}
SYNONYMS_PER_WORD = 2

ANSWER_TEMPLATES = (
    "{name} is a {adj} {kind} in {place} that {verb} the {obj} .",
    "in {place} , the {adj} {kind} called {name} {verb} the {obj} .",
    "the {kind} {name} , known to be {adj} , {verb} the {obj} near {place} .",
)
QUESTION_TEMPLATES = (
    "which {kind} in {place} {verb} the {obj} ?",
    "what is the name of the {adj} {kind} from {place} ?",
    "what does the {adj} {kind} {verb} ?",
    "where is the {kind} that {verb} the {obj} ?",
    "which {adj} {kind} {verb} a {obj} ?",
    "name the {kind} of {place} which {verb} {obj} .",
    "who {verb} the {obj} in {place} ?",
    "tell me about the {adj} thing in {place} that {verb} {obj} ?",
)


@dataclass
class SyntheticSplit:
    train: RetrievalDataset
    test: RetrievalDataset
    questions_per_answer: dict

    def merged(self) -> RetrievalDataset:
        return RetrievalDataset({**self.train.questions, **self.test.questions},
                                dict(self.train.answers), self.train.pairs + self.test.pairs)

    def test_subset(self, min_questions: int) -> RetrievalDataset:
        """Test questions of answers with at least ``min_questions`` questions overall.

        The candidate pool shrinks to those answers, as in ``one_to_many_subset``.
        """
        kept = one_to_many_subset(self.merged(), min_questions).answers
        return self.test.restrict(answer_ids=kept)


def _pseudo_words(rng: np.random.Generator, count: int, taken: set) -> list[str]:
    words = []
    while len(words) < count:
        syllables = rng.integers(2, 4)
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       + _CODAS[rng.integers(len(_CODAS))] for _ in range(syllables))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def generate(num_answers: int = 200, min_questions: int = 1, max_questions: int = 8,
             test_fraction: float = 0.25, seed: int = 0) -> SyntheticSplit:
    """Answers with 1..8 paraphrased questions; a share of each answer's paraphrases is held out.

    An answer with ``n`` questions contributes ``round(test_fraction * n)`` of them
    to the test split.  Both splits use the full answer pool.
    """
    if not 1 <= min_questions <= max_questions:
        raise ValueError("need 1 <= min_questions <= max_questions")
    rng = np.random.default_rng(seed)
    taken: set = set()
    names = _pseudo_words(rng, num_answers, taken)
    lexicon = {slot: _pseudo_words(rng, size, taken) for slot, size in SLOT_SIZES.items()}
    synonyms = {slot: {w: [w, *_pseudo_words(rng, SYNONYMS_PER_WORD, taken)] for w in words}
                for slot, words in lexicon.items()}

    facts, used = [], set()
    while len(facts) < num_answers:
        fact = {slot: lexicon[slot][rng.integers(SLOT_SIZES[slot])] for slot in SLOTS}
        key = (fact["kind"], fact["place"], fact["verb"], fact["obj"])
        if key in used:
            continue
        used.add(key)
        fact["name"] = names[len(facts)]
        facts.append(fact)

    answers, train_q, test_q, train_pairs, test_pairs = {}, {}, {}, [], []
    per_answer = {}
    seen_text: set = set()
    for aid, fact in enumerate(facts):
        answers[aid] = ANSWER_TEMPLATES[rng.integers(len(ANSWER_TEMPLATES))].format(**fact)
        wanted = int(rng.integers(min_questions, max_questions + 1))
        texts = []
        attempts = 0
        while len(texts) < wanted and attempts < 200:
            attempts += 1
            template = QUESTION_TEMPLATES[rng.integers(len(QUESTION_TEMPLATES))]
            words = {slot: synonyms[slot][fact[slot]][rng.integers(SYNONYMS_PER_WORD + 1)]
                     for slot in SLOTS}
            text = template.format(**words)
            if text not in seen_text:
                seen_text.add(text)
                texts.append(text)
        per_answer[aid] = len(texts)
        held_out = int(round(test_fraction * len(texts)))
        for i, text in enumerate(texts):
            qid = f"s{aid}-{i}"
            if i >= len(texts) - held_out:
                test_q[qid] = text
                test_pairs.append((qid, aid))
            else:
                train_q[qid] = text
                train_pairs.append((qid, aid))
    return SyntheticSplit(RetrievalDataset(train_q, dict(answers), train_pairs),
                          RetrievalDataset(test_q, dict(answers), test_pairs), per_answer)
