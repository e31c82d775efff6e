import numpy as np
import pytest

from endx import instrumentation
from endx.aggregator import AggregatorConfig
from endx.cross_attention import CrossAttentionConfig
from endx.data import RetrievalDataset
from endx.encoders import EncoderConfig, Vocabulary
from endx.model import EndxModel

TINY_QA = [
    ("q0", "where do owls sleep ?", 0, "owls sleep in hollow trees ."),
    ("q1", "what do owls eat ?", 1, "owls eat mice and small birds ."),
    ("q2", "when do owls hunt ?", 2, "owls hunt at night ."),
    ("q3", "where do bats sleep ?", 3, "bats sleep in caves upside down ."),
    ("q4", "what do bats eat ?", 4, "bats eat insects and fruit ."),
    ("q5", "how do bats find food ?", 5, "bats find food by echolocation ."),
    ("q6", "where do owls rest ?", 0, "owls sleep in hollow trees ."),
    ("q7", "when are owls active ?", 2, "owls hunt at night ."),
]


@pytest.fixture
def tiny_ds():
    questions = {q: t for q, t, _, _ in TINY_QA}
    answers = {a: t for _, _, a, t in TINY_QA}
    return RetrievalDataset(questions, answers, [(q, a) for q, _, a, _ in TINY_QA])


@pytest.fixture
def tiny_vocab(tiny_ds):
    return Vocabulary.build([*tiny_ds.questions.values(), *tiny_ds.answers.values()])


def small_model(vocab, seed=0, d=8, heads=2, layers=1, hops=2, dtype="float64", kind="transformer"):
    return EndxModel.initialize(vocab, EncoderConfig(kind=kind, layers=layers, d_model=d,
                                                     heads=heads),
                                AggregatorConfig(hops=hops), CrossAttentionConfig(heads=heads),
                                seed=seed, dtype=dtype)


@pytest.fixture
def tiny_model(tiny_vocab):
    return small_model(tiny_vocab)


@pytest.fixture(autouse=True)
def _clean_counters():
    instrumentation.reset()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_criteria: dict = {}
_CRITERION_OF: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = _CRITERION_OF.get(report.nodeid)
    if marker is not None:
        number, summary = marker
        ok = report.passed and _criteria.get(number, (True,))[0]
        _criteria[number] = (ok, summary)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERION_OF[item.nodeid] = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, summary = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {summary}")
