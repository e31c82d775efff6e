"""Process-wide call counters used to audit the inference path."""
import threading
from collections import Counter
from contextlib import contextmanager

_lock = threading.Lock()
_counts: Counter = Counter()

CROSS_ATTENTION = "cross_attention"
QUESTION_ENCODINGS = "question_encodings"
ANSWER_ENCODINGS = "answer_encodings"
INDEX_PRODUCTS = "index_products"


def bump(key: str, amount: int = 1) -> None:
    with _lock:
        _counts[key] += amount


def count(key: str) -> int:
    with _lock:
        return _counts[key]


def snapshot() -> dict:
    with _lock:
        return dict(_counts)


def reset() -> None:
    with _lock:
        _counts.clear()


@contextmanager
def watch():
    """Yield a dict that is filled with the counter deltas when the block exits."""
    before = snapshot()
    delta: dict = {}
    try:
        yield delta
    finally:
        after = snapshot()
        for key in set(before) | set(after):
            delta[key] = after.get(key, 0) - before.get(key, 0)
