import numpy as np
import pytest

from cmlm_distill.gradcheck import MICRO
from cmlm_distill.text import SentencePair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return MICRO


def random_pairs(n, rng, vocab_size=20, max_len=12, min_len=1):
    pairs = []
    for i in range(n):
        m, k = rng.integers(min_len, max_len + 1, size=2)
        pairs.append(SentencePair(tuple(int(x) for x in rng.integers(7, vocab_size, size=m)),
                                  tuple(int(x) for x in rng.integers(7, vocab_size, size=k)), i))
    return pairs


# One line per acceptance criterion, filled in by test_acceptance.py and
# printed at the end of the session.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
