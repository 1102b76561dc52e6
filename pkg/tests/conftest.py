import numpy as np
import pytest

from rlfr.corpus import SyntheticTaskSpec, build_vocab, generate_corpus
from rlfr.policy import PolicyConfig, PolicyParams


@pytest.fixture(scope="session")
def small_task():
    return SyntheticTaskSpec(alphabet_size=6, n_entities=4, entity_rate=0.5, length_range=(2, 4))


@pytest.fixture(scope="session")
def small_vocab(small_task):
    return build_vocab(small_task)


@pytest.fixture(scope="session")
def small_corpus(small_task):
    return generate_corpus(small_task, 40, seed=3)


@pytest.fixture
def tiny_params(small_vocab):
    return PolicyParams.init(small_vocab, PolicyConfig(d_model=8, hidden=12, context=24), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one pass/fail line per acceptance criterion."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
