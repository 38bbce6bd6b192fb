import numpy as np
import pytest

from cdnst.domain import ActionSequence, Choice, DomainCatalog


def catalog(domain, keyword_lists):
    return DomainCatalog(domain, tuple(Choice(f"{domain}{i}", tuple(k)) for i, k in enumerate(keyword_lists)))


def sequence(indices, domain="T", user="u", start=1, step=1):
    return ActionSequence.from_indices(user, domain, indices, [start + step * i for i in range(len(indices))])


@pytest.fixture
def worked_catalog():
    # o1={a}, o2={b}, o3={a,b}, o4={d,e}
    return catalog("S", [["a"], ["b"], ["a", "b"], ["d", "e"]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
