import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from taxrank.policy import load_policy

sys.path.insert(0, str(Path(__file__).parent))


class OrthogonalEmbedding:
    """One basis vector per distinct token, so only identical tokens match."""

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.index: dict[str, int] = {}

    def embed(self, tokens):
        out = np.zeros((len(tokens), self.dim))
        for i, t in enumerate(tokens):
            j = self.index.setdefault(t, len(self.index))
            out[i, j % self.dim] = 1.0
        return out


@pytest.fixture(scope="session")
def policy2020():
    return load_policy("builtin:2020")


@pytest.fixture(scope="session")
def policy2021():
    return load_policy("builtin:2021")


@pytest.fixture
def orthogonal():
    return OrthogonalEmbedding()


@pytest.fixture
def script(tmp_path):
    """Write a small Python program and return its path."""

    def make(name: str, body: str) -> Path:
        path = tmp_path / name
        path.write_text(textwrap.dedent(body), encoding="utf-8")
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
