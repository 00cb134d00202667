import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


class OracleDenoiser(torch.nn.Module):
    """Returns the stored x0 whatever it is asked; counts calls."""

    def __init__(self, x0):
        super().__init__()
        self.x0 = x0
        self.calls = 0

    def forward(self, x_t, y, t):
        self.calls += 1
        return self.x0.clone()


class CallCounter(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, *args):
        self.calls += 1
        return self.inner(*args)


@pytest.fixture
def oracle_denoiser():
    return OracleDenoiser


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    from corpus import build_corpus

    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
