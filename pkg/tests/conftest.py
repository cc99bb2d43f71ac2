import sys

import pytest
import torch

from kanjibench.data import synthesize_fallback_dataset
from kanjibench.trainer import DATA_ENV


@pytest.fixture(autouse=True)
def _isolated(monkeypatch):
    # an exported dataset path must never leak into tests
    monkeypatch.delenv(DATA_ENV, raising=False)
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "glyphs"
    synthesize_fallback_dataset(48, seed=5, out=out)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
