import time
from dataclasses import dataclass

import numpy as np
import pytest

from formant_tts.data import CorpusConfig, generate_corpus
from formant_tts.model import FormantExcitationModel, ModelConfig
from formant_tts.training import TrainConfig, build_model, evaluate, train


@dataclass
class DeskRun:
    model: FormantExcitationModel
    initial_loss: float
    final_loss: float
    log: list
    seconds: float


@pytest.fixture(scope="session")
def desk_corpus():
    cfg = CorpusConfig()
    return cfg, generate_corpus(cfg)


def _desk_run(corpus, extended: bool) -> DeskRun:
    cfg = TrainConfig()
    model = build_model(ModelConfig(extended_query=extended), corpus, seed=0)
    initial = float(np.mean([b.total for b in evaluate(model, corpus, cfg)]))
    t0 = time.perf_counter()
    result = train(model, corpus, cfg)
    seconds = time.perf_counter() - t0
    final = float(np.mean([b.total for b in evaluate(model, corpus, cfg)]))
    return DeskRun(model, initial, final, result.log, seconds)


@pytest.fixture(scope="session")
def desk_extended(desk_corpus):
    return _desk_run(desk_corpus[1], extended=True)


@pytest.fixture(scope="session")
def desk_standard(desk_corpus):
    return _desk_run(desk_corpus[1], extended=False)


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one criterion's outcome before its assertion runs."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
