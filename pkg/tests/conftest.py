import numpy as np
import pytest

from tinyldm.data import build_vocab, mixed_corpus, synth_bridges
from tinyldm.networks import ModelBundle, ModelConfig
from tinyldm.scheduler import build_schedule


@pytest.fixture(scope="session")
def small_corpus():
    return mixed_corpus(12, seed=3)


@pytest.fixture(scope="session")
def style_corpus():
    return synth_bridges(6, "coral", seed=4)


@pytest.fixture(scope="session")
def vocab(small_corpus):
    return build_vocab(small_corpus.captions(), size=256)


@pytest.fixture
def bundle(vocab):
    """Untrained default-size bundle flagged as pretrained so trainers accept it."""
    b = ModelBundle.create(ModelConfig(), vocab.copy(), seed=11)
    b.meta.update(vae_steps=1, denoiser_steps=1)
    return b


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


def snapshot(params):
    return {k: np.array(p.data, copy=True) for k, p in params.items()}


def changed(before, params):
    return {k for k, p in params.items() if k not in before or not np.array_equal(before[k], p.data)}


# Acceptance verdicts, criterion number -> (passed, title, detail); printed after the run.
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
