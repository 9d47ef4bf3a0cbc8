import numpy as np
import pytest
import torch

from elenhance.corpus import CorpusConfig, build_corpus

torch.set_num_threads(1)

TINY_CORPUS = dict(
    n_parallel=12,
    split_counts=(6, 3, 3),
    n_pool_speakers=8,
    n_pool_sentences=10,
    n_synthetic_el=10,
)

# small models so pipeline plumbing tests run in seconds
TINY_PIPELINE = {
    "seed": 3,
    "corpus": TINY_CORPUS,
    "recognition": {
        "model": {"d_model": 32, "enc_layers": 1, "dec_layers": 1, "ff": 64, "heads": 2},
        "stage1": {"epochs": 1, "warmup_steps": 0},
        "stage2": {"epochs": 1},
        "stage3": {"epochs": 1},
    },
    "units": {"k": 8},
    "synthesis": {"model": {"channels": 16, "layers": 2}, "pretrain": {"steps": 3}, "adapt": {"steps": 2}},
    "alignment": {
        "model": {"d_model": 32, "enc_layers": 1, "dec_layers": 1, "ff": 64, "heads": 2},
        "pretrain": {"epochs": 1, "warmup_steps": 0},
        "ft_synthetic": {"epochs": 1},
        "ft_target": {"epochs": 1},
    },
    "evaluation": {"max_utterances": 2},
}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(CorpusConfig(**TINY_CORPUS), out)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
