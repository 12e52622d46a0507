import numpy as np
import pytest
import torch

from itervc.data import SyntheticCorpusSpec, TokenVocabulary, generate_synthetic_corpus
from itervc.features import NormalizationStats, fit_normalization_arrays, load_mels


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four speakers, five utterances each; fast enough to generate per session."""
    spec = SyntheticCorpusSpec(n_speakers=4, n_utterances_per_speaker=5, vocab_size=5,
                               tokens_per_utterance=(3, 5), seed=3, name="tiny")
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic_corpus(spec, root)
    return manifest, root


@pytest.fixture(scope="session")
def tiny_mels(tiny_corpus):
    return load_mels(tiny_corpus[0])


@pytest.fixture(scope="session")
def tiny_stats(tiny_mels):
    return fit_normalization_arrays(list(tiny_mels.values()))


@pytest.fixture
def unit_stats():
    return NormalizationStats(np.zeros(80), np.ones(80))


@pytest.fixture
def vocab4():
    return TokenVocabulary.letters(4)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


TINY_OVERRIDES = [
    "corpus.target.n_speakers=4", "corpus.target.n_utterances_per_speaker=4",
    "corpus.target.vocab_size=5", "corpus.target.tokens_per_utterance=[3, 4]",
    "corpus.base.n_speakers=3", "corpus.base.n_utterances_per_speaker=3",
    "corpus.base.vocab_size=5", "corpus.base.tokens_per_utterance=[3, 4]",
    "asr.max_steps=6", "asr.finetune_steps=4", "asr.eval_interval=3", "asr.warmup_steps=3",
    "asr.d_model=32", "asr.n_heads=2", "asr.ff_dim=64", "asr.batch_size=4",
    "eval_asr.max_steps=6", "speaker.steps=5", "speaker.channels=16", "speaker.embedding_dim=16",
    "vc.steps=4", "vc.eval_interval=2", "vc.channels=16", "vc.bottleneck=8",
    "vc.batch_size=4", "vc.n_val_pairs=4",
]


@pytest.fixture
def tiny_overrides():
    """Config overrides for a pipeline run that finishes in seconds."""
    return list(TINY_OVERRIDES)


# -- acceptance report -----------------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
