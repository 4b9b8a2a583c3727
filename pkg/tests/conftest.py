import numpy as np
import pytest

from readfuse import data, seq2seq


@pytest.fixture(scope="session")
def toy():
    """A small toy corpus with vocabularies, encoded pairs and synthetic external words."""
    spec = data.ToyTaskSpec(corpus_size=64, min_len=3, max_len=6, seed=11)
    pairs = data.generate_toy_corpus(spec)
    sv = data.build_vocabulary([s for s, _ in pairs], 200)
    tv = data.build_vocabulary([t for _, t in pairs], 200)
    enc = data.encode_pairs(pairs, sv, tv)
    triples = data.synthesize_dataset(enc, tv, seed=5)
    return spec, sv, tv, enc, triples


@pytest.fixture(scope="session")
def small_cfg(toy):
    _, sv, tv, _, _ = toy
    return seq2seq.ModelConfig(len(sv), len(tv), emb=8, hidden=8, attn=8, gate_hidden=6, disc_hidden=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
