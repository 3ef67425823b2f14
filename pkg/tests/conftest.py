"""Shared fixtures: fixture corpus, toy encoder, synthetic training data."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emfr import bpe, corpus
from emfr.encoder import EncoderConfig, init
from emfr.tagger import TaggedDoc, TaggedSentence

FIXTURES = Path(__file__).parent / "fixtures"

# Sentinel planted in the non_open fixture; must never reach distributable output.
NON_OPEN_SENTINEL = "QQWITHHELDSENTINELZZ"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def fixture_docs() -> list[corpus.Document]:
    metadata = corpus.read_metadata_table(FIXTURES / "meta.tsv")
    files = [(p, corpus.detect_format(p)) for p in sorted((FIXTURES / "src").iterdir())]
    docs, errors = corpus.ingest(files, metadata)
    assert not errors, errors
    return docs


@pytest.fixture(scope="session")
def fixture_bpe(fixture_docs) -> bpe.BpeModel:
    return bpe.train((d.body for d in fixture_docs), target_vocab=600)


def toy_config(vocab_size: int, dtype: str = "float32",
               max_positions: int = 64, dropout: float = 0.0) -> EncoderConfig:
    return EncoderConfig(n_layers=2, hidden_dim=64, n_heads=2, ffn_dim=128,
                         vocab_size=vocab_size, max_positions=max_positions,
                         dropout=dropout, dtype=dtype)


@pytest.fixture()
def toy_model():
    return init(toy_config(vocab_size=300), seed=3)


# ---------------------------------------------------------------------------
# synthetic corpora

PRETRAIN_POOL = [
    "le chat dort pres du feu", "la riviere coule vers la mer",
    "un roi sage aime son peuple", "les vaisseaux quittent le port",
    "la nuit tombe sur la ville", "le vent souffle dans les bles",
    "un ami fidele vaut un tresor", "la pluie nourrit les jardins",
]


def synthetic_pretrain_sentences(n: int = 100, seed: int = 11) -> list[str]:
    """Sentences drawn from a small closed vocabulary; easy to memorize."""
    rng = np.random.default_rng(seed)
    words = sorted({w for s in PRETRAIN_POOL for w in s.split()})
    sentences = []
    for _ in range(n):
        if rng.random() < 0.5:
            sentences.append(PRETRAIN_POOL[int(rng.integers(len(PRETRAIN_POOL)))])
        else:
            k = int(rng.integers(5, 9))
            picks = rng.choice(len(words), size=k)
            sentences.append(" ".join(words[i] for i in picks))
    return sentences


TAG_SUFFIXES = {"a": "TAG_A", "o": "TAG_O", "u": "TAG_U", "e": "TAG_E"}
TAG_STEMS = ["bal", "mir", "kan", "tor", "sel", "dun", "fir", "gol",
             "ras", "pel", "vom", "zin"]


def synthetic_tagged_sentences(n: int, seed: int) -> list[TaggedSentence]:
    """Words whose final letter fully determines the tag."""
    rng = np.random.default_rng(seed)
    suffixes = sorted(TAG_SUFFIXES)
    sentences = []
    for _ in range(n):
        k = int(rng.integers(4, 9))
        tokens, tags = [], []
        for _ in range(k):
            stem = TAG_STEMS[int(rng.integers(len(TAG_STEMS)))]
            suffix = suffixes[int(rng.integers(len(suffixes)))]
            tokens.append(stem + suffix)
            tags.append(TAG_SUFFIXES[suffix])
        sentences.append(TaggedSentence(tokens, tags))
    return sentences


def tagged_doc(sentences: list[TaggedSentence], **meta: str) -> TaggedDoc:
    return TaggedDoc(meta={k: str(v) for k, v in meta.items()},
                     sentences=sentences)
