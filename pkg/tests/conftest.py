import numpy as np
import pytest

from mve.engine import EngineConfig, build_engine
from mve.evaluation import Qrels

from synthdata import planted_fixture


TINY_CORPUS = [
    ("d1", "the quick brown fox jumps"),
    ("d2", "zebras have black and white stripes"),
    ("d3", "the sun rises in the east"),
]


@pytest.fixture(scope="session")
def tiny_engine():
    config = EngineConfig(
        dim=16, q_len=8, k=10, k_prime=100, n_list=2, n_probe=2,
        sample_fraction=1.0, iterations=10, seed=7,
    )
    return build_engine(TINY_CORPUS, config)


@pytest.fixture(scope="session")
def small_planted():
    """Planted-relevance corpus small enough for unit tests."""
    return planted_fixture(
        num_docs=400,
        num_queries=8,
        doc_len=10,
        vocab_size=300,
        common_band=(15, 80),
        seed=99,
    )


@pytest.fixture(scope="session")
def small_planted_engine(small_planted):
    config = EngineConfig(
        dim=32,
        q_len=small_planted.q_len,
        k=100,
        k_prime=50,
        n_list=16,
        n_probe=4,
        sample_fraction=0.5,
        iterations=15,
        seed=11,
    )
    return build_engine(small_planted.corpus, config)


@pytest.fixture(scope="session")
def small_planted_qrels(small_planted):
    return Qrels(small_planted.judgments)


def random_store(num_docs: int, dim: int, seed: int, min_len: int = 1, max_len: int = 6):
    """A store of unit-norm random embeddings with varied document lengths."""
    from mve.index import EmbeddingStore

    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=num_docs)
    vectors = rng.standard_normal((int(lengths.sum()), dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    return EmbeddingStore(
        vectors=vectors.astype(np.float32),
        doc_offsets=np.stack([starts, lengths], axis=1),
        doc_ids=tuple(f"d{i:04d}" for i in range(num_docs)),
    )
