"""Engine assembly: configuration, corpus-to-index building, and the on-disk
engine directory (config.json + lexicon.tsv + index.mvix)."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Lexicon,
    QueryEncoder,
    Vocabulary,
    build_lexicon,
    build_lexicon_from_ids,
    embed_corpus,
    load_lexicon,
    save_lexicon,
    tokenize,
)
from .errors import CorruptIndexError, InvalidConfigError, InvalidInputError
from .evaluation import Qrels, SweepTable, sweep
from .index import (
    EmbeddingStore,
    IvfIndex,
    build_ivf,
    default_n_list,
    load_index,
    save_index,
    train_centroids,
)
from .retrieval import CandidateSet, PruningConfig, Ranking, Strategy, search

CONFIG_FILE = "config.json"
LEXICON_FILE = "lexicon.tsv"
INDEX_FILE = "index.mvix"


@dataclass(frozen=True)
class EngineConfig:
    """Every engine knob in one place.

    ``n_list=None`` resolves at build time to floor(sqrt(total embeddings)),
    capped by the training sample size; ``p=None`` resolves to ``q_len``
    (no pruning). The config round-trips through ``config.json`` unchanged.
    """

    dim: int = 16
    q_len: int = 32
    k: int = 1000
    k_prime: int = 1000
    n_list: int | None = None
    n_probe: int = 10
    sample_fraction: float = 0.05
    iterations: int = 20
    seed: int = 42
    strategy: str = Strategy.ICF.value
    p: int | None = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "strategy", Strategy(self.strategy).value)
        except ValueError as exc:
            raise InvalidConfigError(
                f"strategy must be one of {[s.value for s in Strategy]}, got {self.strategy!r}"
            ) from exc
        if self.dim < 1:
            raise InvalidConfigError(f"dim must be >= 1, got {self.dim}")
        if self.q_len < 2:
            raise InvalidConfigError(f"q_len must be >= 2, got {self.q_len}")
        for name in ("k", "k_prime", "n_probe", "iterations"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_list is not None and self.n_list < 1:
            raise InvalidConfigError(f"n_list must be >= 1, got {self.n_list}")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise InvalidConfigError(
                f"sample_fraction must be in (0, 1], got {self.sample_fraction}"
            )
        if self.p is not None and not (1 <= self.p <= self.q_len):
            raise InvalidConfigError(f"p must be in [1, q_len={self.q_len}], got {self.p}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "EngineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)


@dataclass(frozen=True)
class Engine:
    """A built engine: immutable after construction, safe to share."""

    config: EngineConfig
    vocab: Vocabulary
    lexicon: Lexicon
    index: IvfIndex

    @property
    def encoder(self) -> QueryEncoder:
        return QueryEncoder(
            vocab=self.vocab,
            dim=self.config.dim,
            q_len=self.config.q_len,
            seed=self.config.seed,
        )

    def pruning(
        self,
        strategy: Strategy | str | None = None,
        p: int | None = None,
        k_prime: int | None = None,
        n_probe: int | None = None,
    ) -> PruningConfig:
        """Resolve a pruning config against this engine's defaults.

        ``n_probe`` is capped at ``n_list`` so the default probe width works
        on indexes with few partitions.
        """
        resolved_probe = n_probe if n_probe is not None else self.config.n_probe
        if resolved_probe >= 1:
            resolved_probe = min(resolved_probe, self.index.n_list)
        return PruningConfig(
            strategy=Strategy(strategy) if strategy is not None else Strategy(self.config.strategy),
            p=p if p is not None else (self.config.p or self.config.q_len),
            k_prime=k_prime if k_prime is not None else self.config.k_prime,
            n_probe=resolved_probe,
        )

    def search(
        self,
        query_text: str,
        *,
        strategy: Strategy | str | None = None,
        p: int | None = None,
        k: int | None = None,
        k_prime: int | None = None,
        n_probe: int | None = None,
    ) -> tuple[Ranking, CandidateSet]:
        config = self.pruning(strategy=strategy, p=p, k_prime=k_prime, n_probe=n_probe)
        return search(
            query_text, self.index, self.lexicon, self.encoder, config,
            k if k is not None else self.config.k,
        )

    def sweep(
        self,
        queries: Sequence[tuple[str, str]],
        qrels: Qrels,
        strategies: Sequence[Strategy | str] = (Strategy.FIRST, Strategy.ICF),
        p_values: Sequence[int] | None = None,
        *,
        alpha: float = 0.05,
        threads: int = 1,
    ) -> SweepTable:
        if p_values is None:
            p_values = range(1, self.config.q_len + 1)
        return sweep(
            queries,
            qrels,
            self.index,
            self.lexicon,
            self.encoder,
            strategies,
            p_values,
            k=self.config.k,
            k_prime=self.config.k_prime,
            n_probe=min(self.config.n_probe, self.index.n_list),
            alpha=alpha,
            threads=threads,
        )


def build_engine(
    corpus: Sequence[tuple[str, str]],
    config: EngineConfig,
    dump_docs: Sequence[tuple[str, np.ndarray]] | None = None,
) -> Engine:
    """Build lexicon, store, centroids, and inverted file from a raw corpus.

    With ``dump_docs`` the document embeddings come from an external dump
    (its dimension overrides ``config.dim``; the dump must cover exactly the
    corpus doc ids) while collection statistics still come from the corpus
    text. Without it, documents are embedded by the built-in token embedder.
    """
    if dump_docs is None:
        entries, vocab = embed_corpus(corpus, config.seed, config.dim)
        lexicon = build_lexicon(entries)
        store = EmbeddingStore.from_documents(entries)
    else:
        dims = {int(matrix.shape[1]) for _, matrix in dump_docs}
        if len(dims) != 1:
            raise InvalidInputError(f"mixed dimensions in embeddings dump: {sorted(dims)}")
        config = dataclasses.replace(config, dim=dims.pop())
        corpus_ids = {doc_id for doc_id, _ in corpus}
        dump_ids = [doc_id for doc_id, _ in dump_docs]
        if set(dump_ids) != corpus_ids or len(dump_ids) != len(set(dump_ids)):
            raise InvalidInputError("embeddings dump does not cover exactly the corpus doc ids")
        vocab = Vocabulary()
        id_lists = []
        for doc_id, text in corpus:
            words = tokenize(text)
            if not words:
                raise InvalidInputError(f"document {doc_id!r} has no tokens")
            id_lists.append((doc_id, [vocab.add(w) for w in words]))
        lexicon = build_lexicon_from_ids(id_lists)
        lengths = np.array([matrix.shape[0] for _, matrix in dump_docs], dtype=np.int64)
        starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        store = EmbeddingStore(
            vectors=np.concatenate([matrix for _, matrix in dump_docs], axis=0),
            doc_offsets=np.stack([starts, lengths], axis=1),
            doc_ids=tuple(dump_ids),
        )

    if config.n_list is None:
        sample_size = min(
            store.num_embeddings, math.ceil(config.sample_fraction * store.num_embeddings)
        )
        n_list = min(default_n_list(store.num_embeddings), sample_size)
    else:
        n_list = config.n_list
    config = dataclasses.replace(config, n_list=n_list)
    centroids = train_centroids(
        store, config.sample_fraction, n_list, config.iterations, config.seed
    )
    index = build_ivf(store, centroids)
    return Engine(config=config, vocab=vocab, lexicon=lexicon, index=index)


def save_engine(engine: Engine, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_FILE).write_text(engine.config.to_json(), encoding="utf-8")
    save_lexicon(engine.lexicon, engine.vocab, directory / LEXICON_FILE)
    save_index(engine.index, directory / INDEX_FILE)


def load_engine(directory: str | Path) -> Engine:
    """Load an engine directory, cross-checking config against the index."""
    directory = Path(directory)
    config_path = directory / CONFIG_FILE
    if not config_path.exists():
        raise InvalidInputError(f"{directory} is not an engine directory (missing {CONFIG_FILE})")
    try:
        config = EngineConfig.from_mapping(json.loads(config_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise InvalidConfigError(f"{config_path}: unreadable config: {exc}") from exc
    index = load_index(directory / INDEX_FILE)
    if config.dim != index.dim:
        raise CorruptIndexError(
            f"config dim {config.dim} disagrees with index dim {index.dim}"
        )
    if config.n_list is not None and config.n_list != index.n_list:
        raise CorruptIndexError(
            f"config n_list {config.n_list} disagrees with index n_list {index.n_list}"
        )
    lexicon, vocab = load_lexicon(directory / LEXICON_FILE, num_docs=index.store.num_docs)
    return Engine(config=config, vocab=vocab, lexicon=lexicon, index=index)
