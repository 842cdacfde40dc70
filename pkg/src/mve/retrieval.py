"""Two-stage retrieval: per-embedding candidate generation over the inverted
file, pruned union of the per-embedding document sets, and exact MaxSim
reranking.

Pruning only limits the first stage. The ordering strategy decides which
query embeddings run candidate generation; the reranker always scores with
the complete query representation. Every tie anywhere (probe choice, top-k'
cut, final ranking) breaks toward the lowest id, which makes runs bitwise
reproducible regardless of thread interleaving.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import AbstractSet, Sequence

import numpy as np

from .core import Lexicon, QueryEncoder, QueryRepresentation, TokenKind
from .errors import ConsistencyError, InvalidConfigError, InvalidInputError
from .index import EmbeddingStore, IvfIndex


class Strategy(str, enum.Enum):
    """Query-embedding orderings for the first stage."""

    FIRST = "first"  # order of occurrence: CLS, query tokens, masked tokens
    ICF = "icf"  # ascending collection frequency, specials last
    IDF = "idf"  # descending inverse document frequency, specials last


@dataclass(frozen=True)
class PruningConfig:
    """First-stage knobs: ordering strategy, embeddings processed, ANN cut,
    and probe width."""

    strategy: Strategy
    p: int
    k_prime: int
    n_probe: int

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        except ValueError as exc:
            raise InvalidConfigError(
                f"strategy must be one of {[s.value for s in Strategy]}, got {self.strategy!r}"
            ) from exc
        if self.p < 1:
            raise InvalidConfigError(f"p must be >= 1, got {self.p}")
        if self.k_prime < 1:
            raise InvalidConfigError(f"k_prime must be >= 1, got {self.k_prime}")
        if self.n_probe < 1:
            raise InvalidConfigError(f"n_probe must be >= 1, got {self.n_probe}")


@dataclass
class CandidateSet:
    """First-stage output: candidate doc ids with per-embedding provenance.

    ``provenance[doc_id]`` holds the 1-based ranks, in processed order, of the
    query embeddings whose candidate generation retrieved the document.
    """

    provenance: dict[str, frozenset[int]]

    @property
    def docs(self) -> set[str]:
        return set(self.provenance)

    def __len__(self) -> int:
        return len(self.provenance)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.provenance


@dataclass(frozen=True)
class Ranking:
    """Scored documents, deepest first: descending score, ties by ascending
    doc id, truncated to depth ``k``."""

    entries: tuple[tuple[str, float], ...]
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidConfigError(f"ranking depth must be >= 1, got {self.k}")
        if len(self.entries) > self.k:
            raise InvalidInputError("ranking holds more entries than its depth")
        seen = set()
        previous: tuple[float, str] | None = None
        for doc_id, score in self.entries:
            if doc_id in seen:
                raise InvalidInputError(f"duplicate doc id {doc_id!r} in ranking")
            seen.add(doc_id)
            key = (-score, doc_id)
            if previous is not None and key < previous:
                raise InvalidInputError("ranking violates the (score desc, doc id asc) order")
            previous = key

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def order_embeddings(
    query: QueryRepresentation, lexicon: Lexicon, strategy: Strategy | str
) -> list[int]:
    """Permutation of query positions in first-stage processing order.

    FIRST keeps the order of occurrence. ICF sorts wordpieces by ascending
    collection frequency and IDF by descending smoothed idf (both stable, so
    equal keys keep occurrence order); under either, specials follow the
    wordpieces, CLS first and then the masked tokens in occurrence order.
    Tokens missing from the lexicon count as cf = 0, i.e. highest priority.
    """
    strategy = Strategy(strategy)
    positions = list(range(query.q_len))
    if strategy is Strategy.FIRST:
        return positions
    wordpieces = [i for i in positions if query.tokens[i].kind is TokenKind.WORDPIECE]
    cls = [i for i in positions if query.tokens[i].kind is TokenKind.CLS]
    masks = [i for i in positions if query.tokens[i].kind is TokenKind.MASK]
    if strategy is Strategy.ICF:
        wordpieces.sort(key=lambda i: lexicon.cf(query.tokens[i].id))
    else:
        wordpieces.sort(key=lambda i: -lexicon.idf(query.tokens[i].id))
    return wordpieces + cls + masks


def ann_candidates(
    index: IvfIndex, phi: np.ndarray, k_prime: int, n_probe: int
) -> tuple[np.ndarray, set[str]]:
    """Approximate nearest neighbours of one query embedding.

    Probes the ``n_probe`` centroids most similar to ``phi``, scans their
    lists with exact dot products, and keeps the ``k_prime`` best embedding
    ids (score descending, ties by ascending id). Returns those ids together
    with the deduplicated set of owning doc ids. Probe scores only select the
    hits; they are never surfaced as ranking scores.
    """
    phi = np.asarray(phi, dtype=np.float32)
    if phi.shape != (index.dim,):
        raise InvalidInputError(f"query embedding has shape {phi.shape}, expected ({index.dim},)")
    if k_prime < 1:
        raise InvalidConfigError(f"k_prime must be >= 1, got {k_prime}")
    if not (1 <= n_probe <= index.n_list):
        raise InvalidConfigError(
            f"n_probe must be between 1 and n_list={index.n_list}, got {n_probe}"
        )
    centroid_sims = index.centroids.vectors @ phi
    probed = np.argsort(-centroid_sims, kind="stable")[:n_probe]
    ids = np.concatenate([index.lists[c] for c in probed])
    if ids.size == 0:
        return ids, set()
    scores = index.store.vectors[ids] @ phi
    keep = np.lexsort((ids, -scores))[:k_prime]
    hits = ids[keep]
    doc_numbers = np.unique(index.store.doc_of[hits])
    return hits, {index.store.doc_ids[n] for n in doc_numbers}


def pruned_union(per_embedding: Sequence[AbstractSet[str]], p: int) -> CandidateSet:
    """Union of the first ``p`` per-embedding document sets.

    With ``p`` equal to the number of sets this is the unpruned union.
    Provenance records, per document, every contributing embedding rank
    (1-based, in the processed order).
    """
    if p < 1:
        raise InvalidConfigError(f"p must be >= 1, got {p}")
    if p > len(per_embedding):
        raise InvalidConfigError(
            f"p={p} exceeds the {len(per_embedding)} per-embedding sets provided"
        )
    provenance: dict[str, set[int]] = {}
    for rank, docs in enumerate(per_embedding[:p], start=1):
        for doc_id in docs:
            provenance.setdefault(doc_id, set()).add(rank)
    return CandidateSet({doc: frozenset(ranks) for doc, ranks in provenance.items()})


def _maxsim_scores(
    query_embeddings: np.ndarray, token_matrix: np.ndarray, starts: np.ndarray
) -> np.ndarray:
    """MaxSim scores for documents packed back to back in ``token_matrix``.

    ``starts`` marks where each document's token block begins. Per query
    embedding the maximum dot product over the document's tokens is taken,
    then the maxima are accumulated in query order (sequentially, in float64,
    so equal inputs always reproduce the same score bit for bit).
    """
    sims = query_embeddings @ token_matrix.T
    maxima = np.maximum.reduceat(sims, starts, axis=1)
    return np.cumsum(maxima.astype(np.float64), axis=0)[-1]


def exact_score(query: QueryRepresentation, doc_embeddings: np.ndarray) -> float:
    """Exact MaxSim score of one document against the full query.

    Sum over all query embeddings of the maximum dot product against the
    document's embeddings. Pruning never applies here: every query position
    contributes, including CLS and the masked tokens.
    """
    doc = np.asarray(doc_embeddings, dtype=np.float32)
    if doc.ndim != 2 or doc.shape[0] == 0:
        raise InvalidInputError("document must have at least one embedding")
    if doc.shape[1] != query.dim:
        raise InvalidInputError(
            f"dimension mismatch: query {query.dim}, document {doc.shape[1]}"
        )
    return float(_maxsim_scores(query.embeddings, doc, np.array([0]))[0])


def score_documents(
    query: QueryRepresentation, store: EmbeddingStore, doc_numbers: np.ndarray
) -> np.ndarray:
    """Exact MaxSim scores for many stored documents in one pass."""
    doc_numbers = np.asarray(doc_numbers, dtype=np.int64)
    if doc_numbers.size == 0:
        return np.empty(0, dtype=np.float64)
    starts = store.doc_offsets[doc_numbers, 0]
    lengths = store.doc_offsets[doc_numbers, 1]
    out_starts = np.zeros(len(doc_numbers), dtype=np.int64)
    out_starts[1:] = np.cumsum(lengths)[:-1]
    token_rows = (
        np.arange(int(lengths.sum())) - np.repeat(out_starts, lengths) + np.repeat(starts, lengths)
    )
    return _maxsim_scores(query.embeddings, store.vectors[token_rows], out_starts)


def rerank(
    candidates: CandidateSet, query: QueryRepresentation, store: EmbeddingStore, k: int
) -> Ranking:
    """Score every candidate exactly and keep the best ``k``.

    Descending score; ties break by ascending doc id.
    """
    if k < 1:
        raise InvalidConfigError(f"k must be >= 1, got {k}")
    doc_ids = sorted(candidates.docs)
    if not doc_ids:
        return Ranking(entries=(), k=k)
    numbers = []
    for doc_id in doc_ids:
        number = store.index_of(doc_id)
        if number is None:
            raise ConsistencyError(f"candidate doc {doc_id!r} is not in the store")
        numbers.append(number)
    scores = score_documents(query, store, np.array(numbers, dtype=np.int64))
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))[:k]
    return Ranking(entries=tuple((doc_ids[i], float(scores[i])) for i in order), k=k)


def search(
    query_text: str,
    index: IvfIndex,
    lexicon: Lexicon,
    encoder: QueryEncoder,
    config: PruningConfig,
    k: int,
) -> tuple[Ranking, CandidateSet]:
    """End-to-end search for one query.

    Encodes and orders the query embeddings, runs candidate generation for
    the first ``config.p`` of them, unions the per-embedding document sets,
    and reranks the union with the full query representation. Returns the
    ranking and the candidate set (the latter feeds the retrieved-count
    metrics).
    """
    query = encoder.encode(query_text)
    if config.p > query.q_len:
        raise InvalidConfigError(f"p={config.p} exceeds q_len={query.q_len}")
    ordering = order_embeddings(query, lexicon, config.strategy)
    per_embedding = [
        ann_candidates(index, query.embeddings[position], config.k_prime, config.n_probe)[1]
        for position in ordering[: config.p]
    ]
    candidates = pruned_union(per_embedding, config.p)
    ranking = rerank(candidates, query, index.store, k)
    return ranking, candidates
