"""Domain types, tokenization, the deterministic token embedder, and
collection statistics.

Queries and documents are token sequences; every token id is mapped to one
unit-length float32 vector by a seeded generator, so the query and document
sides share the same embedding function and equal tokens always compare at
similarity 1.0. Collection statistics (per-token collection frequency and
document frequency) drive the embedding-ordering strategies in
:mod:`mve.retrieval`.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

CLS_ID = 0
MASK_ID = 1
FIRST_WORDPIECE_ID = 2
# Query tokens absent from the corpus vocabulary resolve to hash-derived ids
# in a range disjoint from any assigned id, so distinct unseen surfaces still
# embed to distinct vectors.
OOV_ID_BASE = 1 << 32

CLS_SURFACE = "[CLS]"
MASK_SURFACE = "[MASK]"

_SEED_MASK = (1 << 64) - 1


class TokenKind(enum.Enum):
    WORDPIECE = "wordpiece"
    CLS = "cls"
    MASK = "mask"


@dataclass(frozen=True)
class Token:
    """One token occurrence: vocabulary id, surface form, kind, and its
    0-based position within the sequence it belongs to."""

    id: int
    surface: str
    kind: TokenKind
    position: int


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, and drop punctuation characters.

    Chunks that consist only of punctuation disappear entirely.
    """
    words = []
    for chunk in text.lower().split():
        word = "".join(c for c in chunk if not unicodedata.category(c).startswith("P"))
        if word:
            words.append(word)
    return words


def oov_id(surface: str) -> int:
    """Deterministic id for a surface never seen in the corpus vocabulary."""
    digest = hashlib.blake2b(surface.encode("utf-8"), digest_size=8).digest()
    return OOV_ID_BASE + (int.from_bytes(digest, "little") >> 33)


class Vocabulary:
    """Stable surface-to-id assignment shared by documents and queries.

    Ids 0 and 1 are reserved for the CLS and MASK specials; wordpiece ids
    start at 2 in first-occurrence order, so the row order of an exported
    lexicon file reproduces the assignment exactly.
    """

    def __init__(self, surfaces: Iterable[str] = ()) -> None:
        self._ids: dict[str, int] = {}
        self._surfaces: list[str] = []
        for surface in surfaces:
            self.add(surface)

    def __len__(self) -> int:
        return len(self._surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._ids

    def add(self, surface: str) -> int:
        """Return the id for ``surface``, assigning the next free id if new."""
        token_id = self._ids.get(surface)
        if token_id is None:
            token_id = FIRST_WORDPIECE_ID + len(self._surfaces)
            self._ids[surface] = token_id
            self._surfaces.append(surface)
        return token_id

    def id_of(self, surface: str) -> int:
        """Resolve a surface to its id; unseen surfaces get a stable OOV id."""
        token_id = self._ids.get(surface)
        return oov_id(surface) if token_id is None else token_id

    def surface_of(self, token_id: int) -> str:
        return self._surfaces[token_id - FIRST_WORDPIECE_ID]

    def surfaces(self) -> Iterator[str]:
        """Surfaces in id order (id = 2 + row number)."""
        return iter(self._surfaces)


def tokenize_and_augment(query_text: str, q_len: int, vocab: Vocabulary) -> tuple[Token, ...]:
    """Tokenize a query and pad it to a fixed length.

    The result is ``[CLS]`` followed by the query wordpieces and then MASK
    padding up to exactly ``q_len`` tokens. Queries longer than ``q_len - 1``
    wordpieces are truncated and receive no padding.

    Args:
        query_text: Raw query string; must be non-empty after trimming.
        q_len: Fixed augmented length, at least 2.
        vocab: Corpus vocabulary used to resolve token ids.

    Raises:
        InvalidConfigError: If ``q_len < 2``.
        InvalidInputError: If the query is empty.
    """
    if q_len < 2:
        raise InvalidConfigError(f"q_len must be >= 2, got {q_len}")
    if not query_text.strip():
        raise InvalidInputError("query text is empty")
    words = tokenize(query_text)[: q_len - 1]
    tokens = [Token(CLS_ID, CLS_SURFACE, TokenKind.CLS, 0)]
    for word in words:
        tokens.append(Token(vocab.id_of(word), word, TokenKind.WORDPIECE, len(tokens)))
    while len(tokens) < q_len:
        tokens.append(Token(MASK_ID, MASK_SURFACE, TokenKind.MASK, len(tokens)))
    return tuple(tokens)


@functools.lru_cache(maxsize=1 << 16)
def _cached_vector(seed: int, token_id: int, dim: int) -> np.ndarray:
    sequence = np.random.SeedSequence([seed & _SEED_MASK, token_id])
    vector = np.random.default_rng(sequence).standard_normal(dim)
    norm = np.linalg.norm(vector)
    if norm == 0.0:  # unreachable for Gaussian draws, guards dim misuse
        raise InvalidConfigError("degenerate zero-norm embedding")
    unit = (vector / norm).astype(np.float32)
    unit.setflags(write=False)
    return unit


def token_vector(token_id: int, seed: int, dim: int) -> np.ndarray:
    """Unit-length float32 vector for one token id; pure in (seed, id, dim)."""
    if dim <= 0:
        raise InvalidConfigError(f"embedding dim must be positive, got {dim}")
    return _cached_vector(seed, token_id, dim)


def embed_tokens(tokens: Sequence[Token], seed: int, dim: int) -> np.ndarray:
    """Embed a token sequence row by row; shape ``(len(tokens), dim)``."""
    out = np.empty((len(tokens), dim), dtype=np.float32)
    for i, token in enumerate(tokens):
        out[i] = token_vector(token.id, seed, dim)
    return out


def _require_matrix(embeddings: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(embeddings)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"{what}: expected a non-empty 2-d embedding array")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{what}: embeddings contain NaN or Inf")
    return arr


@dataclass(frozen=True)
class QueryRepresentation:
    """Fixed-length augmented query: parallel tokens and embeddings."""

    tokens: tuple[Token, ...]
    embeddings: np.ndarray  # (q_len, dim) float32

    def __post_init__(self) -> None:
        arr = _require_matrix(self.embeddings, "query")
        object.__setattr__(self, "embeddings", arr)
        if len(self.tokens) != arr.shape[0]:
            raise InvalidInputError("query tokens and embeddings differ in length")
        kinds = [t.kind for t in self.tokens]
        if kinds[0] is not TokenKind.CLS or kinds.count(TokenKind.CLS) != 1:
            raise InvalidInputError("query must start with exactly one CLS token")
        first_mask = kinds.index(TokenKind.MASK) if TokenKind.MASK in kinds else len(kinds)
        if any(k is TokenKind.MASK for k in kinds[:first_mask]) or any(
            k is not TokenKind.MASK for k in kinds[first_mask:]
        ):
            raise InvalidInputError("MASK tokens must form a contiguous suffix")

    @property
    def q_len(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


@dataclass(frozen=True)
class DocumentEntry:
    """One document: id, per-token embeddings, and the parallel token ids."""

    doc_id: str
    embeddings: np.ndarray  # (num_tokens, dim) float32
    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        arr = _require_matrix(self.embeddings, f"document {self.doc_id!r}")
        object.__setattr__(self, "embeddings", arr)
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if len(self.token_ids) != arr.shape[0]:
            raise InvalidInputError(
                f"document {self.doc_id!r}: token ids and embeddings differ in length"
            )


@dataclass(frozen=True)
class QueryEncoder:
    """Query-side encoder: tokenize, augment, embed. Mirrors the document side."""

    vocab: Vocabulary
    dim: int
    q_len: int
    seed: int

    def encode(self, query_text: str) -> QueryRepresentation:
        tokens = tokenize_and_augment(query_text, self.q_len, self.vocab)
        return QueryRepresentation(tokens, embed_tokens(tokens, self.seed, self.dim))


@dataclass(frozen=True)
class LexiconEntry:
    cf: int  # total occurrences across the collection
    df: int  # number of documents containing the token


@dataclass(frozen=True)
class Lexicon:
    """Per-token collection statistics over a fixed corpus.

    Tokens without an entry (special tokens, unseen query tokens) count as
    cf = 0 and df = 0.
    """

    entries: dict[int, LexiconEntry]
    num_docs: int
    num_tokens: int

    def cf(self, token_id: int) -> int:
        entry = self.entries.get(token_id)
        return 0 if entry is None else entry.cf

    def df(self, token_id: int) -> int:
        entry = self.entries.get(token_id)
        return 0 if entry is None else entry.df

    def idf(self, token_id: int) -> float:
        """Smoothed inverse document frequency: log((N + 1) / (df + 1))."""
        return math.log((self.num_docs + 1) / (self.df(token_id) + 1))


def build_lexicon_from_ids(docs: Sequence[tuple[str, Sequence[int]]]) -> Lexicon:
    """Count collection and document frequencies over (doc_id, token ids) pairs."""
    if not docs:
        raise InvalidInputError("cannot build a lexicon from an empty corpus")
    cf: dict[int, int] = {}
    df: dict[int, int] = {}
    num_tokens = 0
    for doc_id, token_ids in docs:
        num_tokens += len(token_ids)
        for token_id in token_ids:
            if token_id < FIRST_WORDPIECE_ID:
                raise InvalidInputError(
                    f"document {doc_id!r} contains reserved token id {token_id}"
                )
            cf[token_id] = cf.get(token_id, 0) + 1
        for token_id in set(token_ids):
            df[token_id] = df.get(token_id, 0) + 1
    entries = {tid: LexiconEntry(cf=cf[tid], df=df[tid]) for tid in cf}
    return Lexicon(entries=entries, num_docs=len(docs), num_tokens=num_tokens)


def build_lexicon(corpus: Sequence[DocumentEntry]) -> Lexicon:
    """Count collection and document frequencies over a corpus.

    Raises:
        InvalidInputError: On an empty corpus, or if a document carries a
            reserved special-token id (specials never occur in documents).
    """
    return build_lexicon_from_ids([(doc.doc_id, doc.token_ids) for doc in corpus])


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read a corpus file: one ``doc_id<TAB>text`` line per document, UTF-8."""
    pairs: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected doc_id<TAB>text")
            doc_id, text = line.split("\t", 1)
            if not doc_id:
                raise InvalidInputError(f"{path}:{lineno}: empty doc id")
            if doc_id in seen:
                raise InvalidInputError(f"{path}:{lineno}: duplicate doc id {doc_id!r}")
            seen.add(doc_id)
            pairs.append((doc_id, text))
    if not pairs:
        raise InvalidInputError(f"{path}: corpus is empty")
    return pairs


def embed_corpus(
    pairs: Sequence[tuple[str, str]], seed: int, dim: int
) -> tuple[list[DocumentEntry], Vocabulary]:
    """Tokenize and embed raw documents, assigning vocabulary ids as they appear."""
    vocab = Vocabulary()
    entries: list[DocumentEntry] = []
    for doc_id, text in pairs:
        words = tokenize(text)
        if not words:
            raise InvalidInputError(f"document {doc_id!r} has no tokens")
        token_ids = tuple(vocab.add(w) for w in words)
        tokens = [
            Token(tid, w, TokenKind.WORDPIECE, pos)
            for pos, (tid, w) in enumerate(zip(token_ids, words))
        ]
        entries.append(DocumentEntry(doc_id, embed_tokens(tokens, seed, dim), token_ids))
    return entries, vocab


def save_lexicon(lexicon: Lexicon, vocab: Vocabulary, path: str | Path) -> None:
    """Write ``token<TAB>cf<TAB>df`` rows in id order.

    Row order is significant: reloading assigns ids 2, 3, ... in file order,
    which reproduces the original vocabulary assignment.
    """
    with open(path, "w", encoding="utf-8") as handle:
        for row, surface in enumerate(vocab.surfaces()):
            entry = lexicon.entries.get(FIRST_WORDPIECE_ID + row)
            if entry is None:
                raise InvalidInputError(f"vocabulary surface {surface!r} has no lexicon entry")
            handle.write(f"{surface}\t{entry.cf}\t{entry.df}\n")


def load_lexicon(path: str | Path, num_docs: int) -> tuple[Lexicon, Vocabulary]:
    """Read a lexicon file written by :func:`save_lexicon`.

    ``num_docs`` is not stored in the file and must be supplied (the index
    header carries it); ``num_tokens`` is recovered as the sum of cf values.
    """
    vocab = Vocabulary()
    entries: dict[int, LexiconEntry] = {}
    num_tokens = 0
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InvalidInputError(f"{path}:{lineno}: expected token<TAB>cf<TAB>df")
            surface, cf_text, df_text = parts
            try:
                cf, df = int(cf_text), int(df_text)
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: non-integer count") from exc
            if not (1 <= df <= min(cf, num_docs)):
                raise InvalidInputError(
                    f"{path}:{lineno}: counts violate 1 <= df <= min(cf, num_docs)"
                )
            token_id = vocab.add(surface)
            if token_id in entries:
                raise InvalidInputError(f"{path}:{lineno}: duplicate token {surface!r}")
            entries[token_id] = LexiconEntry(cf=cf, df=df)
            num_tokens += cf
    return Lexicon(entries=entries, num_docs=num_docs, num_tokens=num_tokens), vocab
