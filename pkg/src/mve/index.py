"""Document-embedding store, spherical k-means training, inverted-file
construction, and binary persistence.

The inverted file is coarse-only: every stored embedding sits, at full
precision, in the list of its nearest centroid by dot product. Probing a
subset of lists makes first-stage search approximate; probing all lists makes
it exact, which the tests rely on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .core import DocumentEntry
from .errors import CorruptIndexError, InvalidConfigError, InvalidInputError

INDEX_MAGIC = b"MVIX"
DUMP_MAGIC = b"MVED"
FORMAT_VERSION = 1

_SEED_MASK = (1 << 64) - 1
_ASSIGN_CHUNK = 8192


@dataclass(frozen=True)
class EmbeddingStore:
    """All document embeddings concatenated in corpus order.

    ``doc_offsets[i] == (start, length)`` locates document ``i`` inside
    ``vectors``; the global row number of an embedding is its embedding id.
    """

    vectors: np.ndarray  # (num_embeddings, dim) float32
    doc_offsets: np.ndarray  # (num_docs, 2) int64 rows of (start, length)
    doc_ids: tuple[str, ...]
    doc_of: np.ndarray = field(init=False, repr=False)  # embedding id -> doc number

    def __post_init__(self) -> None:
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        offsets = np.ascontiguousarray(self.doc_offsets, dtype=np.int64)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "doc_offsets", offsets)
        if vectors.ndim != 2 or vectors.shape[1] == 0:
            raise InvalidInputError("store vectors must be a (n, dim) array")
        if not np.isfinite(vectors).all():
            raise InvalidInputError("store vectors contain NaN or Inf")
        if offsets.ndim != 2 or offsets.shape[1] != 2 or offsets.shape[0] == 0:
            raise InvalidInputError("doc_offsets must be a non-empty (n, 2) array")
        if len(self.doc_ids) != offsets.shape[0]:
            raise InvalidInputError("doc_ids and doc_offsets differ in length")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise InvalidInputError("duplicate doc ids in store")
        starts, lengths = offsets[:, 0], offsets[:, 1]
        if (lengths < 1).any():
            raise InvalidInputError("every document must own at least one embedding")
        expected = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        if (starts != expected).any() or int(lengths.sum()) != vectors.shape[0]:
            raise InvalidInputError("doc offsets do not partition the vector block")
        object.__setattr__(self, "doc_of", np.repeat(np.arange(len(self.doc_ids)), lengths))
        object.__setattr__(self, "_index_of", {d: i for i, d in enumerate(self.doc_ids)})

    @classmethod
    def from_documents(cls, corpus: Sequence[DocumentEntry]) -> "EmbeddingStore":
        if not corpus:
            raise InvalidInputError("cannot build a store from an empty corpus")
        dims = {doc.embeddings.shape[1] for doc in corpus}
        if len(dims) != 1:
            raise InvalidInputError(f"mixed embedding dimensions in corpus: {sorted(dims)}")
        lengths = np.array([doc.embeddings.shape[0] for doc in corpus], dtype=np.int64)
        starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        vectors = np.concatenate([doc.embeddings for doc in corpus], axis=0)
        return cls(
            vectors=vectors,
            doc_offsets=np.stack([starts, lengths], axis=1),
            doc_ids=tuple(doc.doc_id for doc in corpus),
        )

    @property
    def num_embeddings(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def index_of(self, doc_id: str) -> int | None:
        return self._index_of.get(doc_id)  # type: ignore[attr-defined]

    def doc_vectors(self, doc_number: int) -> np.ndarray:
        start, length = self.doc_offsets[doc_number]
        return self.vectors[start : start + length]


@dataclass(frozen=True)
class Centroids:
    """Coarse quantizer: unit-length centroid vectors.

    ``objective_history`` records the mean assigned similarity at each
    training iteration; it is training metadata and is not persisted.
    """

    vectors: np.ndarray  # (n_list, dim) float32
    objective_history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise InvalidInputError("centroids must be a non-empty (n_list, dim) array")
        if not np.isfinite(vectors).all():
            raise InvalidInputError("centroids contain NaN or Inf")

    @property
    def n_list(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class IvfIndex:
    """Inverted file over an embedding store.

    ``lists[c]`` holds the embedding ids assigned to centroid ``c`` in
    ascending id order; vectors are resolved through the store, so the lists
    are a disjoint cover of it.
    """

    store: EmbeddingStore
    centroids: Centroids
    lists: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.centroids.dim != self.store.dim:
            raise InvalidInputError("centroid and store dimensions differ")
        if len(self.lists) != self.centroids.n_list:
            raise InvalidInputError("one inverted list per centroid required")
        lists = tuple(np.ascontiguousarray(l, dtype=np.int64) for l in self.lists)
        object.__setattr__(self, "lists", lists)
        joined = np.concatenate(lists) if lists else np.empty(0, dtype=np.int64)
        if joined.size != self.store.num_embeddings or (
            np.sort(joined) != np.arange(self.store.num_embeddings)
        ).any():
            raise InvalidInputError("inverted lists are not a disjoint cover of the store")

    @property
    def n_list(self) -> int:
        return self.centroids.n_list

    @property
    def dim(self) -> int:
        return self.store.dim


def default_n_list(num_embeddings: int) -> int:
    return max(1, int(math.isqrt(num_embeddings)))


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (matrix / norms).astype(np.float32)


def _kmeans_pp_init(sample: np.ndarray, n_list: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with squared chord distance 2 - 2*sim on unit vectors."""
    n = sample.shape[0]
    chosen = [int(rng.integers(n))]
    best_sim = sample @ sample[chosen[0]]
    while len(chosen) < n_list:
        weights = np.maximum(2.0 - 2.0 * best_sim.astype(np.float64), 0.0)
        weights[chosen] = 0.0
        total = weights.sum()
        if total <= 0.0:
            # All remaining points coincide with a centroid; take the lowest
            # index not yet chosen.
            taken = np.zeros(n, dtype=bool)
            taken[chosen] = True
            pick = int(np.flatnonzero(~taken)[0])
        else:
            cutpoints = np.cumsum(weights / total)
            pick = int(np.searchsorted(cutpoints, rng.random(), side="right"))
            pick = min(pick, n - 1)
        chosen.append(pick)
        best_sim = np.maximum(best_sim, sample @ sample[pick])
    return sample[np.array(chosen)].copy()


def train_centroids(
    store: EmbeddingStore,
    sample_fraction: float,
    n_list: int,
    iterations: int,
    seed: int,
) -> Centroids:
    """Train the coarse quantizer on a random sample of the stored embeddings.

    Spherical k-means: points and centroids are L2-normalized working copies,
    assignment maximizes the dot product (ties to the lowest centroid index),
    and the update step renormalizes cluster means. A cluster left empty by an
    assignment round is re-seeded with the point least similar to its own
    centroid. Deterministic for a fixed seed.

    Args:
        store: Embeddings to sample from.
        sample_fraction: Fraction in (0, 1] sampled without replacement.
        n_list: Number of centroids; at most the sample size.
        iterations: Fixed number of assign/update rounds, at least 1.
        seed: Seeds both the sample draw and the k-means++ initialization.
    """
    if not (0.0 < sample_fraction <= 1.0):
        raise InvalidConfigError(f"sample_fraction must be in (0, 1], got {sample_fraction}")
    if n_list < 1:
        raise InvalidConfigError(f"n_list must be >= 1, got {n_list}")
    if iterations < 1:
        raise InvalidConfigError(f"iterations must be >= 1, got {iterations}")
    total = store.num_embeddings
    sample_size = min(total, math.ceil(sample_fraction * total))
    if n_list > sample_size:
        raise InvalidConfigError(
            f"n_list {n_list} exceeds the sample size {sample_size}"
        )
    rng = np.random.default_rng(seed & _SEED_MASK)
    picked = np.sort(rng.choice(total, size=sample_size, replace=False))
    sample = _normalize_rows(store.vectors[picked])

    centroids = _kmeans_pp_init(sample, n_list, rng)
    history: list[float] = []
    for _ in range(iterations):
        sims = sample @ centroids.T
        assign = np.argmax(sims, axis=1)  # first maximum = lowest centroid index
        assigned_sim = sims[np.arange(sample_size), assign].astype(np.float64)
        history.append(float(assigned_sim.mean()))

        sums = np.zeros((n_list, sample.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, sample.astype(np.float64))
        counts = np.bincount(assign, minlength=n_list)
        for c in np.flatnonzero(counts > 0):
            mean = sums[c] / counts[c]
            norm = np.linalg.norm(mean)
            if norm > 0.0:  # zero-norm mean keeps the previous centroid
                centroids[c] = (mean / norm).astype(np.float32)

        stealable = assigned_sim.copy()
        for c in np.flatnonzero(counts == 0):
            victim = int(np.argmin(stealable))
            centroids[c] = sample[victim]
            stealable[victim] = np.inf
    return Centroids(vectors=centroids, objective_history=tuple(history))


def build_ivf(store: EmbeddingStore, centroids: Centroids) -> IvfIndex:
    """Assign every stored embedding to its argmax-dot-product centroid.

    Ties go to the lowest centroid index. Full-precision vectors stay
    available through the store; the coarse assignment only routes probes.
    """
    if centroids.dim != store.dim:
        raise InvalidInputError(
            f"dimension mismatch: store {store.dim}, centroids {centroids.dim}"
        )
    assign = np.empty(store.num_embeddings, dtype=np.int64)
    for start in range(0, store.num_embeddings, _ASSIGN_CHUNK):
        block = store.vectors[start : start + _ASSIGN_CHUNK]
        assign[start : start + block.shape[0]] = np.argmax(block @ centroids.vectors.T, axis=1)
    order = np.argsort(assign, kind="stable")
    boundaries = np.searchsorted(assign[order], np.arange(centroids.n_list + 1))
    lists = tuple(
        np.sort(order[boundaries[c] : boundaries[c + 1]]) for c in range(centroids.n_list)
    )
    return IvfIndex(store=store, centroids=centroids, lists=lists)


# --------------------------------------------------------------------------
# Binary persistence
#
# Index file (little-endian):
#   magic "MVIX", u32 version, u32 dim, u32 n_list, u64 num_docs,
#   u64 num_embeddings;
#   per doc: u32 name_len, UTF-8 name, u64 start, u32 len;
#   centroid block: n_list * dim * f32;
#   per list: u64 count, then count * (u64 embedding_id + dim * f32).
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<IIIQQ")
_DOC_TAIL = struct.Struct("<QI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])


def save_index(index: IvfIndex, path: str | Path) -> None:
    """Serialize an index; :func:`load_index` restores it bitwise."""
    store = index.store
    with open(path, "wb") as out:
        out.write(INDEX_MAGIC)
        out.write(
            _HEADER.pack(
                FORMAT_VERSION,
                store.dim,
                index.n_list,
                store.num_docs,
                store.num_embeddings,
            )
        )
        for doc_number, doc_id in enumerate(store.doc_ids):
            name = doc_id.encode("utf-8")
            start, length = store.doc_offsets[doc_number]
            out.write(_U32.pack(len(name)))
            out.write(name)
            out.write(_DOC_TAIL.pack(int(start), int(length)))
        out.write(np.ascontiguousarray(index.centroids.vectors, dtype="<f4").tobytes())
        entry_dtype = _entry_dtype(store.dim)
        for ids in index.lists:
            out.write(_U64.pack(len(ids)))
            block = np.empty(len(ids), dtype=entry_dtype)
            block["id"] = ids.astype(np.uint64)
            block["vec"] = store.vectors[ids]
            out.write(block.tobytes())


def _read_exact(handle: BinaryIO, count: int, section: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise CorruptIndexError(f"truncated index file: {section}")
    return data


def load_index(path: str | Path) -> IvfIndex:
    """Read an index file, validating every section before constructing.

    Raises:
        CorruptIndexError: On a bad magic, unsupported version, truncation,
            or internally inconsistent content. Nothing partial is returned.
    """
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != INDEX_MAGIC:
            raise CorruptIndexError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
        version, dim, n_list, num_docs, num_embeddings = _HEADER.unpack(
            _read_exact(handle, _HEADER.size, "header")
        )
        if version != FORMAT_VERSION:
            raise CorruptIndexError(f"unsupported version {version}")
        if dim == 0 or n_list == 0 or num_docs == 0:
            raise CorruptIndexError("header declares an empty index")

        doc_ids: list[str] = []
        offsets = np.empty((num_docs, 2), dtype=np.int64)
        for i in range(num_docs):
            (name_len,) = _U32.unpack(_read_exact(handle, 4, "document table"))
            raw = _read_exact(handle, name_len, "document table")
            try:
                doc_ids.append(raw.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CorruptIndexError(f"document table: undecodable name at entry {i}") from exc
            start, length = _DOC_TAIL.unpack(_read_exact(handle, _DOC_TAIL.size, "document table"))
            offsets[i] = (start, length)

        centroid_bytes = _read_exact(handle, n_list * dim * 4, "centroid block")
        centroid_vectors = np.frombuffer(centroid_bytes, dtype="<f4").reshape(n_list, dim).copy()

        entry_dtype = _entry_dtype(dim)
        vectors = np.empty((num_embeddings, dim), dtype=np.float32)
        lists: list[np.ndarray] = []
        seen = 0
        for c in range(n_list):
            (count,) = _U64.unpack(_read_exact(handle, 8, f"inverted list {c}"))
            seen += count
            if seen > num_embeddings:
                raise CorruptIndexError(
                    f"inverted list {c}: lists hold more embeddings than the header declares"
                )
            block = np.frombuffer(
                _read_exact(handle, count * entry_dtype.itemsize, f"inverted list {c}"),
                dtype=entry_dtype,
            )
            ids = block["id"].astype(np.int64)
            if count and (ids >= num_embeddings).any():
                raise CorruptIndexError(f"inverted list {c}: embedding id out of range")
            vectors[ids] = block["vec"]
            lists.append(ids)
        if seen != num_embeddings:
            raise CorruptIndexError(
                f"header declares {num_embeddings} embeddings but lists hold {seen}"
            )
        if handle.read(1):
            raise CorruptIndexError("trailing data after the final inverted list")

    try:
        store = EmbeddingStore(vectors=vectors, doc_offsets=offsets, doc_ids=tuple(doc_ids))
        return IvfIndex(store=store, centroids=Centroids(centroid_vectors), lists=tuple(lists))
    except InvalidInputError as exc:
        raise CorruptIndexError(f"inconsistent index content: {exc}") from exc


# --------------------------------------------------------------------------
# External embedding dumps (real encoder outputs)
#
#   magic "MVED", u32 version, u32 dim, u64 num_docs;
#   per doc: u32 name_len, UTF-8 name, u32 num_embeddings, then
#   num_embeddings * dim * f32, little-endian.
# --------------------------------------------------------------------------

_DUMP_HEADER = struct.Struct("<IIQ")


def write_embeddings_dump(docs: Sequence[tuple[str, np.ndarray]], path: str | Path) -> None:
    """Write per-document embedding matrices in the ingestion format."""
    if not docs:
        raise InvalidInputError("refusing to write an empty embeddings dump")
    dim = int(np.asarray(docs[0][1]).shape[1])
    with open(path, "wb") as out:
        out.write(DUMP_MAGIC)
        out.write(_DUMP_HEADER.pack(FORMAT_VERSION, dim, len(docs)))
        for doc_id, matrix in docs:
            arr = np.ascontiguousarray(matrix, dtype="<f4")
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise InvalidInputError(f"dump doc {doc_id!r}: expected shape (n, {dim})")
            name = doc_id.encode("utf-8")
            out.write(_U32.pack(len(name)))
            out.write(name)
            out.write(_U32.pack(arr.shape[0]))
            out.write(arr.tobytes())


def read_embeddings_dump(path: str | Path) -> list[tuple[str, np.ndarray]]:
    """Read an external embeddings dump.

    Dumps are user input, so failures raise :class:`InvalidInputError`
    (unlike our own index files, which raise :class:`CorruptIndexError`).
    """

    def need(handle: BinaryIO, count: int, section: str) -> bytes:
        data = handle.read(count)
        if len(data) != count:
            raise InvalidInputError(f"truncated embeddings dump: {section}")
        return data

    docs: list[tuple[str, np.ndarray]] = []
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != DUMP_MAGIC:
            raise InvalidInputError(f"bad dump magic {magic!r}, expected {DUMP_MAGIC!r}")
        version, dim, num_docs = _DUMP_HEADER.unpack(need(handle, _DUMP_HEADER.size, "header"))
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported dump version {version}")
        if dim == 0 or num_docs == 0:
            raise InvalidInputError("dump header declares no content")
        for i in range(num_docs):
            (name_len,) = _U32.unpack(need(handle, 4, f"doc {i} name"))
            try:
                doc_id = need(handle, name_len, f"doc {i} name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise InvalidInputError(f"dump doc {i}: undecodable name") from exc
            (count,) = _U32.unpack(need(handle, 4, f"doc {doc_id!r} count"))
            if count == 0:
                raise InvalidInputError(f"dump doc {doc_id!r} has no embeddings")
            raw = need(handle, count * dim * 4, f"doc {doc_id!r} embeddings")
            matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
            if not np.isfinite(matrix).all():
                raise InvalidInputError(f"dump doc {doc_id!r}: non-finite embedding values")
            docs.append((doc_id, matrix))
        if handle.read(1):
            raise InvalidInputError("trailing data after the final dump document")
    return docs
