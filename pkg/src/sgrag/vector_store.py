"""Text embedding, exact cosine top-k search and the on-disk index format."""

from __future__ import annotations

import hashlib
import logging
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from ._http import JSONClient
from .chunks import KnowledgeChunk, decode_chunk, encode_chunk
from .errors import (
    ChecksumError,
    ConflictError,
    DimensionError,
    IndexFormatError,
    InputError,
    TransportError,
    TruncatedFileError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

DEFAULT_DIM = 256


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise InputError("embedding must be a finite one-dimensional vector")
        if self.normalized:
            n = float(np.linalg.norm(v))
            if n == 0.0:
                raise InputError("zero vector cannot be normalized")
            if abs(n - 1.0) > 1e-9:
                raise InputError(f"vector flagged normalized has norm {n}")
        object.__setattr__(self, "values", v)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_raw(cls, values) -> EmbeddingVector:
        v = np.asarray(values, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0.0:
            raise InputError("cannot normalize a zero or non-finite vector")
        return cls(v / n)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class Embedder(Protocol):
    name: str

    @property
    def dimension(self) -> int | None: ...

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


# -- local feature hashing --------------------------------------------------------

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.casefold())


def hash_feature(feature: str, dim: int) -> tuple[int, float]:
    """Bucket and sign for one feature string; the top bit of the digest picks the sign."""
    h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
    return h % dim, (-1.0 if h >> 63 else 1.0)


def hashed_features(tokens: Sequence[str], bigrams: bool = True) -> list[str]:
    feats = [f"u:{t}" for t in tokens]
    if bigrams:
        feats += [f"b:{a} {b}" for a, b in zip(tokens, tokens[1:])]
    return feats


def local_hash_embed(text: str, dim: int = DEFAULT_DIM, bigrams: bool = True) -> EmbeddingVector:
    """Signed feature hashing of unigrams (and bigrams) followed by L2 normalization."""
    if not text:
        raise InputError("cannot embed empty text")
    tokens = tokenize(text)
    if not tokens:
        raise InputError(f"text has no tokens: {text!r}")
    v = np.zeros(dim)
    for feat in hashed_features(tokens, bigrams):
        bucket, sign = hash_feature(feat, dim)
        v[bucket] += sign
    n = np.linalg.norm(v)
    if n == 0.0:
        # every feature cancelled in colliding buckets; fall back to unsigned counts
        for feat in hashed_features(tokens, bigrams):
            v[hash_feature(feat, dim)[0]] += 1.0
        n = np.linalg.norm(v)
    return EmbeddingVector(v / n)


class LocalHashEmbedder:
    name = "local-hash"

    def __init__(self, dim: int = DEFAULT_DIM, bigrams: bool = True) -> None:
        self._dim = dim
        self.bigrams = bigrams

    @property
    def dimension(self) -> int:
        return self._dim

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [local_hash_embed(t, self._dim, self.bigrams) for t in texts]


class RemoteEmbedder:
    """Client for an HTTP embedding endpoint taking ``{"model", "input"}``.

    Accepts either ``{"data": [{"embedding": [...]}, ...]}`` or
    ``{"embeddings": [[...], ...]}``. The dimension is pinned by the first response.
    """

    name = "remote"

    def __init__(self, url: str, model: str, api_key: str | None = None, batch_size: int = 64, **client_kw) -> None:
        self.model = model
        self.batch_size = batch_size
        self._client = JSONClient(url, api_key=api_key, **client_kw)
        self._dim: int | None = None
        self._lock = threading.Lock()

    @property
    def dimension(self) -> int | None:
        return self._dim

    def _parse(self, body, expected: int) -> list[list[float]]:
        if isinstance(body, dict) and "data" in body:
            rows = [item["embedding"] for item in sorted(body["data"], key=lambda d: d.get("index", 0))]
        elif isinstance(body, dict) and "embeddings" in body:
            rows = body["embeddings"]
        else:
            raise TransportError("embedding response has neither 'data' nor 'embeddings'", retryable=False)
        if len(rows) != expected:
            raise TransportError(f"embedding response has {len(rows)} vectors for {expected} inputs", retryable=False)
        return rows

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if any(not t for t in texts):
            raise InputError("cannot embed empty text")
        out: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start : start + self.batch_size])
            for row in self._parse(self._client.post({"model": self.model, "input": batch}), len(batch)):
                with self._lock:
                    if self._dim is None:
                        self._dim = len(row)
                if len(row) != self._dim:
                    raise DimensionError(f"remote embedding has dimension {len(row)}, pinned at {self._dim}")
                out.append(EmbeddingVector.from_raw(row))
        return out


def embed(text: str, backend: Embedder) -> EmbeddingVector:
    if not text:
        raise InputError("cannot embed empty text")
    return backend.embed_many([text])[0]


# -- index ----------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    score: float
    payload: str

    @property
    def chunk(self) -> KnowledgeChunk:
        return decode_chunk(self.payload)


RetrievalResult = list[RetrievalHit]


class VectorIndex:
    """Exact-scan cosine index. Vectors are kept as float32, the persisted precision."""

    def __init__(self, dimension: int, ids: Sequence[str] = (), vectors=None, payloads: Sequence[str] = ()) -> None:
        self.dimension = dimension
        self.ids = list(ids)
        if len(set(self.ids)) != len(self.ids):
            dup = next(i for i in self.ids if self.ids.count(i) > 1)
            raise ConflictError(f"duplicate chunk id {dup!r}")
        if vectors is None:
            vectors = np.zeros((0, dimension), dtype=np.float32)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(len(self.ids), dimension)
        self.payloads = list(payloads)
        if len(self.payloads) != len(self.ids):
            raise ValueError("ids and payloads differ in length")
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object))) if self.ids else np.zeros(0, int)
        self._norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(cls, ids: Sequence[str], vectors, payloads: Sequence[str] | None = None) -> VectorIndex:
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InputError("zero vectors cannot be indexed")
        payloads = list(payloads) if payloads is not None else [""] * len(ids)
        return cls(vectors.shape[1], ids, vectors / norms, payloads)

    def top_k(self, query, k: int) -> RetrievalResult:
        if k < 1:
            raise InputError(f"k must be >= 1, got {k}")
        q = np.asarray(query.values if isinstance(query, EmbeddingVector) else query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionError(f"query has dimension {q.shape[0] if q.ndim else 0}, index has {self.dimension}")
        if not self.ids:
            return []
        scores = (self.vectors.astype(np.float64) @ q) / (self._norms * np.linalg.norm(q))
        scores = np.clip(scores, -1.0, 1.0)
        order = np.lexsort((self._id_rank, -scores))[:k]
        return [RetrievalHit(self.ids[i], float(scores[i]), self.payloads[i]) for i in order]


def top_k(index: VectorIndex, query_vector, k: int) -> RetrievalResult:
    return index.top_k(query_vector, k)


def build_index(
    entries: Iterable[tuple[str, str, KnowledgeChunk | str]], backend: Embedder
) -> VectorIndex:
    """Embed ``(chunk_id, text, payload)`` entries; chunk payloads are stored as canonical records."""
    entries = list(entries)
    ids = [e[0] for e in entries]
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ConflictError(f"duplicate chunk id {i!r}")
        seen.add(i)
    payloads = [p if isinstance(p, str) else encode_chunk(p) for _, _, p in entries]
    vectors = backend.embed_many([t for _, t, _ in entries]) if entries else []
    dim = vectors[0].dimension if vectors else (backend.dimension or DEFAULT_DIM)
    matrix = np.array([v.values for v in vectors]).reshape(len(vectors), dim)
    return VectorIndex(dim, ids, matrix, payloads)


def chunk_entries(chunks: Iterable[KnowledgeChunk], corpus: bool = False) -> list[tuple[str, str, KnowledgeChunk]]:
    """Index entries for chunks; corpus mode prefixes the embedded text with the image id."""
    return [
        (c.chunk_id, f"image: {c.image_id} | {c.canonical_text}" if corpus else c.canonical_text, c)
        for c in chunks
    ]


# -- persistence ------------------------------------------------------------------

MAGIC = b"SGRAGIDX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQ")
_U32 = struct.Struct("<I")


def index_to_bytes(index: VectorIndex) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, index.dimension, len(index))]
    for cid, vec, payload in zip(index.ids, index.vectors, index.payloads):
        raw_id = cid.encode("utf-8")
        raw_payload = payload.encode("utf-8")
        parts += [_U32.pack(len(raw_id)), raw_id, vec.astype("<f4").tobytes(), _U32.pack(len(raw_payload)), raw_payload]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int) -> None:
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError(f"index ends at byte {self.end}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _walk(data: bytes, end: int) -> tuple[int, int, list[tuple[bytes, bytes, bytes]]]:
    r = _Reader(data, end)
    _, version, dim, count = _HEADER.unpack(r.take(_HEADER.size))
    entries = []
    for _ in range(count):
        raw_id = r.take(_U32.unpack(r.take(4))[0])
        vec = r.take(4 * dim)
        payload = r.take(_U32.unpack(r.take(4))[0])
        entries.append((raw_id, vec, payload))
    if r.pos != end:
        raise ChecksumError(f"{end - r.pos} unexpected bytes after the last entry")
    return version, dim, entries


def index_from_bytes(data: bytes) -> VectorIndex:
    """Decode an index image.

    The CRC is checked before any field is trusted. When it fails, a file
    that runs out before its declared content is reported as truncated;
    every other mismatch is a checksum error.
    """
    if len(data) < _HEADER.size + 4:
        raise TruncatedFileError(f"index file is {len(data)} bytes, shorter than its fixed header")
    body_end = len(data) - 4
    if zlib.crc32(data[:body_end]) != _U32.unpack(data[body_end:])[0]:
        try:
            _walk(data, body_end)
        except TruncatedFileError as exc:
            raise TruncatedFileError(f"index is truncated or a length field is corrupt: {exc}") from None
        except ChecksumError:
            pass
        raise ChecksumError("index CRC32 mismatch")
    magic, version, dim, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"index format version {version}, this build reads {FORMAT_VERSION}")
    _, dim, entries = _walk(data, body_end)
    ids = [raw_id.decode("utf-8") for raw_id, _, _ in entries]
    vectors = np.frombuffer(b"".join(v for _, v, _ in entries), dtype="<f4").reshape(len(entries), dim)
    payloads = [p.decode("utf-8") for _, _, p in entries]
    return VectorIndex(dim, ids, vectors, payloads)


def save_index(index: VectorIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path: str | Path) -> VectorIndex:
    return index_from_bytes(Path(path).read_bytes())
