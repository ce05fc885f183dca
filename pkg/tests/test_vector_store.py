import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgrag.chunks import build_chunks
from sgrag.errors import (
    ChecksumError,
    ConflictError,
    DimensionError,
    IndexFormatError,
    InputError,
    TransportError,
    TruncatedFileError,
    VersionMismatchError,
)
from sgrag.vector_store import (
    EmbeddingVector,
    LocalHashEmbedder,
    RemoteEmbedder,
    VectorIndex,
    build_index,
    chunk_entries,
    cosine,
    embed,
    hash_feature,
    index_from_bytes,
    index_to_bytes,
    load_index,
    local_hash_embed,
    save_index,
    tokenize,
    top_k,
)


def naive_top_k(ids, vectors, q, k):
    rows = []
    for cid, v in zip(ids, vectors):
        v = [float(x) for x in v]
        dot = sum(a * b for a, b in zip(v, q))
        s = dot / (math.sqrt(sum(a * a for a in v)) * math.sqrt(sum(b * b for b in q)))
        rows.append((cid, max(-1.0, min(1.0, s))))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows[:k]


def test_tokenize():
    assert tokenize("Parked-on the ROAD_side, x2!") == ["parked", "on", "the", "road", "side", "x2"]


def test_repeated_token_same_direction_without_bigrams():
    a = local_hash_embed("car car", bigrams=False)
    b = local_hash_embed("car", bigrams=False)
    assert cosine(a.values, b.values) == pytest.approx(1.0)


def test_bigram_cosine_by_hand():
    feats = ["u:car", "b:car car"]
    buckets = {hash_feature(f, 256)[0] for f in feats}
    assert len(buckets) == 2  # no collision, so the hand value below applies
    # "car car" = 2*e_u + e_b (up to signs); "car" = e_u
    assert cosine(local_hash_embed("car car").values, local_hash_embed("car").values) == pytest.approx(
        2 / math.sqrt(5)
    )


def test_disjoint_texts_orthogonal():
    a, b = "storage tank", "tennis court"
    fa = {hash_feature(f, 256)[0] for f in ["u:storage", "u:tank", "b:storage tank"]}
    fb = {hash_feature(f, 256)[0] for f in ["u:tennis", "u:court", "b:tennis court"]}
    assert not fa & fb
    assert cosine(local_hash_embed(a).values, local_hash_embed(b).values) == 0.0


def test_embedding_normalized_and_deterministic():
    v = local_hash_embed("category: car | count: 3")
    assert np.linalg.norm(v.values) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(v.values, local_hash_embed("category: car | count: 3").values)
    assert v.dimension == 256


def test_embed_errors():
    with pytest.raises(InputError):
        embed("", LocalHashEmbedder())
    with pytest.raises(InputError):
        local_hash_embed("---")
    with pytest.raises(InputError):
        EmbeddingVector(np.array([1.0, 1.0]))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_top_k_matches_naive(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    ids = [f"c{i:02d}" for i in rng.permutation(n)]
    vecs = rng.standard_normal((n, 8))
    vecs[rng.integers(n)] = vecs[0]  # force a tie now and then
    index = VectorIndex.from_vectors(ids, vecs)
    q = rng.standard_normal(8)
    got = [(h.chunk_id, h.score) for h in top_k(index, q, k)]
    want = naive_top_k(ids, index.vectors, q.tolist(), k)
    assert [g[0] for g in got] == [w[0] for w in want]
    for (_, s1), (_, s2) in zip(got, want):
        assert abs(s1 - s2) <= 1e-12


def test_ties_break_by_id():
    v = np.array([[1.0, 0.0]] * 3)
    index = VectorIndex.from_vectors(["b", "c", "a"], v)
    assert [h.chunk_id for h in index.top_k([1.0, 0.0], 3)] == ["a", "b", "c"]


def test_k_larger_than_index_and_errors():
    index = VectorIndex.from_vectors(["a", "b"], np.eye(2))
    assert len(index.top_k([1.0, 0.0], 10)) == 2
    assert VectorIndex(4).top_k(np.ones(4), 3) == []
    with pytest.raises(InputError):
        index.top_k([1.0, 0.0], 0)
    with pytest.raises(DimensionError):
        index.top_k([1.0, 0.0, 0.0], 1)
    with pytest.raises(ConflictError):
        VectorIndex.from_vectors(["a", "a"], np.eye(2))


def test_build_index_from_chunks(car_road):
    chunks = build_chunks(car_road)
    index = build_index(chunk_entries(chunks), LocalHashEmbedder())
    hits = index.top_k(embed("Where is the road?", LocalHashEmbedder()), 1)
    assert hits[0].chunk.category_label == "road"
    assert {h.chunk for h in index.top_k(np.ones(256), 5)} == set(chunks)
    corpus = chunk_entries(chunks, corpus=True)
    assert corpus[0][1].startswith(f"image: {car_road.image_id} | category: car")
    with pytest.raises(ConflictError):
        build_index(chunk_entries(chunks) * 2, LocalHashEmbedder())


def random_index(seed=0, n=30, d=16):
    rng = np.random.default_rng(seed)
    return VectorIndex.from_vectors([f"id{i}" for i in range(n)], rng.standard_normal((n, d)), [f"p{i}é" for i in range(n)])


def test_persistence_roundtrip(tmp_path):
    index = random_index()
    save_index(index, tmp_path / "a.idx")
    back = load_index(tmp_path / "a.idx")
    assert back.ids == index.ids and back.payloads == index.payloads
    np.testing.assert_array_equal(back.vectors, index.vectors)
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.standard_normal(16)
        assert back.top_k(q, 5) == index.top_k(q, 5)
    assert index_to_bytes(back) == index_to_bytes(index)


def test_every_single_byte_flip_detected():
    data = index_to_bytes(random_index(n=3, d=4))
    for pos in range(len(data)):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            index_from_bytes(bytes(bad))


def test_truncation_and_header_errors():
    data = index_to_bytes(random_index(n=3, d=4))
    with pytest.raises(TruncatedFileError):
        index_from_bytes(data[:10])
    with pytest.raises(TruncatedFileError):
        index_from_bytes(data[:-9])
    import struct
    import zlib

    def resigned(body):
        return body + struct.pack("<I", zlib.crc32(body))

    body = bytearray(data[:-4])
    body[8:12] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        index_from_bytes(resigned(bytes(body)))
    body = bytearray(data[:-4])
    body[0:8] = b"NOTANIDX"
    with pytest.raises(IndexFormatError):
        index_from_bytes(resigned(bytes(body)))


def test_empty_index_roundtrip():
    back = index_from_bytes(index_to_bytes(VectorIndex(7)))
    assert len(back) == 0 and back.dimension == 7


def mock_embedder(handler, **kw):
    return RemoteEmbedder(
        "http://embed.test/v1/embeddings", "m", transport=httpx.MockTransport(handler), sleep=lambda s: None, **kw
    )


def test_remote_embedder_data_shape():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body)
        return httpx.Response(
            200, json={"data": [{"index": i, "embedding": [3.0, 4.0]} for i, _ in enumerate(body["input"])][::-1]}
        )

    emb = mock_embedder(handler, batch_size=2)
    out = emb.embed_many(["a", "b", "c"])
    assert [len(b["input"]) for b in seen] == [2, 1]
    assert seen[0]["model"] == "m"
    assert out[0].values.tolist() == pytest.approx([0.6, 0.8])
    assert emb.dimension == 2


def test_remote_embedder_alt_shape_and_dimension_pin():
    sizes = iter([2, 3])

    def handler(request):
        return httpx.Response(200, json={"embeddings": [[1.0] * next(sizes)]})

    emb = mock_embedder(handler)
    emb.embed_many(["a"])
    with pytest.raises(DimensionError):
        emb.embed_many(["b"])


def test_remote_embedder_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503, text="busy")

    with pytest.raises(TransportError) as err:
        mock_embedder(handler).embed_many(["a"])
    assert len(calls) == 3 and err.value.attempts == 3
