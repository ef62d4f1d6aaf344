"""Retrieval server: chunking, embedding, index persistence, search, LLM stages."""

from __future__ import annotations

import json
import random

import numpy as np
import pytest

from conftest import DOCS_CORPUS
from toolloop.defaults import PYTHON_EXECUTOR_TOOL, RETRIEVER_TOOL
from toolloop.inference import GenerationResult, ScriptedBackend
from toolloop.protocol import ToolCall
from toolloop.retrieval import (
    EmbedderMismatchError,
    EmptyCorpusError,
    HashEmbedder,
    build_index,
    chunk_document,
    handle_retrieve_call,
    load_index,
    rewrite_query,
    save_index,
    search,
    summarize,
)


class RaisingBackend:
    def generate(self, messages, params):
        raise RuntimeError("backend down")


class FixedReplyBackend:
    def __init__(self, reply: str):
        self.reply = reply
        self.seen: list[list] = []

    def generate(self, messages, params):
        self.seen.append(list(messages))
        return GenerationResult(self.reply, "natural_end", len(self.reply.split()))


# --- chunking -----------------------------------------------------------------


def test_chunk_document_basic():
    assert chunk_document("", 10, 3) == []
    assert chunk_document("short", 10, 3) == [(0, 5)]
    assert chunk_document("x" * 10, 10, 3) == [(0, 10)]


def test_chunk_document_overlap_and_coverage_seeded():
    rng = random.Random(7)
    for _ in range(200):
        n = rng.randrange(0, 500)
        chunk_len = rng.randrange(1, 60)
        overlap = rng.randrange(0, chunk_len)
        spans = chunk_document("a" * n, chunk_len, overlap)
        if n == 0:
            assert spans == []
            continue
        # Full coverage, in order, first at 0, last at n.
        assert spans[0][0] == 0
        assert spans[-1][1] == n
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            assert s2 - s1 == chunk_len - overlap  # fixed step
            assert e1 - s2 == overlap or e1 == n  # exact shared region
            assert s2 < e1 or overlap == 0 and s2 == e1
        for start, end in spans:
            assert 0 <= start < end <= n
            assert end - start <= chunk_len


def test_chunk_document_validation():
    with pytest.raises(ValueError):
        chunk_document("x", 0, 0)
    with pytest.raises(ValueError):
        chunk_document("x", 5, 5)
    with pytest.raises(ValueError):
        chunk_document("x", 5, -1)


# --- embedder -------------------------------------------------------------------


def test_hash_embedder_deterministic_and_normalized():
    embedder = HashEmbedder(dimension=64)
    texts = ["solve a quadratic equation", "matrix inverse", "solve a quadratic equation"]
    a = embedder.embed(texts)
    b = embedder.embed(texts)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], a[2])
    norms = np.linalg.norm(a, axis=1)
    np.testing.assert_allclose(norms, 1.0, rtol=1e-6)


def test_hash_embedder_tokenless_text_has_positive_norm():
    embedder = HashEmbedder(dimension=32)
    vectors = embedder.embed(["!!! ???", "---"])
    assert float(np.linalg.norm(vectors[0])) > 0
    assert float(np.linalg.norm(vectors[1])) > 0


def test_hash_embedder_empty_text_is_zero_row():
    embedder = HashEmbedder(dimension=32)
    assert float(np.linalg.norm(embedder.embed([""])[0])) == 0.0


def test_hash_embedder_model_id_and_validation():
    assert HashEmbedder(128).model_id == "hashed-bow-128"
    with pytest.raises(ValueError):
        HashEmbedder(0)


# --- index build / persist --------------------------------------------------------


def test_build_index_over_fixture_docs():
    embedder = HashEmbedder(64)
    index = build_index(DOCS_CORPUS / "sympy", "sympy", embedder, chunk_len=400, overlap=80)
    assert index.corpus == "sympy"
    assert len(index.chunks) >= 3
    sources = {c.source for c in index.chunks}
    assert sources == {"solvers.txt", "core.txt", "matrices.txt"}
    assert index.vectors.shape == (len(index.chunks), 64)
    # Chunk texts are exact slices of their documents.
    for chunk in index.chunks:
        doc = (DOCS_CORPUS / "sympy" / chunk.source).read_text(encoding="utf-8")
        assert doc[chunk.start : chunk.end] == chunk.text


def test_build_index_empty_corpus(tmp_path):
    with pytest.raises(EmptyCorpusError):
        build_index(tmp_path, "empty", HashEmbedder(16))
    with pytest.raises(EmptyCorpusError):
        build_index(tmp_path / "missing", "gone", HashEmbedder(16))


def test_index_round_trip_and_reproducible_bytes(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    embedder = HashEmbedder(32)
    index = build_index(DOCS_CORPUS / "sympy", "sympy", embedder, chunk_len=300, overlap=50)

    first, second = tmp_path / "a.json", tmp_path / "b.json"
    save_index(index, first)
    rebuilt = build_index(DOCS_CORPUS / "sympy", "sympy", embedder, chunk_len=300, overlap=50)
    save_index(rebuilt, second)
    assert first.read_bytes() == second.read_bytes()

    loaded = load_index(first)
    assert loaded.corpus == index.corpus
    assert loaded.chunks == index.chunks
    assert loaded.embedder_id == index.embedder_id
    assert loaded.built_at == "2023-11-14T22:13:20+00:00"
    np.testing.assert_array_equal(loaded.vectors, index.vectors)


def test_load_index_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "something-else"}), encoding="utf-8")
    with pytest.raises(ValueError):
        load_index(path)


# --- search -------------------------------------------------------------------------


def brute_force(index, query_vec, top_k):
    """Independent float64 rescoring with the same tie-break."""
    scored = []
    for i, chunk in enumerate(index.chunks):
        score = float(np.dot(index.vectors[i].astype(np.float64), query_vec.astype(np.float64)))
        scored.append((-score, chunk.source, chunk.start, i))
    scored.sort()
    return [i for *_rank, i in scored[:top_k]]


def test_search_matches_brute_force():
    embedder = HashEmbedder(64)
    index = build_index(DOCS_CORPUS / "sympy", "sympy", embedder, chunk_len=300, overlap=60)
    rng = random.Random(11)
    vocab = "solve equation matrix symbols simplify inverse quadratic assumptions real".split()
    for _ in range(50):
        query = " ".join(rng.choice(vocab) for _ in range(rng.randrange(1, 5)))
        q = embedder.embed([query])[0]
        norm = float(np.linalg.norm(q))
        if norm > 0:
            q = q / norm
        for top_k in (1, 3, 10):
            hits = search(index, query, top_k, embedder)
            expected = brute_force(index, q, top_k)
            got = [index.chunks.index(hit.chunk) for hit in hits]
            assert got == expected, (query, top_k)


def test_search_relevance_on_fixture_docs():
    embedder = HashEmbedder(256)
    index = build_index(DOCS_CORPUS / "sympy", "sympy", embedder)
    hits = search(index, "how to solve a quadratic equation with solve", 2, embedder)
    assert hits[0].chunk.source == "solvers.txt"


def test_search_tie_break_is_stable(tmp_path):
    (tmp_path / "b.txt").write_text("identical text", encoding="utf-8")
    (tmp_path / "a.txt").write_text("identical text", encoding="utf-8")
    embedder = HashEmbedder(32)
    index = build_index(tmp_path, "dup", embedder)
    hits = search(index, "identical text", 2, embedder)
    assert [h.chunk.source for h in hits] == ["a.txt", "b.txt"]
    assert hits[0].score == pytest.approx(hits[1].score)


def test_search_top_k_clamped_to_corpus():
    embedder = HashEmbedder(32)
    index = build_index(DOCS_CORPUS / "sympy", "sympy", embedder)
    hits = search(index, "solve", 10_000, embedder)
    assert len(hits) == len(index.chunks)
    with pytest.raises(ValueError):
        search(index, "solve", 0, embedder)


def test_search_embedder_mismatch():
    index = build_index(DOCS_CORPUS / "sympy", "sympy", HashEmbedder(32))
    with pytest.raises(EmbedderMismatchError):
        search(index, "solve", 1, HashEmbedder(64))


# --- rewrite / summarize ---------------------------------------------------------


def test_rewrite_none_backend_passthrough():
    assert rewrite_query("solve 12x^2 - xy for x", None) == "solve 12x^2 - xy for x"


def test_rewrite_uses_first_line_of_reply():
    backend = FixedReplyBackend("How to solve a polynomial symbolically?\nextra commentary")
    assert rewrite_query("solve 12x^2", backend) == "How to solve a polynomial symbolically?"
    system, user = backend.seen[0]
    assert system.role == "system" and "generalize" in system.content
    assert user.content == "solve 12x^2"


def test_rewrite_empty_reply_passthrough():
    assert rewrite_query("some query", FixedReplyBackend("   \n")) == "some query"


def test_rewrite_backend_failure_passthrough():
    assert rewrite_query("some query", RaisingBackend()) == "some query"


def test_rewrite_rejects_empty_query():
    with pytest.raises(ValueError):
        rewrite_query("   ", None)


def _hits(*texts: str):
    embedder = HashEmbedder(32)

    class _FakeChunk:
        def __init__(self, text):
            self.text = text

    class _FakeHit:
        def __init__(self, text):
            self.chunk = _FakeChunk(text)
            self.score = 1.0

    del embedder
    return [_FakeHit(t) for t in texts]


def test_summarize_none_backend_concatenates_hits():
    assert summarize("q", _hits("doc one", "doc two"), None) == "doc one\n\ndoc two"


def test_summarize_reply_and_original_query_forwarded():
    backend = FixedReplyBackend("Use sympy.solve(expr, x).")
    out = summarize("solve 12x^2 - xy", _hits("doc"), backend)
    assert out == "Use sympy.solve(expr, x)."
    user = backend.seen[0][1]
    # The summarizer sees the model's original query, not the rewrite.
    assert user.content.startswith("Query: solve 12x^2 - xy")
    assert "Docs:\ndoc" in user.content


def test_summarize_empty_reply_and_failure_fall_back_to_docs():
    hits = _hits("alpha", "beta")
    assert summarize("q", hits, FixedReplyBackend("")) == "alpha\n\nbeta"
    assert summarize("q", hits, RaisingBackend()) == "alpha\n\nbeta"


# --- tool endpoint ---------------------------------------------------------------


@pytest.fixture(scope="module")
def sympy_index():
    embedder = HashEmbedder(256)
    return {"sympy": build_index(DOCS_CORPUS / "sympy", "sympy", embedder)}, embedder


def retrieve_call(**arguments) -> ToolCall:
    return ToolCall(tool_name=RETRIEVER_TOOL, arguments=arguments)


def test_handle_retrieve_ok(sympy_index):
    indexes, embedder = sympy_index
    response = handle_retrieve_call(
        retrieve_call(repo_name="sympy", query="how to use solve for equations", top_k=2),
        indexes,
        embedder,
    )
    assert not response.is_error
    assert "solve" in response.payload


def test_handle_retrieve_unlisted_package(sympy_index):
    indexes, embedder = sympy_index
    response = handle_retrieve_call(
        retrieve_call(repo_name="pandas", query="read csv"), indexes, embedder
    )
    assert response.is_error
    assert response.error_kind == "retrieval_error"
    assert "'pandas'" in response.payload
    assert "sympy" in response.payload  # names the valid options


def test_handle_retrieve_allowed_but_unindexed(sympy_index):
    indexes, embedder = sympy_index
    response = handle_retrieve_call(
        retrieve_call(repo_name="scipy", query="integrate"), indexes, embedder
    )
    assert response.is_error
    assert response.error_kind == "retrieval_error"
    assert "'scipy'" in response.payload
    assert "sympy" in response.payload  # names what IS indexed


def test_handle_retrieve_argument_validation(sympy_index):
    indexes, embedder = sympy_index
    for arguments in [
        {"query": "q"},
        {"repo_name": "sympy"},
        {"repo_name": "", "query": "q"},
        {"repo_name": "sympy", "query": "   "},
        {"repo_name": "sympy", "query": "q", "top_k": 0},
        {"repo_name": "sympy", "query": "q", "top_k": True},
        {"repo_name": "sympy", "query": "q", "top_k": "3"},
    ]:
        response = handle_retrieve_call(retrieve_call(**arguments), indexes, embedder)
        assert response.is_error, arguments
        assert response.error_kind == "malformed_call", arguments


def test_handle_retrieve_pipeline_uses_rewrite_then_original_query(sympy_index):
    indexes, embedder = sympy_index
    rewriter = FixedReplyBackend("How to solve equations symbolically?")
    summarizer = FixedReplyBackend("Final answer text.")
    response = handle_retrieve_call(
        retrieve_call(repo_name="sympy", query="solve 12x^2 - xy - 6y^2 = 0 for x", top_k=1),
        indexes,
        embedder,
        rewriter=rewriter,
        summarizer=summarizer,
    )
    assert response.payload == "Final answer text."
    assert rewriter.seen[0][1].content == "solve 12x^2 - xy - 6y^2 = 0 for x"
    assert summarizer.seen[0][1].content.startswith(
        "Query: solve 12x^2 - xy - 6y^2 = 0 for x"
    )


def test_handle_retrieve_wrong_tool(sympy_index):
    indexes, embedder = sympy_index
    with pytest.raises(ValueError):
        handle_retrieve_call(
            ToolCall(tool_name=PYTHON_EXECUTOR_TOOL, arguments={"code": "x"}), indexes, embedder
        )


def test_scripted_backend_works_as_rewriter():
    # The aux stages accept any InferenceBackend; a scripted one is what the
    # demo wiring uses.
    backend = ScriptedBackend(turns={})
    # No script for this conversation -> KeyError inside -> pass-through.
    assert rewrite_query("anything", backend) == "anything"
