"""Documentation-retrieval tool server.

A corpus of plain-text package documentation is chunked with a fixed-length
sliding window, embedded, and searched by exhaustive cosine scan — corpora
are small enough that nothing smarter is warranted, and the scan doubles as
its own ground truth.  Around the search sit two optional LLM stages: a
query rewriter that generalizes the model's ask before retrieval, and a
result summarizer that turns raw chunks into a direct answer.  Both stages
degrade to pass-through on empty replies or backend failures; retrieval
never errors because a helper LLM is down.

Indexes persist as a single JSON document so that rebuilding an unchanged
corpus yields a byte-identical file (honouring ``SOURCE_DATE_EPOCH`` for the
build timestamp).
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .defaults import ALLOWED_PACKAGES, RETRIEVER_TOOL
from .inference import InferenceBackend, Message, SamplingParams
from .protocol import ToolCall, ToolResponse

DEFAULT_CHUNK_LEN = 1200
DEFAULT_OVERLAP = 200
DEFAULT_TOP_K = 3

INDEX_FORMAT = "chunk-index/1"


class EmptyCorpusError(ValueError):
    """The corpus directory yielded no indexable text."""


class EmbedderMismatchError(ValueError):
    """Query embedder differs from the embedder the index was built with."""


@dataclass(frozen=True)
class Chunk:
    corpus: str
    source: str  # path relative to the corpus root, POSIX separators
    start: int  # character offsets into the source document
    end: int
    text: str


@dataclass(frozen=True)
class RetrievalHit:
    chunk: Chunk
    score: float


@dataclass(frozen=True)
class ChunkIndex:
    """Chunks plus their L2-normalized embedding rows (zero rows allowed
    for degenerate text)."""

    corpus: str
    chunks: tuple[Chunk, ...]
    vectors: np.ndarray  # (len(chunks), dim) float32
    chunk_len: int
    overlap: int
    embedder_id: str
    built_at: str


class Embedder(Protocol):
    model_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9_]+")


class HashEmbedder:
    """Deterministic hashed bag-of-words embedder.

    Tokens are bucketed by sha256 (never the process-salted builtin hash),
    so the same text embeds to the same vector in every process — the
    property index persistence relies on.  Texts with no word tokens fall
    back to hashing the raw text, so any non-empty text has positive norm.
    """

    def __init__(self, dimension: int = 256) -> None:
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.model_id = f"hashed-bow-{dimension}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float32)
        for row, text in enumerate(texts):
            tokens = _TOKEN.findall(text.lower())
            if not tokens and text:
                tokens = [text]
            for token in tokens:
                digest = hashlib.sha256(token.encode("utf-8")).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dimension
                out[row, bucket] += 1.0
            norm = float(np.linalg.norm(out[row]))
            if norm > 0:
                out[row] /= norm
        return out


class RemoteEmbedder:
    """Client for an embedding API (``POST {base_url}/embeddings``)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_token: str | None = None,
        request_timeout: float = 60.0,
    ) -> None:
        import httpx  # deferred: only this class needs it here

        self._httpx = httpx
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.model_id = f"remote:{model}"
        self._token = api_token
        self.request_timeout = request_timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        resp = self._httpx.post(
            f"{self.base_url}/embeddings",
            json={"model": self.model, "input": list(texts)},
            headers=headers,
            timeout=self.request_timeout,
        )
        resp.raise_for_status()
        rows = [item["embedding"] for item in resp.json()["data"]]
        out = np.asarray(rows, dtype=np.float32)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        np.divide(out, norms, out=out, where=norms > 0)
        return out


# --- chunking and index construction ----------------------------------------


def chunk_document(text: str, chunk_len: int, overlap: int) -> list[tuple[int, int]]:
    """Fixed-length sliding-window spans over ``text``.

    The window advances by ``chunk_len - overlap``; consecutive chunks share
    exactly ``overlap`` characters and together cover every character.  The
    final chunk may be shorter.  Empty text yields no chunks.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if not 0 <= overlap < chunk_len:
        raise ValueError("overlap must satisfy 0 <= overlap < chunk_len")
    spans: list[tuple[int, int]] = []
    step = chunk_len - overlap
    start = 0
    while start < len(text):
        end = min(start + chunk_len, len(text))
        spans.append((start, end))
        if end == len(text):
            break
        start += step
    return spans


def build_index(
    corpus_dir: str | Path,
    corpus: str,
    embedder: Embedder,
    *,
    chunk_len: int = DEFAULT_CHUNK_LEN,
    overlap: int = DEFAULT_OVERLAP,
) -> ChunkIndex:
    """Chunk and embed every file under ``corpus_dir``.

    Files are visited in sorted path order so the index layout is a pure
    function of corpus content.  An index is only materialized once every
    chunk embeds successfully; embedding failures propagate and nothing
    partial escapes.
    """
    root = Path(corpus_dir)
    if not root.is_dir():
        raise EmptyCorpusError(f"corpus directory not found: {root}")
    chunks: list[Chunk] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        text = path.read_text(encoding="utf-8", errors="replace")
        source = path.relative_to(root).as_posix()
        for start, end in chunk_document(text, chunk_len, overlap):
            chunks.append(
                Chunk(corpus=corpus, source=source, start=start, end=end, text=text[start:end])
            )
    if not chunks:
        raise EmptyCorpusError(f"no indexable text under {root}")
    vectors = embedder.embed([c.text for c in chunks]).astype(np.float32)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    np.divide(vectors, norms, out=vectors, where=norms > 0)
    return ChunkIndex(
        corpus=corpus,
        chunks=tuple(chunks),
        vectors=vectors,
        chunk_len=chunk_len,
        overlap=overlap,
        embedder_id=embedder.model_id,
        built_at=_build_timestamp(),
    )


def _build_timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = int(epoch) if epoch else int(datetime.now(timezone.utc).timestamp())
    return datetime.fromtimestamp(moment, timezone.utc).isoformat()


def save_index(index: ChunkIndex, path: str | Path) -> None:
    """Persist as one JSON document (metadata, chunk table, base64-encoded
    little-endian float32 matrix).  Output bytes are a pure function of the
    index, so rebuild + save of an unchanged corpus is byte-identical when
    ``SOURCE_DATE_EPOCH`` pins the timestamp."""
    doc = {
        "format": INDEX_FORMAT,
        "corpus": index.corpus,
        "chunk_len": index.chunk_len,
        "overlap": index.overlap,
        "embedder_id": index.embedder_id,
        "built_at": index.built_at,
        "count": len(index.chunks),
        "dimension": int(index.vectors.shape[1]) if len(index.chunks) else 0,
        "chunks": [
            {"source": c.source, "start": c.start, "end": c.end, "text": c.text}
            for c in index.chunks
        ],
        "vectors": base64.b64encode(
            np.ascontiguousarray(index.vectors, dtype="<f4").tobytes()
        ).decode("ascii"),
    }
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_index(path: str | Path) -> ChunkIndex:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != INDEX_FORMAT:
        raise ValueError(f"unsupported index format: {doc.get('format')!r}")
    corpus = doc["corpus"]
    chunks = tuple(
        Chunk(corpus=corpus, source=c["source"], start=c["start"], end=c["end"], text=c["text"])
        for c in doc["chunks"]
    )
    vectors = np.frombuffer(base64.b64decode(doc["vectors"]), dtype="<f4")
    vectors = vectors.reshape(doc["count"], doc["dimension"]).copy()
    return ChunkIndex(
        corpus=corpus,
        chunks=chunks,
        vectors=vectors,
        chunk_len=doc["chunk_len"],
        overlap=doc["overlap"],
        embedder_id=doc["embedder_id"],
        built_at=doc["built_at"],
    )


# --- search -----------------------------------------------------------------


def search(
    index: ChunkIndex, query: str, top_k: int, embedder: Embedder
) -> list[RetrievalHit]:
    """Exhaustive cosine scan; ties broken by (source path, span start)."""
    if embedder.model_id != index.embedder_id:
        raise EmbedderMismatchError(
            f"index built with {index.embedder_id!r}, queried with {embedder.model_id!r}"
        )
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    q = embedder.embed([query])[0].astype(np.float64)
    norm = float(np.linalg.norm(q))
    if norm > 0:
        q = q / norm
    # Rows are unit or zero, so the dot product is the cosine.  Scoring is
    # done in float64 — float32 products are exact there — so the ranking
    # does not depend on the BLAS accumulation order of the platform.
    scores = index.vectors.astype(np.float64) @ q
    order = sorted(
        range(len(index.chunks)),
        key=lambda i: (-float(scores[i]), index.chunks[i].source, index.chunks[i].start),
    )
    return [RetrievalHit(index.chunks[i], float(scores[i])) for i in order[:top_k]]


# --- LLM-assisted rewrite and summarize --------------------------------------

REWRITER_PROMPT = (
    "You decide whether to generalize the user's query. If it is already "
    "short, clear and general, return an empty line. Otherwise, rewrite it "
    "into ONE short, general question about the relevant "
    "functions/classes/APIs for this task type. The rewrite should: \n"
    "(1) Keep only: task category and the library/tool name if present. \n"
    "(2) Do NOT include any specific objects/structures, numbers, variable "
    "names, operators, or concrete equation forms.\n"
    "(3) Return a single concise question text (no preamble), or empty if "
    "the original is already short, clear, and general.\n"
    "Return ONLY the question text or empty."
)

SUMMARIZER_PROMPT = (
    "You decide whether to answer. Treat the provided docs as optional "
    "hints; they may be partial or off-topic. If the docs already clearly "
    "answer the query, return an empty line. Otherwise, write a concise, "
    "self-contained answer that:\n"
    "(1) includes fully-qualified function or class names when possible "
    "(e.g., sympy.core.function.diff);\n"
    "(2) includes brief, runnable usage examples;\n"
    "(3) NEVER mentions files, tests, sources, or 'documents', and avoids "
    "any meta commentary about what the docs do or do not contain;\n"
    "(4) may rely on general knowledge beyond the docs to help the user.\n"
    "Return ONLY the answer text (no preamble) or empty."
)

_AUX_PARAMS = SamplingParams(max_tokens=512)


def rewrite_query(query: str, rewriter: InferenceBackend | None) -> str:
    """Generalize a retrieval query via the rewriter backend.

    Empty reply or backend failure returns the original query unchanged; a
    non-empty reply is reduced to its first line, trimmed.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    if rewriter is None:
        return query
    try:
        result = rewriter.generate(
            [Message("system", REWRITER_PROMPT), Message("user", query)], _AUX_PARAMS
        )
        reply = result.text.strip()
    except Exception:
        return query
    if not reply:
        return query
    return reply.splitlines()[0].strip()


def summarize(query: str, hits: Sequence[RetrievalHit], summarizer: InferenceBackend | None) -> str:
    """Condense retrieved chunks into an answer for the model.

    The summarizer sees the query and the concatenated hit texts; an empty
    reply or backend failure returns the concatenated texts verbatim.
    """
    docs = "\n\n".join(hit.chunk.text for hit in hits)
    if summarizer is None:
        return docs
    try:
        result = summarizer.generate(
            [
                Message("system", SUMMARIZER_PROMPT),
                Message("user", f"Query: {query}\n\nDocs:\n{docs}"),
            ],
            _AUX_PARAMS,
        )
        reply = result.text.strip()
    except Exception:
        return docs
    return reply if reply else docs


# --- tool endpoint ------------------------------------------------------------


def handle_retrieve_call(
    call: ToolCall,
    indexes: Mapping[str, ChunkIndex],
    embedder: Embedder,
    *,
    rewriter: InferenceBackend | None = None,
    summarizer: InferenceBackend | None = None,
) -> ToolResponse:
    """Full tool endpoint: validate, rewrite, search, summarize.

    Only argument violations and repo_name problems produce error responses;
    helper-backend failures degrade to pass-through inside the pipeline.
    """
    if call.tool_name != RETRIEVER_TOOL:
        raise ValueError(f"retrieval server cannot handle tool {call.tool_name!r}")
    repo = call.arguments.get("repo_name")
    query = call.arguments.get("query")
    top_k = call.arguments.get("top_k", DEFAULT_TOP_K)
    if not isinstance(repo, str) or not repo.strip():
        return ToolResponse.error("malformed_call", "missing or empty repo_name argument")
    if not isinstance(query, str) or not query.strip():
        return ToolResponse.error("malformed_call", "missing or empty query argument")
    if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
        return ToolResponse.error("malformed_call", "top_k must be a positive integer")
    if repo not in ALLOWED_PACKAGES:
        return ToolResponse.error(
            "retrieval_error",
            f"unknown repo_name {repo!r}; valid options: {', '.join(ALLOWED_PACKAGES)}",
        )
    if repo not in indexes:
        available = ", ".join(sorted(indexes)) or "(none)"
        return ToolResponse.error(
            "retrieval_error",
            f"no documentation index available for {repo!r}; indexed corpora: {available}",
        )
    rewritten = rewrite_query(query, rewriter)
    hits = search(indexes[repo], rewritten, top_k, embedder)
    return ToolResponse.ok(summarize(query, hits, summarizer))
