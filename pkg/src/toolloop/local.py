"""In-process wiring of the standard tools.

Builds a dispatch-ready registry whose clients call the compute and
retrieval handlers directly — no servers, no sockets.  Used by the CLI's
local mode, the scripted demos, and most tests.
"""

from __future__ import annotations

from typing import Mapping

from .compute import ExecutionLimits, handle_compute_call
from .defaults import PYTHON_EXECUTOR_SCHEMA, RETRIEVER_SCHEMA
from .inference import InferenceBackend
from .protocol import ToolCall, ToolRegistry, ToolResponse
from .retrieval import ChunkIndex, Embedder, HashEmbedder, handle_retrieve_call
from .transport import LocalToolClient


def build_local_registry(
    limits: ExecutionLimits | None = None,
    *,
    indexes: Mapping[str, ChunkIndex] | None = None,
    embedder: Embedder | None = None,
    rewriter: InferenceBackend | None = None,
    summarizer: InferenceBackend | None = None,
    compute_rate_limit: int = 120,
    retrieve_rate_limit: int = 120,
) -> ToolRegistry:
    exec_limits = limits or ExecutionLimits()
    index_map = dict(indexes or {})
    query_embedder = embedder or HashEmbedder()

    def compute(call: ToolCall) -> ToolResponse:
        return handle_compute_call(call, exec_limits)

    def retrieve(call: ToolCall) -> ToolResponse:
        return handle_retrieve_call(
            call, index_map, query_embedder, rewriter=rewriter, summarizer=summarizer
        )

    registry = ToolRegistry()
    registry.register(
        PYTHON_EXECUTOR_SCHEMA,
        LocalToolClient(compute),
        rate_limit=compute_rate_limit,
        timeout=exec_limits.timeout + 5.0,
    )
    registry.register(
        RETRIEVER_SCHEMA,
        LocalToolClient(retrieve),
        rate_limit=retrieve_rate_limit,
        timeout=15.0,
    )
    return registry
