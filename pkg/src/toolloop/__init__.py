"""Tool-augmented math reasoning runtime.

The model thinks in text, invokes tools through a tagged JSON protocol
(``protocol``), and receives wrapped tool output back into its context.
Tools are a sandboxed Python executor (``compute``) and a documentation
retriever (``retrieval``); the loop itself lives in ``orchestrator``,
inference backends in ``inference``, and grading/metrics in ``evaluation``.
"""

from .compute import (
    ErrorClass,
    ExecutionLimits,
    ExecutionResult,
    GuestCode,
    advice_for,
    classify_error,
    execute,
    handle_compute_call,
    rule_fix,
)
from .evaluation import (
    EvalItem,
    EvalRecord,
    MetricsReport,
    analyze_tool_errors,
    compute_metrics,
    extract_answer,
    grade,
)
from .inference import (
    GenerationResult,
    HttpChatBackend,
    Message,
    SamplingParams,
    ScriptedBackend,
)
from .orchestrator import (
    RateLimiter,
    RolloutConfig,
    RolloutTrace,
    build_initial_context,
    load_configs,
    run_batch,
    run_rollout,
)
from .protocol import (
    ParseFailure,
    ToolCall,
    ToolRegistry,
    ToolResponse,
    ToolSchema,
    parse_tool_call,
    render_tool_schemas,
    scan_stream,
    serialize_tool_call,
    wrap_response,
)
from .retrieval import (
    ChunkIndex,
    HashEmbedder,
    build_index,
    handle_retrieve_call,
    load_index,
    rewrite_query,
    save_index,
    search,
    summarize,
)

__version__ = "0.1.0"
