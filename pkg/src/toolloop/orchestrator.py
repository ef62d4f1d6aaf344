"""Rollout orchestration: the think → tool_call → tool_response loop.

One rollout alternates model generations (stopped at the closing call tag)
with tool dispatches until the model answers without calling a tool, the
round cap is reached (one final tool-free completion is then requested), or
the output-token budget is exhausted.  The generation that crosses the
budget is kept — backends are not required to honour max_tokens exactly, so
a one-generation overshoot is the documented allowance.

Batches fan rollouts out over a thread pool.  Tool dispatch is throttled by
a single rate limiter shared by every worker (limits are per tool, not per
worker), and traces are written to a JSON-Lines file in problem-major,
sample-minor order regardless of completion order, so equal inputs yield
byte-identical trace files at any parallelism (wall-clock fields come from
an injectable clock for exactly this reason).
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .defaults import STANDARD_SCHEMAS, SYSTEM_PROMPT
from .evaluation import extract_answer
from .inference import InferenceBackend, Message, SamplingParams
from .protocol import (
    CompleteCall,
    DEFAULT_GRAMMAR,
    ParseFailure,
    PartialCall,
    TagGrammar,
    ToolCall,
    ToolRegistry,
    ToolResponse,
    parse_tool_call,
    render_tool_schemas,
    scan_stream,
    wrap_response,
)
from .transport import HttpToolClient, StdioToolClient, ToolTimeoutError

ROUND_CAP_NOTE = "No further tool calls are available. Provide your final answer now."


class ConfigError(ValueError):
    """Configuration file problem, reported with file context."""


# --- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ServerEntry:
    name: str
    transport: str  # "http" | "stdio"
    endpoint: str | None = None  # http only
    command: tuple[str, ...] = ()  # stdio only
    auth_token: str | None = None


@dataclass(frozen=True)
class ToolEntry:
    tool: str
    server: str
    rate_limit: int = 120  # calls per minute
    timeout: float = 30.0  # dispatch timeout, seconds
    enabled: bool = True


@dataclass(frozen=True)
class RolloutConfig:
    max_tool_rounds: int = 10
    max_output_tokens: int = 8192
    sampling: SamplingParams = field(default_factory=SamplingParams)
    system_prompt: str = SYSTEM_PROMPT

    def __post_init__(self) -> None:
        if self.max_tool_rounds < 0:
            raise ValueError("max_tool_rounds must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


def _load_json(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _parse_server(path: str | Path, i: int, doc: object) -> ServerEntry:
    where = f"{path}: servers[{i}]"
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: must be an object")
    name = doc.get("name")
    transport = doc.get("transport")
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{where}: 'name' must be a non-empty string")
    if transport not in ("http", "stdio"):
        raise ConfigError(f"{where}: 'transport' must be 'http' or 'stdio'")
    endpoint = doc.get("endpoint")
    command = doc.get("command", [])
    if transport == "http":
        if not isinstance(endpoint, str) or not endpoint:
            raise ConfigError(f"{where}: http transport requires an 'endpoint' URL")
    else:
        if not isinstance(command, list) or not command or not all(isinstance(c, str) for c in command):
            raise ConfigError(f"{where}: stdio transport requires a non-empty 'command' list")
    auth = doc.get("auth_token")
    if auth is not None and not isinstance(auth, str):
        raise ConfigError(f"{where}: 'auth_token' must be a string or null")
    return ServerEntry(
        name=name,
        transport=transport,
        endpoint=endpoint if transport == "http" else None,
        command=tuple(command) if transport == "stdio" else (),
        auth_token=auth,
    )


def _parse_tool(path: str | Path, i: int, doc: object, servers: Mapping[str, ServerEntry]) -> ToolEntry:
    where = f"{path}: tools[{i}]"
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: must be an object")
    tool = doc.get("tool")
    server = doc.get("server")
    if not isinstance(tool, str) or not tool:
        raise ConfigError(f"{where}: 'tool' must be a non-empty string")
    if tool not in STANDARD_SCHEMAS:
        known = ", ".join(STANDARD_SCHEMAS)
        raise ConfigError(f"{where}: no schema known for tool {tool!r} (known tools: {known})")
    if not isinstance(server, str) or server not in servers:
        raise ConfigError(f"{where}: 'server' must name a configured server (got {server!r})")
    rate_limit = doc.get("rate_limit", 120)
    if not isinstance(rate_limit, int) or isinstance(rate_limit, bool) or rate_limit < 1:
        raise ConfigError(f"{where}: 'rate_limit' must be a positive integer (calls/minute)")
    timeout = doc.get("timeout", 30.0)
    if not isinstance(timeout, (int, float)) or isinstance(timeout, bool) or timeout <= 0:
        raise ConfigError(f"{where}: 'timeout' must be a positive number of seconds")
    enabled = doc.get("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError(f"{where}: 'enabled' must be a boolean")
    return ToolEntry(tool=tool, server=server, rate_limit=rate_limit, timeout=float(timeout), enabled=enabled)


def load_configs(
    servers_path: str | Path, tools_path: str | Path
) -> tuple[tuple[ServerEntry, ...], tuple[ToolEntry, ...], ToolRegistry]:
    """Load and validate the server and tool configuration files, returning
    a dispatch-ready registry of the enabled tools."""
    servers_doc = _load_json(servers_path)
    if not isinstance(servers_doc.get("servers"), list):
        raise ConfigError(f"{servers_path}: missing 'servers' list")
    servers: dict[str, ServerEntry] = {}
    for i, entry_doc in enumerate(servers_doc["servers"]):
        entry = _parse_server(servers_path, i, entry_doc)
        if entry.name in servers:
            raise ConfigError(f"{servers_path}: servers[{i}]: duplicate server name {entry.name!r}")
        servers[entry.name] = entry

    tools_doc = _load_json(tools_path)
    if not isinstance(tools_doc.get("tools"), list):
        raise ConfigError(f"{tools_path}: missing 'tools' list")
    tools: list[ToolEntry] = []
    seen: set[str] = set()
    for i, entry_doc in enumerate(tools_doc["tools"]):
        entry = _parse_tool(tools_path, i, entry_doc, servers)
        if entry.tool in seen:
            raise ConfigError(f"{tools_path}: tools[{i}]: duplicate tool {entry.tool!r}")
        seen.add(entry.tool)
        tools.append(entry)

    registry = ToolRegistry()
    clients: dict[str, object] = {}
    for entry in tools:
        if not entry.enabled:
            continue
        server = servers[entry.server]
        if server.name not in clients:
            if server.transport == "http":
                assert server.endpoint is not None
                clients[server.name] = HttpToolClient(server.endpoint, server.auth_token)
            else:
                clients[server.name] = StdioToolClient(server.command)
        registry.register(
            STANDARD_SCHEMAS[entry.tool],
            clients[server.name],  # type: ignore[arg-type]
            rate_limit=entry.rate_limit,
            timeout=entry.timeout,
        )
    return tuple(servers.values()), tuple(tools), registry


# --- rate limiting ------------------------------------------------------------


class RateLimiter:
    """Global sliding-window limiter: at most ``limit`` admissions per tool
    in any ``window`` seconds, across all workers.

    ``clock``/``sleep`` are injectable so saturation behaviour is testable
    without wall time.  ``admissions`` keeps the full admission log for
    auditing the window property.
    """

    def __init__(
        self,
        limits: Mapping[str, int],
        *,
        window: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        for tool, limit in limits.items():
            if limit < 1:
                raise ValueError(f"rate limit for {tool!r} must be >= 1")
        self._limits = dict(limits)
        self._window = window
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._recent: dict[str, deque[float]] = {}
        self._log: dict[str, list[float]] = {}

    @classmethod
    def from_tool_entries(cls, entries: Iterable[ToolEntry], **kwargs: object) -> "RateLimiter":
        return cls({e.tool: e.rate_limit for e in entries if e.enabled}, **kwargs)  # type: ignore[arg-type]

    def acquire(self, tool: str) -> float:
        """Block until an admission slot is free; returns the admission time."""
        limit = self._limits.get(tool)
        while True:
            with self._lock:
                now = self._clock()
                recent = self._recent.setdefault(tool, deque())
                while recent and recent[0] <= now - self._window:
                    recent.popleft()
                if limit is None or len(recent) < limit:
                    recent.append(now)
                    self._log.setdefault(tool, []).append(now)
                    return now
                wait = recent[0] + self._window - now
            self._sleep(max(wait, 1e-3))

    def admissions(self, tool: str) -> list[float]:
        with self._lock:
            return list(self._log.get(tool, []))


# --- traces ---------------------------------------------------------------------


@dataclass(frozen=True)
class ThinkSegment:
    text: str


@dataclass(frozen=True)
class CallSegment:
    tool_name: str
    arguments: Mapping[str, object]
    raw_text: str


@dataclass(frozen=True)
class ResponseSegment:
    payload: str
    is_error: bool
    error_kind: str | None


Segment = ThinkSegment | CallSegment | ResponseSegment


@dataclass(frozen=True)
class RolloutTrace:
    problem_id: str
    sample_index: int
    segments: tuple[Segment, ...]
    final_text: str
    answer: int | None
    tool_rounds: int
    tokens_used: int
    latencies: tuple[float, ...]  # per dispatched call, seconds
    failure: str | None = None  # rollout-level crash, recorded not raised


def validate_trace(trace: RolloutTrace, max_tool_rounds: int | None = None) -> None:
    """Check the alternation invariant: every tool_call is immediately
    followed by exactly one tool_response, and counts agree."""
    segments = trace.segments
    calls = 0
    for i, seg in enumerate(segments):
        if isinstance(seg, CallSegment):
            calls += 1
            if i + 1 >= len(segments) or not isinstance(segments[i + 1], ResponseSegment):
                raise ValueError(f"tool_call at segment {i} lacks an immediate tool_response")
        if isinstance(seg, ResponseSegment):
            if i == 0 or not isinstance(segments[i - 1], CallSegment):
                raise ValueError(f"tool_response at segment {i} lacks a preceding tool_call")
    responses = sum(1 for seg in segments if isinstance(seg, ResponseSegment))
    if calls != responses:
        raise ValueError(f"{calls} tool_calls but {responses} tool_responses")
    if trace.tool_rounds != calls:
        raise ValueError(f"tool_rounds={trace.tool_rounds} but trace has {calls} calls")
    if len(trace.latencies) != calls:
        raise ValueError(f"{len(trace.latencies)} latencies for {calls} calls")
    if max_tool_rounds is not None and calls > max_tool_rounds:
        raise ValueError(f"{calls} calls exceed the round cap {max_tool_rounds}")


def _segment_to_json(seg: Segment) -> dict:
    if isinstance(seg, ThinkSegment):
        return {"kind": "think", "text": seg.text}
    if isinstance(seg, CallSegment):
        return {
            "kind": "tool_call",
            "tool": seg.tool_name,
            "arguments": dict(seg.arguments),
            "raw": seg.raw_text,
        }
    return {
        "kind": "tool_response",
        "payload": seg.payload,
        "is_error": seg.is_error,
        "error_kind": seg.error_kind,
    }


def _segment_from_json(doc: dict) -> Segment:
    kind = doc.get("kind")
    if kind == "think":
        return ThinkSegment(text=doc["text"])
    if kind == "tool_call":
        return CallSegment(tool_name=doc["tool"], arguments=doc["arguments"], raw_text=doc["raw"])
    if kind == "tool_response":
        return ResponseSegment(
            payload=doc["payload"], is_error=doc["is_error"], error_kind=doc["error_kind"]
        )
    raise ValueError(f"unknown segment kind {kind!r}")


def trace_to_json(trace: RolloutTrace) -> dict:
    return {
        "problem_id": trace.problem_id,
        "sample_index": trace.sample_index,
        "segments": [_segment_to_json(seg) for seg in trace.segments],
        "final_text": trace.final_text,
        "answer": trace.answer,
        "tool_rounds": trace.tool_rounds,
        "tokens_used": trace.tokens_used,
        "latencies": list(trace.latencies),
        "failure": trace.failure,
    }


def trace_from_json(doc: dict) -> RolloutTrace:
    return RolloutTrace(
        problem_id=doc["problem_id"],
        sample_index=doc["sample_index"],
        segments=tuple(_segment_from_json(s) for s in doc["segments"]),
        final_text=doc["final_text"],
        answer=doc["answer"],
        tool_rounds=doc["tool_rounds"],
        tokens_used=doc["tokens_used"],
        latencies=tuple(doc["latencies"]),
        failure=doc.get("failure"),
    )


def write_traces(traces: Iterable[RolloutTrace], path: str | Path, *, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as handle:
        for trace in traces:
            handle.write(json.dumps(trace_to_json(trace), ensure_ascii=False) + "\n")


def read_traces(path: str | Path) -> list[RolloutTrace]:
    traces = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                traces.append(trace_from_json(json.loads(line)))
    return traces


# --- the rollout loop -----------------------------------------------------------


def build_initial_context(
    problem: str, cfg: RolloutConfig, registry: ToolRegistry
) -> tuple[Message, ...]:
    """System prompt (instructions + rendered tool documentation) followed
    by the problem as the user turn."""
    if not problem.strip():
        raise ValueError("problem statement must be non-empty")
    system = f"{cfg.system_prompt}\n\n{render_tool_schemas(registry)}"
    return (Message("system", system), Message("user", problem))


_FAILURE_KIND = {"unknown_tool": "unknown_tool"}  # everything else: malformed_call


def _dispatch(
    parsed: ToolCall | ParseFailure,
    registry: ToolRegistry,
    limiter: RateLimiter | None,
    clock: Callable[[], float],
) -> tuple[ToolResponse, float]:
    """Resolve one parsed call (or failure) into a response, never raising."""
    if isinstance(parsed, ParseFailure):
        kind = _FAILURE_KIND.get(parsed.category, "malformed_call")
        return ToolResponse.error(kind, parsed.detail), 0.0
    entry = registry.entry_for(parsed.tool_name)
    if entry is None or entry.client is None:
        return (
            ToolResponse.error(
                "execution_error", f"no endpoint configured for tool {parsed.tool_name!r}"
            ),
            0.0,
        )
    if limiter is not None:
        limiter.acquire(parsed.tool_name)
    start = clock()
    try:
        response = entry.client.call(parsed, entry.timeout)
    except ToolTimeoutError as exc:
        response = ToolResponse.error("timeout", str(exc))
    except Exception as exc:
        response = ToolResponse.error("execution_error", f"tool dispatch failed: {exc}")
    return response, clock() - start


def run_rollout(
    problem: str,
    cfg: RolloutConfig,
    registry: ToolRegistry,
    backend: InferenceBackend,
    *,
    limiter: RateLimiter | None = None,
    problem_id: str = "p0",
    sample_index: int = 0,
    grammar: TagGrammar = DEFAULT_GRAMMAR,
    clock: Callable[[], float] = time.perf_counter,
) -> RolloutTrace:
    """Run one complete think/call/response rollout."""
    messages = list(build_initial_context(problem, cfg, registry))
    segments: list[Segment] = []
    latencies: list[float] = []
    tokens_used = 0
    rounds = 0
    final_text = ""

    def gen_params() -> SamplingParams:
        remaining = max(1, cfg.max_output_tokens - tokens_used)
        return replace(
            cfg.sampling,
            stop_sequences=(grammar.call_close,),
            max_tokens=min(cfg.sampling.max_tokens, remaining),
        )

    while True:
        result = backend.generate(messages, gen_params())
        tokens_used += result.token_count
        text = result.text
        if result.finish_reason == "stop_sequence" and result.matched_stop == grammar.call_close:
            # The provider consumed the closing tag; restore it before scanning.
            text += grammar.call_close
        scan = scan_stream(text, grammar)
        if not isinstance(scan, CompleteCall):
            # Natural completion — or generation died mid-call (partial tag):
            # either way there is nothing to dispatch.
            if text:
                segments.append(ThinkSegment(text))
            final_text = text
            break

        think = text[: scan.start]
        if think.strip():
            segments.append(ThinkSegment(think))
        parsed = parse_tool_call(scan.span, registry)
        response, latency = _dispatch(parsed, registry, limiter, clock)
        if isinstance(parsed, ToolCall):
            segments.append(
                CallSegment(
                    tool_name=parsed.tool_name,
                    arguments=dict(parsed.arguments),
                    raw_text=parsed.raw_text,
                )
            )
        else:
            segments.append(
                CallSegment(tool_name=parsed.tool_name, arguments={}, raw_text=scan.span)
            )
        segments.append(
            ResponseSegment(
                payload=response.payload,
                is_error=response.is_error,
                error_kind=response.error_kind,
            )
        )
        latencies.append(latency)
        rounds += 1

        # First call wins: anything decoded after the closing tag is dropped.
        assistant_text = text[: scan.end]
        messages.append(Message("assistant", assistant_text))
        messages.append(Message("tool", wrap_response(response, grammar)))
        final_text = assistant_text

        if tokens_used >= cfg.max_output_tokens:
            break  # budget exhausted; the overshooting generation is kept
        if rounds >= cfg.max_tool_rounds:
            messages.append(Message("system", ROUND_CAP_NOTE))
            result = backend.generate(messages, gen_params())
            tokens_used += result.token_count
            closing = result.text
            if result.finish_reason == "stop_sequence" and result.matched_stop == grammar.call_close:
                closing += grammar.call_close
            if closing:
                segments.append(ThinkSegment(closing))
            final_text = closing
            break

    trace = RolloutTrace(
        problem_id=problem_id,
        sample_index=sample_index,
        segments=tuple(segments),
        final_text=final_text,
        answer=extract_answer(final_text),
        tool_rounds=rounds,
        tokens_used=tokens_used,
        latencies=tuple(latencies),
    )
    validate_trace(trace)
    return trace


def run_batch(
    problems: Sequence[tuple[str, str]],
    cfg: RolloutConfig,
    registry: ToolRegistry,
    backend: InferenceBackend,
    *,
    samples_per_problem: int = 1,
    parallelism: int = 1,
    limiter: RateLimiter | None = None,
    trace_path: str | Path | None = None,
    grammar: TagGrammar = DEFAULT_GRAMMAR,
    clock: Callable[[], float] = time.perf_counter,
) -> list[RolloutTrace]:
    """Run ``samples_per_problem`` rollouts per (problem_id, text) pair.

    Results (and the trace file, if requested) are ordered problem-major,
    sample-minor.  A rollout that raises is recorded as a failed trace; the
    batch always completes.
    """
    if samples_per_problem < 1:
        raise ValueError("samples_per_problem must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    jobs = [
        (problem_id, text, sample)
        for problem_id, text in problems
        for sample in range(samples_per_problem)
    ]

    def work(job: tuple[str, str, int]) -> RolloutTrace:
        problem_id, text, sample = job
        try:
            return run_rollout(
                text,
                cfg,
                registry,
                backend,
                limiter=limiter,
                problem_id=problem_id,
                sample_index=sample,
                grammar=grammar,
                clock=clock,
            )
        except Exception as exc:
            return RolloutTrace(
                problem_id=problem_id,
                sample_index=sample,
                segments=(),
                final_text="",
                answer=None,
                tool_rounds=0,
                tokens_used=0,
                latencies=(),
                failure=f"{type(exc).__name__}: {exc}",
            )

    traces: list[RolloutTrace] = []
    handle = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            # Executor.map yields in submission order, so traces stream to
            # the file in deterministic order at any parallelism.
            for trace in pool.map(work, jobs):
                traces.append(trace)
                if handle is not None:
                    handle.write(json.dumps(trace_to_json(trace), ensure_ascii=False) + "\n")
                    handle.flush()
    finally:
        if handle is not None:
            handle.close()
    return traces
