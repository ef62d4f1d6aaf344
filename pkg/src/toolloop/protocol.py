"""Tagged tool-call protocol shared by the model loop and the tool servers.

The model interleaves free-form reasoning with tool invocations.  A call is
delimited by ``<tool_call>`` / ``</tool_call>`` and carries a single JSON
object ``{"name": ..., "arguments": {...}}``.  Tool output is returned to the
model wrapped in ``<tool_response>`` / ``</tool_response>``.  Generation stops
at the closing call tag, so the runtime scans each decoded turn for the first
complete call, dispatches it, and feeds the wrapped response back.

This module owns the grammar (tags), the schema/registry types, streaming
detection (:func:`scan_stream`), call parsing with schema validation
(:func:`parse_tool_call`), canonical serialization, and response wrapping.
Everything here is pure and deterministic; no I/O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Literal, Mapping, Protocol

CALL_OPEN = "<tool_call>"
CALL_CLOSE = "</tool_call>"
RESPONSE_OPEN = "<tool_response>"
RESPONSE_CLOSE = "</tool_response>"

ErrorKind = Literal[
    "unknown_tool",
    "malformed_call",
    "execution_error",
    "retrieval_error",
    "timeout",
]

ERROR_KINDS: tuple[str, ...] = (
    "unknown_tool",
    "malformed_call",
    "execution_error",
    "retrieval_error",
    "timeout",
)

FailureCategory = Literal["malformed", "unknown_tool", "missing_arg", "bad_arg_type"]

# Semantic argument types.  "integer" accepts Python ints only; "number"
# accepts ints and floats (ints are coerced); "text" accepts str only.
ArgType = Literal["text", "integer", "number"]


@dataclass(frozen=True)
class TagGrammar:
    """The four delimiter literals. Swappable as a unit for experiments."""

    call_open: str = CALL_OPEN
    call_close: str = CALL_CLOSE
    response_open: str = RESPONSE_OPEN
    response_close: str = RESPONSE_CLOSE


DEFAULT_GRAMMAR = TagGrammar()


@dataclass(frozen=True)
class ToolArg:
    """One argument in a tool schema.

    ``description`` is what the model sees in the rendered documentation;
    ``default`` is filled in by :func:`parse_tool_call` when an optional
    argument is omitted.
    """

    name: str
    type: ArgType = "text"
    required: bool = True
    default: Any = None
    description: str = ""


@dataclass(frozen=True)
class ToolSchema:
    """Declared interface of a tool: name, documentation, and arguments."""

    name: str
    description: str
    args: tuple[ToolArg, ...] = ()
    returns: str = ""
    limitations: tuple[str, ...] = ()
    best_practices: tuple[str, ...] = ()

    def arg(self, name: str) -> ToolArg | None:
        for a in self.args:
            if a.name == name:
                return a
        return None


@dataclass(frozen=True)
class ToolCall:
    """A parsed tool invocation.

    ``raw_text`` preserves the original span for tracing and is excluded from
    equality so that parse(serialize(call)) == call holds.
    """

    tool_name: str
    arguments: Mapping[str, Any]
    raw_text: str = field(default="", compare=False)


@dataclass(frozen=True)
class ParseFailure:
    """Why a call span could not be turned into a :class:`ToolCall`.

    Failures are values, not exceptions: the orchestrator converts them into
    model-visible error responses and the rollout continues.
    """

    category: FailureCategory
    detail: str
    tool_name: str = ""


@dataclass(frozen=True)
class ToolResponse:
    """Result of dispatching one tool call.

    Invariant: ``is_error`` is True if and only if ``error_kind`` is set.
    """

    payload: str
    is_error: bool = False
    error_kind: str | None = None

    def __post_init__(self) -> None:
        if self.is_error != (self.error_kind is not None):
            raise ValueError("is_error must match presence of error_kind")
        if self.error_kind is not None and self.error_kind not in ERROR_KINDS:
            raise ValueError(f"unknown error_kind: {self.error_kind!r}")

    @classmethod
    def ok(cls, payload: str) -> "ToolResponse":
        return cls(payload=payload)

    @classmethod
    def error(cls, kind: str, payload: str) -> "ToolResponse":
        return cls(payload=payload, is_error=True, error_kind=kind)


# --- streaming scan -------------------------------------------------------


@dataclass(frozen=True)
class NoCall:
    """Buffer contains no opening call tag."""


@dataclass(frozen=True)
class PartialCall:
    """An opening tag with no closing tag yet; ``open_pos`` indexes it."""

    open_pos: int


@dataclass(frozen=True)
class CompleteCall:
    """First complete call in the buffer.

    ``span`` is the text strictly between the tags; ``start`` / ``end`` index
    the opening tag and one past the closing tag in the original buffer.
    """

    span: str
    start: int
    end: int


ScanResult = NoCall | PartialCall | CompleteCall


def scan_stream(buffer: str, grammar: TagGrammar = DEFAULT_GRAMMAR) -> ScanResult:
    """Detect the first complete tool call in a decoded text buffer.

    Monotone in the stream: growing the buffer never turns a complete call
    back into a partial or absent one, so the scanner can run incrementally
    as tokens arrive.
    """
    open_pos = buffer.find(grammar.call_open)
    if open_pos < 0:
        return NoCall()
    body_start = open_pos + len(grammar.call_open)
    close_pos = buffer.find(grammar.call_close, body_start)
    if close_pos < 0:
        return PartialCall(open_pos=open_pos)
    return CompleteCall(
        span=buffer[body_start:close_pos],
        start=open_pos,
        end=close_pos + len(grammar.call_close),
    )


# --- parsing and serialization --------------------------------------------


def _type_ok(value: Any, arg_type: ArgType) -> bool:
    # bool is an int subclass; never accept it for numeric arguments.
    if arg_type == "text":
        return isinstance(value, str)
    if arg_type == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if arg_type == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    raise ValueError(f"unknown arg type: {arg_type!r}")


def parse_tool_call(span: str, registry: "ToolRegistry") -> ToolCall | ParseFailure:
    """Parse the text between call tags into a validated :class:`ToolCall`.

    Total: every input yields either a call or a categorized failure.
    Validation fills declared defaults for omitted optional arguments and
    coerces ints to floats for number-typed arguments; all other mismatches
    are strict.
    """
    try:
        doc = json.loads(span)
    except json.JSONDecodeError as exc:
        return ParseFailure("malformed", f"call is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        return ParseFailure("malformed", "call must be a JSON object")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        return ParseFailure("malformed", "call object must carry a string 'name'")
    arguments = doc.get("arguments", {})
    if not isinstance(arguments, dict):
        return ParseFailure(
            "malformed", "'arguments' must be a JSON object", tool_name=name
        )

    schema = registry.schema_for(name)
    if schema is None:
        known = ", ".join(registry.names()) or "(none)"
        return ParseFailure(
            "unknown_tool",
            f"unknown tool {name!r}; available tools: {known}",
            tool_name=name,
        )

    validated: dict[str, Any] = {}
    for arg in schema.args:
        if arg.name not in arguments:
            if arg.required:
                return ParseFailure(
                    "missing_arg",
                    f"missing required argument {arg.name!r} for tool {name!r}",
                    tool_name=name,
                )
            validated[arg.name] = arg.default
            continue
        value = arguments[arg.name]
        if not _type_ok(value, arg.type):
            return ParseFailure(
                "bad_arg_type",
                f"argument {arg.name!r} of tool {name!r} must be {arg.type}, "
                f"got {type(value).__name__}",
                tool_name=name,
            )
        if arg.type == "number" and isinstance(value, int):
            value = float(value)
        validated[arg.name] = value
    for extra in arguments:
        if schema.arg(extra) is None:
            return ParseFailure(
                "bad_arg_type",
                f"unexpected argument {extra!r} for tool {name!r}",
                tool_name=name,
            )
    return ToolCall(tool_name=name, arguments=validated, raw_text=span)


def serialize_tool_call(call: ToolCall) -> str:
    """Canonical textual form of a call: compact JSON with sorted keys.

    ``parse_tool_call(serialize_tool_call(c), registry) == c`` for any call
    whose arguments validate against the registry.
    """
    doc = {"name": call.tool_name, "arguments": dict(call.arguments)}
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def wrap_response(response: ToolResponse, grammar: TagGrammar = DEFAULT_GRAMMAR) -> str:
    """Render a response for the model, delimited by response tags.

    Any tag literal occurring inside the payload is entity-escaped so the
    output contains no call tags and exactly one response tag pair — a
    malicious or unlucky payload can never be re-captured as protocol.
    """
    if response.is_error:
        body = f"Error[{response.error_kind}]: {response.payload}"
    else:
        body = response.payload
    escapes = {
        grammar.call_open: "&lt;tool_call&gt;",
        grammar.call_close: "&lt;/tool_call&gt;",
        grammar.response_open: "&lt;tool_response&gt;",
        grammar.response_close: "&lt;/tool_response&gt;",
    }
    for literal, escaped in escapes.items():
        body = body.replace(literal, escaped)
    return f"{grammar.response_open}{body}{grammar.response_close}"


# --- registry ---------------------------------------------------------------


class ToolClient(Protocol):
    """Transport-side handle that can execute a call and return a response."""

    def call(self, call: ToolCall, timeout: float) -> ToolResponse: ...


@dataclass(frozen=True)
class RegisteredTool:
    schema: ToolSchema
    client: ToolClient | None = None
    rate_limit: int | None = None  # calls per minute
    timeout: float = 30.0


class ToolRegistry:
    """Ordered mapping of tool name -> schema plus dispatch endpoint.

    Registration order is preserved; it determines documentation order in
    :func:`render_tool_schemas`.
    """

    def __init__(self) -> None:
        self._tools: dict[str, RegisteredTool] = {}

    def register(
        self,
        schema: ToolSchema,
        client: ToolClient | None = None,
        *,
        rate_limit: int | None = None,
        timeout: float = 30.0,
    ) -> None:
        if schema.name in self._tools:
            raise ValueError(f"tool {schema.name!r} already registered")
        self._tools[schema.name] = RegisteredTool(
            schema=schema, client=client, rate_limit=rate_limit, timeout=timeout
        )

    def names(self) -> tuple[str, ...]:
        return tuple(self._tools)

    def schema_for(self, name: str) -> ToolSchema | None:
        entry = self._tools.get(name)
        return entry.schema if entry else None

    def entry_for(self, name: str) -> RegisteredTool | None:
        return self._tools.get(name)

    def __len__(self) -> int:
        return len(self._tools)

    def __contains__(self, name: str) -> bool:
        return name in self._tools


def render_tool_schemas(registry: ToolRegistry) -> str:
    """Render every registered schema as the documentation block the model
    sees inside its system prompt.  Deterministic; registration order.
    """
    if len(registry) == 0:
        raise ValueError("cannot render documentation for an empty registry")
    blocks: list[str] = []
    for name in registry.names():
        schema = registry.schema_for(name)
        assert schema is not None
        lines = [f"Tool: {schema.name}", f"Description: {schema.description}"]
        if schema.args:
            lines.append("Args:")
            for arg in schema.args:
                lines.append(f"    {arg.name}: {arg.description or arg.type}")
        if schema.returns:
            lines.append("Returns:")
            lines.append(f"    {schema.returns}")
        if schema.limitations or schema.best_practices:
            lines.append("metadata:")
            if schema.limitations:
                lines.append("    limitations:")
                for i, item in enumerate(schema.limitations, start=1):
                    lines.append(f"        {i}) {item}")
            if schema.best_practices:
                lines.append("    best_practices:")
                for i, item in enumerate(schema.best_practices, start=1):
                    lines.append(f"        {i}) {item}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)
