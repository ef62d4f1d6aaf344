"""Code-execution tool server.

Guest code arriving from the model is (1) passed through cheap rule-based
repairs for the two mechanical failure modes models exhibit constantly —
markdown fences left around the program and spurious uniform indentation —
then (2) executed in a fresh interpreter subprocess with a wall-clock
timeout and output caps, and (3) on failure the traceback is classified so a
fixed per-class advice template can be appended to the error fed back to the
model.  Crashes stay inside the guest: every outcome, including timeouts and
unparseable code, becomes an :class:`ExecutionResult` / error response.

Execution can optionally be delegated to an external sandbox runner script
(see ``runner/``) that applies OS resource limits and reports a structured
record on its stdout behind a sentinel line.
"""

from __future__ import annotations

import json
import os
import re
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .defaults import ALLOWED_PACKAGES, PYTHON_EXECUTOR_TOOL
from .protocol import ToolCall, ToolResponse

# Sentinel preceding the JSON result record on the sandbox runner's stdout.
# The runner script is dependency-free and defines the same literal.
RUNNER_SENTINEL = "===SANDBOX-RUNNER-RESULT==="
RUNNER_TIMEOUT_EXIT = 124


class ErrorClass(str, Enum):
    NONE = "none"
    SYNTAX_ERROR = "SyntaxError"
    INDENTATION_ERROR = "IndentationError"
    NAME_ERROR = "NameError"
    INDEX_ERROR = "IndexError"
    TYPE_ERROR = "TypeError"
    VALUE_ERROR = "ValueError"
    IMPORT_ERROR = "ImportError"
    ATTRIBUTE_ERROR = "AttributeError"
    NOT_IMPLEMENTED_ERROR = "NotImplementedError"
    TIMEOUT = "Timeout"
    OTHER = "Other"


_NAMED_CLASSES = {
    cls.value: cls
    for cls in ErrorClass
    if cls not in (ErrorClass.NONE, ErrorClass.TIMEOUT, ErrorClass.OTHER)
}

# ModuleNotFoundError is the runtime subclass raised for a missing module;
# the model-facing taxonomy folds it into ImportError.
_CLASS_ALIASES = {"ModuleNotFoundError": ErrorClass.IMPORT_ERROR}


@dataclass(frozen=True)
class ExecutionLimits:
    """Caps applied to one guest execution."""

    timeout: float = 30.0
    max_output_bytes: int = 64 * 1024
    allowed_packages: tuple[str, ...] = ALLOWED_PACKAGES
    interpreter: str | None = None  # defaults to sys.executable
    runner_script: str | None = None  # delegate to the sandbox runner when set
    memory_limit_mb: int | None = None  # enforced only in runner mode
    workdir: str | None = None  # where guest temp files are created

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_output_bytes <= 0:
            raise ValueError("max_output_bytes must be positive")


@dataclass(frozen=True)
class GuestCode:
    """Source after rule-based repair, with the fixes that were applied
    (in application order; empty for already-valid code)."""

    source: str
    applied_fixes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExecutionResult:
    stdout: str
    stderr: str
    exit_status: int
    duration: float
    error_class: ErrorClass


class ComputeServerError(RuntimeError):
    """Server-side configuration problem (missing interpreter, broken
    runner protocol) — never shown to the model as a tool payload."""


# --- rule-based repair ------------------------------------------------------

_OPENING_FENCE = re.compile(r"^\s*(```+|~~~+)[A-Za-z0-9_+.-]*\s*$")
_CLOSING_FENCE = re.compile(r"^\s*(```+|~~~+)\s*$")
_QUOTE_FENCE = re.compile(r"^\s*(\"\"\"|''')\s*$")


def _compiles(source: str) -> BaseException | None:
    try:
        compile(source, "<guest>", "exec")
    except SyntaxError as exc:  # IndentationError is a SyntaxError subclass
        return exc
    except (ValueError, RecursionError, MemoryError) as exc:
        return exc
    return None


def _fence_strip(source: str) -> str:
    lines = source.split("\n")
    first = next((i for i, ln in enumerate(lines) if ln.strip()), None)
    if first is None:
        return source
    had_opening = bool(_OPENING_FENCE.match(lines[first]))
    if had_opening:
        del lines[first]
    # Drop trailing fence lines: real closing fences always, stray quote
    # fences only when the text was fence-wrapped (the pattern where a model
    # closes a ```python block with """ instead of ```).
    while lines:
        last = len(lines) - 1
        while last >= 0 and not lines[last].strip():
            last -= 1
        if last < 0:
            break
        ln = lines[last]
        if _CLOSING_FENCE.match(ln) or (had_opening and _QUOTE_FENCE.match(ln)):
            del lines[last]
            had_opening = False  # at most one stray quote fence
            continue
        break
    return "\n".join(lines)


def _indent_width(line: str) -> int:
    return len(line) - len(line.lstrip(" \t"))


def _indent_repair(source: str) -> str:
    """Remove spurious uniform leading indentation, one offending line at a
    time, re-checking legality with the parser after each removal.

    Only fires on ``unexpected indent``: the offending line is dedented to
    the indentation of the nearest preceding non-blank line (which, for this
    error, never opens a block).  Anything else is left for the interpreter
    to report.
    """
    lines = source.split("\n")
    for _ in range(200):
        exc = _compiles("\n".join(lines))
        if not isinstance(exc, IndentationError) or "unexpected indent" not in str(exc):
            break
        lineno = exc.lineno or 0
        idx = lineno - 1
        if not 0 <= idx < len(lines):
            break
        prev = idx - 1
        while prev >= 0 and not lines[prev].strip():
            prev -= 1
        target = _indent_width(lines[prev]) if prev >= 0 else 0
        current = _indent_width(lines[idx])
        if current <= target:
            break  # no progress possible
        lines[idx] = " " * target + lines[idx].lstrip(" \t")
    return "\n".join(lines)


def rule_fix(source: str) -> GuestCode:
    """Apply the rule-based repairs to raw guest source.

    Idempotent, and the identity on valid programs: source that already
    compiles is returned byte-identical with no fixes recorded.
    """
    if _compiles(source) is None:
        return GuestCode(source=source)
    applied: list[str] = []
    current = source
    stripped = _fence_strip(current)
    if stripped != current:
        applied.append("fence_strip")
        current = stripped
    exc = _compiles(current)
    if isinstance(exc, IndentationError):
        repaired = _indent_repair(current)
        if repaired != current:
            applied.append("indent_repair")
            current = repaired
    return GuestCode(source=current, applied_fixes=tuple(applied))


# --- execution --------------------------------------------------------------


def _truncate(data: bytes, limit: int) -> str:
    text = data[:limit].decode("utf-8", errors="replace")
    if len(data) > limit:
        text += "\n…[output truncated]"
    return text


def _scrub_guest_path(text: str, guest_path: str) -> str:
    # The random temp-file name would make otherwise-identical runs produce
    # different tracebacks; present a stable name to the model instead.
    return text.replace(guest_path, "guest.py")


def _interpreter(limits: ExecutionLimits) -> str:
    path = limits.interpreter or sys.executable
    if not path or not Path(path).exists():
        raise ComputeServerError(f"guest interpreter not found: {path!r}")
    return path


def execute(code: GuestCode, limits: ExecutionLimits) -> ExecutionResult:
    """Run repaired guest code in a fresh interpreter subprocess.

    The source is written to a private temp file (``guest_<random>.py`` in
    the configured workdir or the system temp dir), executed with the
    configured timeout, and the file is removed afterwards regardless of
    outcome.  Streams are captured and truncated to ``max_output_bytes``
    each, with a visible truncation marker.
    """
    interpreter = _interpreter(limits)
    fd, tmp_path = tempfile.mkstemp(prefix="guest_", suffix=".py", dir=limits.workdir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(code.source)
        if limits.runner_script:
            return _execute_via_runner(interpreter, tmp_path, limits)
        start = time.perf_counter()
        try:
            proc = subprocess.run(
                [interpreter, tmp_path],
                capture_output=True,
                timeout=limits.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            duration = time.perf_counter() - start
            stderr = _scrub_guest_path(
                _truncate(exc.stderr or b"", limits.max_output_bytes), tmp_path
            )
            marker = f"Timeout: execution exceeded the {limits.timeout:g} s limit and was killed."
            stderr = f"{stderr}\n{marker}".lstrip("\n")
            return ExecutionResult(
                stdout=_truncate(exc.stdout or b"", limits.max_output_bytes),
                stderr=stderr,
                exit_status=-9,
                duration=duration,
                error_class=ErrorClass.TIMEOUT,
            )
        duration = time.perf_counter() - start
        stdout = _scrub_guest_path(_truncate(proc.stdout, limits.max_output_bytes), tmp_path)
        stderr = _scrub_guest_path(_truncate(proc.stderr, limits.max_output_bytes), tmp_path)
        return ExecutionResult(
            stdout=stdout,
            stderr=stderr,
            exit_status=proc.returncode,
            duration=duration,
            error_class=classify_error(stderr, proc.returncode),
        )
    finally:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass


def _execute_via_runner(
    interpreter: str, guest_path: str, limits: ExecutionLimits
) -> ExecutionResult:
    cmd = [interpreter, limits.runner_script, guest_path, "--timeout", str(limits.timeout)]
    if limits.memory_limit_mb is not None:
        cmd += ["--memory-mb", str(limits.memory_limit_mb)]
    try:
        proc = subprocess.run(cmd, capture_output=True, timeout=limits.timeout + 15.0)
    except subprocess.TimeoutExpired as exc:
        raise ComputeServerError("sandbox runner did not return within its grace period") from exc
    record = parse_runner_record(proc.stdout.decode("utf-8", errors="replace"))
    stdout = _scrub_guest_path(
        _truncate(record["stdout"].encode("utf-8"), limits.max_output_bytes), guest_path
    )
    stderr = _scrub_guest_path(
        _truncate(record["stderr"].encode("utf-8"), limits.max_output_bytes), guest_path
    )
    exit_status = int(record["exit_status"])
    if exit_status == RUNNER_TIMEOUT_EXIT:
        error_class = ErrorClass.TIMEOUT
        marker = f"Timeout: execution exceeded the {limits.timeout:g} s limit and was killed."
        stderr = f"{stderr}\n{marker}".lstrip("\n")
    else:
        error_class = classify_error(stderr, exit_status)
    return ExecutionResult(
        stdout=stdout,
        stderr=stderr,
        exit_status=exit_status,
        duration=record.get("wall_time_ms", 0) / 1000.0,
        error_class=error_class,
    )


def parse_runner_record(runner_stdout: str) -> dict:
    """Extract the result record from a sandbox runner's stdout.

    The record is the JSON line immediately after the LAST sentinel line;
    guest output lives inside the record, so a guest printing the sentinel
    itself cannot forge a record positioned after the real one.
    """
    lines = runner_stdout.splitlines()
    sentinel_at = None
    for i, line in enumerate(lines):
        if line.strip() == RUNNER_SENTINEL:
            sentinel_at = i
    if sentinel_at is None or sentinel_at + 1 >= len(lines):
        raise ComputeServerError("sandbox runner produced no result record")
    try:
        record = json.loads(lines[sentinel_at + 1])
    except json.JSONDecodeError as exc:
        raise ComputeServerError(f"sandbox runner record is not valid JSON: {exc}") from exc
    for key in ("stdout", "stderr", "exit_status"):
        if key not in record:
            raise ComputeServerError(f"sandbox runner record is missing {key!r}")
    return record


# --- classification and advice ---------------------------------------------

_ERROR_LINE = re.compile(
    r"^([A-Za-z_][A-Za-z0-9_.]*(?:Error|Exception))(?::.*)?$", re.MULTILINE
)


def classify_error(stderr: str, exit_status: int) -> ErrorClass:
    """Name the error class of a finished execution.

    A clean exit is ``none`` regardless of stderr noise.  Otherwise the class
    is the exception named on the final traceback line; with chained
    tracebacks several lines match and the last one wins.  A nonzero exit
    with no recognizable traceback is ``Other``.
    """
    if exit_status == 0:
        return ErrorClass.NONE
    last: str | None = None
    for match in _ERROR_LINE.finditer(stderr):
        last = match.group(1)
    if last is None:
        return ErrorClass.OTHER
    name = last.rsplit(".", 1)[-1]
    if name in _CLASS_ALIASES:
        return _CLASS_ALIASES[name]
    return _NAMED_CLASSES.get(name, ErrorClass.OTHER)


# Fixed advice templates, one per error class; {line} is the final non-empty
# stderr line.  The NameError text and the "consult the retrieval tool" hook
# for library-interface errors are part of the runtime's contract with the
# model and must not be reworded casually.
_RETRIEVE_HINT = (
    "If the failing call targets an external package, you can call "
    "`rag_system_retrieve` to check the function interface and usage "
    "examples before retrying."
)

ADVICE_TEMPLATES: dict[ErrorClass, str] = {
    ErrorClass.SYNTAX_ERROR: (
        "{line}. The code failed to parse; please rewrite the complete "
        "program with valid Python syntax and resend it."
    ),
    ErrorClass.INDENTATION_ERROR: (
        "{line}. The indentation is inconsistent; top-level statements must "
        "start at column zero and block bodies must be indented uniformly. "
        "Please resend the complete program."
    ),
    ErrorClass.NAME_ERROR: (
        "{line}. This error is caused by using a module or a variable that "
        "is not defined, please check if you have imported all using Python "
        "code packages in your code, and you write complete code in your "
        "current tool calling."
    ),
    ErrorClass.INDEX_ERROR: (
        "{line}. An index went out of range; check container lengths and "
        "whether a filter produced an empty list before indexing."
    ),
    ErrorClass.TYPE_ERROR: (
        "{line}. A function received an argument of the wrong type or an "
        "unsupported keyword. " + _RETRIEVE_HINT
    ),
    ErrorClass.VALUE_ERROR: (
        "{line}. A function received a value it cannot accept. " + _RETRIEVE_HINT
    ),
    ErrorClass.IMPORT_ERROR: (
        "{line}. The requested name could not be imported; only sympy, "
        "scipy, numpy, math, cmath, fractions, and itertools are available. "
        + _RETRIEVE_HINT
    ),
    ErrorClass.ATTRIBUTE_ERROR: (
        "{line}. The object has no such attribute or method. " + _RETRIEVE_HINT
    ),
    ErrorClass.NOT_IMPLEMENTED_ERROR: (
        "{line}. The library has no algorithm for this formulation; try a "
        "different solver or a numeric approach. " + _RETRIEVE_HINT
    ),
    ErrorClass.TIMEOUT: (
        "{line} The execution exceeded the time limit; reduce the "
        "computational complexity, avoid brute force over huge ranges, or "
        "use a closed-form approach."
    ),
    ErrorClass.OTHER: (
        "{line}. Execution failed; inspect the traceback, fix the code, and "
        "resend the complete program."
    ),
}


def advice_for(error_class: ErrorClass, stderr_excerpt: str) -> str:
    """Model-facing advice for a failed execution."""
    if error_class == ErrorClass.NONE:
        raise ValueError("no advice for a successful execution")
    lines = [ln for ln in stderr_excerpt.strip().splitlines() if ln.strip()]
    final = lines[-1].strip() if lines else "execution failed"
    return ADVICE_TEMPLATES[error_class].format(line=final)


# --- tool endpoint ----------------------------------------------------------

_STDERR_TAIL_LINES = 30


def _stderr_tail(stderr: str) -> str:
    lines = stderr.strip().splitlines()
    return "\n".join(lines[-_STDERR_TAIL_LINES:])


def handle_compute_call(call: ToolCall, limits: ExecutionLimits) -> ToolResponse:
    """Full tool endpoint: repair, execute, classify, respond.

    Success payload is the guest's stdout; failure payload is the stderr
    tail plus the class advice, flagged ``timeout`` for timeouts and
    ``execution_error`` otherwise.
    """
    if call.tool_name != PYTHON_EXECUTOR_TOOL:
        raise ValueError(f"compute server cannot handle tool {call.tool_name!r}")
    code = call.arguments.get("code")
    if not isinstance(code, str) or not code.strip():
        return ToolResponse.error("malformed_call", "empty code argument")
    fixed = rule_fix(code)
    result = execute(fixed, limits)
    if result.error_class == ErrorClass.NONE:
        return ToolResponse.ok(result.stdout.rstrip("\n"))
    advice = advice_for(result.error_class, result.stderr)
    payload = f"{_stderr_tail(result.stderr)}\n\n{advice}"
    kind = "timeout" if result.error_class == ErrorClass.TIMEOUT else "execution_error"
    return ToolResponse.error(kind, payload)
