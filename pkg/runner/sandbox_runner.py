#!/usr/bin/env python3
"""Run one untrusted Python file under resource limits and report a record.

The runner executes a target script in a child interpreter with a wall-clock
timeout, a CPU-time cap, and an optional address-space cap.  Whatever happens
to the guest — clean exit, exception, kill, even an unreadable target path —
the runner's own stdout always ends with a sentinel line followed by exactly
one single-line JSON record::

    ===SANDBOX-RUNNER-RESULT===
    {"exit_status":0,"final_exception_type":null,"stderr":"","stdout":"4\\n","wall_time_ms":31}

Guest output is captured into the record, never echoed, so a guest printing
the sentinel itself can only move text *inside* the record; consumers that
parse the record after the LAST sentinel line cannot be spoofed.

The script is dependency-free on purpose: it is shipped into sandboxes by
path and must run on a bare CPython (3.9+, POSIX).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import resource
import signal
import subprocess
import sys
import time

SENTINEL = "===SANDBOX-RUNNER-RESULT==="
TIMEOUT_EXIT = 124  # same convention as coreutils timeout(1)
INTERNAL_ERROR_EXIT = 70  # EX_SOFTWARE: the runner itself failed, not the guest
UNREADABLE_EXIT = 2  # matches CPython's "can't open file" exit code
STREAM_CAP = 2 * 1024 * 1024  # bytes kept per captured stream
TRUNCATION_MARK = "…[output truncated]"

# A traceback's final line names the exception class, optionally dotted and
# optionally followed by ": message".  The LAST such line wins so chained
# tracebacks report the exception that actually terminated the guest.
_ERROR_LINE = re.compile(
    r"^([A-Za-z_][A-Za-z0-9_.]*(?:Error|Exception))(?::.*)?$", re.MULTILINE
)


def final_exception_type(stderr: str) -> str | None:
    """Return the exception class named on the last traceback line, if any."""
    last = None
    for match in _ERROR_LINE.finditer(stderr):
        last = match.group(1)
    return last


def _truncate(raw: bytes) -> str:
    if len(raw) > STREAM_CAP:
        return raw[:STREAM_CAP].decode("utf-8", errors="replace") + TRUNCATION_MARK
    return raw.decode("utf-8", errors="replace")


def _limit_child(timeout: float, memory_mb: int | None):
    """Build the pre-exec hook that caps the guest's CPU time and memory.

    The CPU cap sits one second above the wall-clock timeout so a busy loop
    is reaped by the wall-clock kill (exit 124) rather than by SIGXCPU; the
    CPU cap only catches guests that burn CPU while something else keeps the
    wall clock alive.
    """

    def apply() -> None:
        cpu = max(1, int(math.ceil(timeout)) + 1)
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        if memory_mb is not None:
            cap = memory_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (cap, cap))

    return apply


def _kill_group(proc: subprocess.Popen) -> None:
    """Kill the guest and anything it spawned (it leads its own session)."""
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def run_target(target: str, timeout: float, memory_mb: int | None) -> dict:
    """Execute ``target`` under limits and return the result record."""
    try:
        with open(target, "rb"):
            pass
    except OSError as exc:
        return {
            "stdout": "",
            "stderr": f"sandbox runner: cannot read target {target!r}: {exc}",
            "exit_status": UNREADABLE_EXIT,
            "wall_time_ms": 0,
            "final_exception_type": None,
        }

    start = time.monotonic()
    proc = subprocess.Popen(
        [sys.executable, target],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        preexec_fn=_limit_child(timeout, memory_mb),
        start_new_session=True,
    )
    try:
        out, err = proc.communicate(timeout=timeout)
        status = proc.returncode
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        try:
            out, err = proc.communicate(timeout=1.0)
        except subprocess.TimeoutExpired:  # pragma: no cover - kill always lands
            out, err = b"", b""
        status = TIMEOUT_EXIT
    wall_ms = int(round((time.monotonic() - start) * 1000))

    stderr = _truncate(err or b"")
    return {
        "stdout": _truncate(out or b""),
        "stderr": stderr,
        "exit_status": status,
        "wall_time_ms": wall_ms,
        "final_exception_type": final_exception_type(stderr) if status != 0 else None,
    }


def emit(record: dict) -> None:
    """Print the sentinel and the record as the final lines of stdout.

    The record is one line of canonical JSON: sorted keys, compact
    separators, ASCII-escaped so the line survives any stdout encoding.
    """
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    sys.stdout.write(f"{SENTINEL}\n{line}\n")
    sys.stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sandbox-runner",
        description="Run a Python file under resource limits; always end "
        "stdout with a sentinel line and a one-line JSON result record.",
    )
    parser.add_argument("target", help="path of the Python file to execute")
    parser.add_argument(
        "--timeout",
        type=float,
        default=30.0,
        help="wall-clock limit in seconds; on expiry the guest is killed "
        f"and exit_status is {TIMEOUT_EXIT} (default: 30)",
    )
    parser.add_argument(
        "--memory-mb",
        type=int,
        default=None,
        help="address-space cap for the guest in MiB (default: unlimited)",
    )
    args = parser.parse_args(argv)

    try:
        record = run_target(args.target, args.timeout, args.memory_mb)
    except Exception as exc:  # never exit without a record
        record = {
            "stdout": "",
            "stderr": f"sandbox runner: internal failure: {type(exc).__name__}: {exc}",
            "exit_status": INTERNAL_ERROR_EXIT,
            "wall_time_ms": 0,
            "final_exception_type": None,
        }
    emit(record)
    return 0


if __name__ == "__main__":
    sys.exit(main())
