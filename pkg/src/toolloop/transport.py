"""Wire plumbing between the orchestrator and the tool servers.

Wire format, both transports: a request is the canonical call object
``{"name": ..., "arguments": {...}}``; a response is
``{"payload": ..., "is_error": ..., "error_kind": ...}``.

* HTTP: ``POST {endpoint}/tools/{name}`` with the request as the JSON body;
  optional ``Authorization: Bearer <token>``.  Non-2xx statuses and
  transport failures raise; the orchestrator converts raised failures into
  model-visible error responses.
* stdio: one request per line on the child's stdin, one response per line
  on its stdout.  Used to host a tool server as a subprocess.

``LocalToolClient`` short-circuits the wire entirely for in-process use.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Sequence, TextIO

import httpx

from .protocol import ERROR_KINDS, ToolCall, ToolResponse

ToolHandler = Callable[[ToolCall], ToolResponse]


class ToolTransportError(RuntimeError):
    """Transport-level failure (connection refused, bad status, protocol)."""


class ToolTimeoutError(ToolTransportError):
    """The tool server did not answer within the dispatch timeout."""


def call_to_wire(call: ToolCall) -> dict:
    return {"name": call.tool_name, "arguments": dict(call.arguments)}


def call_from_wire(doc: dict) -> ToolCall:
    name = doc.get("name")
    arguments = doc.get("arguments", {})
    if not isinstance(name, str) or not isinstance(arguments, dict):
        raise ToolTransportError("malformed call document on the wire")
    return ToolCall(tool_name=name, arguments=arguments)


def response_to_wire(response: ToolResponse) -> dict:
    return {
        "payload": response.payload,
        "is_error": response.is_error,
        "error_kind": response.error_kind,
    }


def response_from_wire(doc: dict) -> ToolResponse:
    payload = doc.get("payload")
    kind = doc.get("error_kind")
    if not isinstance(payload, str) or (kind is not None and kind not in ERROR_KINDS):
        raise ToolTransportError("malformed response document on the wire")
    return ToolResponse(payload=payload, is_error=kind is not None, error_kind=kind)


class LocalToolClient:
    """In-process dispatch: calls the handler directly."""

    def __init__(self, handler: ToolHandler) -> None:
        self._handler = handler

    def call(self, call: ToolCall, timeout: float) -> ToolResponse:
        return self._handler(call)


class HttpToolClient:
    def __init__(self, endpoint: str, auth_token: str | None = None) -> None:
        self.endpoint = endpoint.rstrip("/")
        self._token = auth_token

    def call(self, call: ToolCall, timeout: float) -> ToolResponse:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        url = f"{self.endpoint}/tools/{call.tool_name}"
        try:
            resp = httpx.post(url, json=call_to_wire(call), headers=headers, timeout=timeout)
        except httpx.TimeoutException as exc:
            raise ToolTimeoutError(f"tool server did not answer within {timeout:g} s") from exc
        except httpx.TransportError as exc:
            raise ToolTransportError(f"cannot reach tool server at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise ToolTransportError(f"tool server returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return response_from_wire(resp.json())
        except (json.JSONDecodeError, ValueError) as exc:
            raise ToolTransportError(f"tool server returned malformed JSON: {exc}") from exc


class StdioToolClient:
    """Line-protocol client over a child process's stdin/stdout.

    Requests are serialized under a lock; a response that does not arrive
    within the timeout kills the child (it will be respawned lazily) so a
    stuck server cannot poison later calls with stale lines.
    """

    def __init__(self, command: Sequence[str]) -> None:
        if not command:
            raise ValueError("stdio transport requires a non-empty command")
        self._command = tuple(command)
        self._proc: subprocess.Popen[str] | None = None
        self._lock = threading.Lock()

    def _ensure_child(self) -> subprocess.Popen[str]:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        return self._proc

    def close(self) -> None:
        with self._lock:
            if self._proc is not None and self._proc.poll() is None:
                self._proc.kill()
                self._proc.wait()
            self._proc = None

    def call(self, call: ToolCall, timeout: float) -> ToolResponse:
        with self._lock:
            proc = self._ensure_child()
            assert proc.stdin is not None and proc.stdout is not None
            try:
                proc.stdin.write(json.dumps(call_to_wire(call), ensure_ascii=False) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._proc = None
                raise ToolTransportError(f"stdio tool server is gone: {exc}") from exc
            replies: queue.Queue[str] = queue.Queue()
            reader = threading.Thread(target=lambda: replies.put(proc.stdout.readline()), daemon=True)
            reader.start()
            try:
                line = replies.get(timeout=timeout)
            except queue.Empty:
                proc.kill()
                self._proc = None
                raise ToolTimeoutError(f"stdio tool server did not answer within {timeout:g} s")
            if not line:
                self._proc = None
                raise ToolTransportError("stdio tool server closed its stdout")
            try:
                return response_from_wire(json.loads(line))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ToolTransportError(f"stdio tool server sent malformed JSON: {exc}") from exc


class HttpToolServer:
    """Threaded HTTP server hosting tool handlers; binds on construction.

    ``port=0`` picks a free port (read it back from ``.port``); ``serve``
    blocks, ``start`` runs in a daemon thread for in-process use.
    """

    def __init__(
        self,
        handlers: Mapping[str, ToolHandler],
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        auth_token: str | None = None,
    ) -> None:
        table = dict(handlers)
        token = auth_token

        class _Handler(BaseHTTPRequestHandler):
            def log_message(self, *args: object) -> None:  # keep tests quiet
                pass

            def _reply(self, status: int, doc: dict) -> None:
                body = json.dumps(doc).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self) -> None:
                if token is not None:
                    supplied = self.headers.get("Authorization", "")
                    if supplied != f"Bearer {token}":
                        self._reply(401, {"error": "missing or invalid auth token"})
                        return
                if not self.path.startswith("/tools/"):
                    self._reply(404, {"error": f"unknown route {self.path!r}"})
                    return
                name = self.path[len("/tools/") :]
                handler = table.get(name)
                if handler is None:
                    self._reply(404, {"error": f"no handler for tool {name!r}"})
                    return
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                try:
                    call = call_from_wire(json.loads(raw.decode("utf-8")))
                except (json.JSONDecodeError, UnicodeDecodeError, ToolTransportError) as exc:
                    self._reply(400, {"error": f"bad request body: {exc}"})
                    return
                try:
                    response = handler(call)
                except Exception as exc:  # handler crash stays server-side
                    self._reply(500, {"error": f"{type(exc).__name__}: {exc}"})
                    return
                self._reply(200, response_to_wire(response))

        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def serve_stdio(handlers: Mapping[str, ToolHandler], stdin: TextIO, stdout: TextIO) -> None:
    """Host tool handlers over the stdio line protocol until EOF.

    Protocol errors are answered in-band as error responses so a confused
    client still gets one line back per line sent.
    """
    for line in stdin:
        if not line.strip():
            continue
        try:
            call = call_from_wire(json.loads(line))
        except (json.JSONDecodeError, ToolTransportError) as exc:
            response = ToolResponse.error("malformed_call", f"bad request line: {exc}")
        else:
            handler = handlers.get(call.tool_name)
            if handler is None:
                response = ToolResponse.error("unknown_tool", f"no handler for tool {call.tool_name!r}")
            else:
                try:
                    response = handler(call)
                except Exception as exc:
                    response = ToolResponse.error("execution_error", f"{type(exc).__name__}: {exc}")
        stdout.write(json.dumps(response_to_wire(response), ensure_ascii=False) + "\n")
        stdout.flush()
