"""Model inference gateway.

One narrow interface — ``generate(messages, params) -> GenerationResult`` —
with three implementations:

* :class:`HttpChatBackend` speaks the OpenAI-style chat-completion wire
  format over HTTP (vLLM/SGLang compatible), with retry/backoff and
  client-side stop-sequence enforcement on top of whatever the provider does.
* :class:`ScriptedBackend` is a pure function of the message list, used for
  deterministic replays: the same conversation state always yields the same
  turn, under any concurrency.
* :class:`FixtureBackend` replays request/response pairs recorded with
  :func:`record_fixture` (secrets are never written to fixtures).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Mapping, Protocol, Sequence

import httpx

Role = Literal["system", "user", "assistant", "tool"]
FinishReason = Literal["stop_sequence", "natural_end", "length"]

# Environment variable consulted for the backend auth token when the config
# does not carry one explicitly.
API_TOKEN_ENV = "TOOLLOOP_API_TOKEN"


@dataclass(frozen=True)
class SamplingParams:
    """Decoding controls. Defaults match the experiment protocol
    (temperature 0.6, top-k 20, top-p 0.95)."""

    temperature: float = 0.6
    top_k: int = 20
    top_p: float = 0.95
    max_tokens: int = 8192
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


def validate_messages(messages: Sequence[Message]) -> None:
    """Reject malformed conversations before they reach a provider.

    The first message must be the system prompt and the model never speaks
    twice in a row (tool responses are interleaved as their own role).
    """
    if not messages:
        raise ValueError("message list is empty")
    if messages[0].role != "system":
        raise ValueError("first message must have role 'system'")
    for prev, cur in zip(messages, messages[1:]):
        if prev.role == "assistant" and cur.role == "assistant":
            raise ValueError("two consecutive assistant messages")


@dataclass(frozen=True)
class GenerationResult:
    """One model turn.

    ``matched_stop`` is set exactly when ``finish_reason`` is
    ``stop_sequence``; the matched literal is excluded from ``text``.
    """

    text: str
    finish_reason: FinishReason
    token_count: int
    matched_stop: str | None = None

    def __post_init__(self) -> None:
        if (self.finish_reason == "stop_sequence") != (self.matched_stop is not None):
            raise ValueError("matched_stop must be set iff finish_reason is stop_sequence")


class InferenceBackend(Protocol):
    def generate(self, messages: Sequence[Message], params: SamplingParams) -> GenerationResult: ...


def enforce_stop(text: str, stop_sequences: Sequence[str]) -> tuple[str, str | None]:
    """Truncate ``text`` at the earliest stop-sequence occurrence.

    Returns the truncated text (stop literal excluded) and the matched
    literal, or the original text and None.  Applied client-side even when
    the provider claims to have stopped, so behaviour does not depend on
    provider quirks.
    """
    best_pos: int | None = None
    best_stop: str | None = None
    for stop in stop_sequences:
        pos = text.find(stop)
        if pos >= 0 and (best_pos is None or pos < best_pos):
            best_pos, best_stop = pos, stop
    if best_pos is None:
        return text, None
    return text[:best_pos], best_stop


def approx_token_count(text: str) -> int:
    """Whitespace token count — the documented approximation used when a
    backend does not report usage."""
    return len(text.split())


# --- HTTP chat-completion backend ------------------------------------------


class BackendError(RuntimeError):
    """Transport or protocol failure talking to the inference provider."""


class HttpChatBackend:
    """OpenAI-style ``POST {base_url}/chat/completions`` client.

    ``top_k`` is forwarded in the request body when ``supports_top_k`` is
    True (the default; vLLM and SGLang accept it) and omitted otherwise.
    Transient transport failures are retried with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_token: str | None = None,
        supports_top_k: bool = True,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        request_timeout: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self._token = api_token if api_token is not None else os.environ.get(API_TOKEN_ENV)
        self.supports_top_k = supports_top_k
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.request_timeout = request_timeout
        self._sleep = sleep

    def _request_body(self, messages: Sequence[Message], params: SamplingParams) -> dict:
        body: dict = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        if self.supports_top_k:
            body["top_k"] = params.top_k
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        return body

    def generate(self, messages: Sequence[Message], params: SamplingParams) -> GenerationResult:
        validate_messages(messages)
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        body = self._request_body(messages, params)
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = httpx.post(url, json=body, headers=headers, timeout=self.request_timeout)
                resp.raise_for_status()
                return self._parse_response(resp.json(), params)
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(self.backoff_base * (2**attempt))
        raise BackendError(f"chat completion failed after {self.max_attempts} attempts: {last_error}")

    def _parse_response(self, doc: dict, params: SamplingParams) -> GenerationResult:
        try:
            choice = doc["choices"][0]
            text = choice["message"]["content"]
            provider_finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat-completion response: {exc}")
        usage = doc.get("usage") or {}
        tokens = usage.get("completion_tokens")
        if not isinstance(tokens, int):
            tokens = approx_token_count(text)
        text, matched = enforce_stop(text, params.stop_sequences)
        if matched is not None:
            return GenerationResult(text, "stop_sequence", tokens, matched)
        if provider_finish == "length":
            return GenerationResult(text, "length", tokens)
        return GenerationResult(text, "natural_end", tokens)


# --- scripted backend -------------------------------------------------------


def conversation_digest(messages: Sequence[Message]) -> str:
    """sha256 over the canonical JSON rendering of a message list."""
    canon = json.dumps(
        [[m.role, m.content] for m in messages],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ScriptedBackend:
    """Deterministic backend: the reply is a pure function of the messages.

    Two lookup layers, checked in order:

    * ``table``: exact conversation digest -> turn text;
    * ``turns``: first user message content -> ordered turn texts, indexed by
      how many assistant messages the conversation already contains.

    The second layer is what rollout scripts use: the k-th model turn of a
    given problem is ``turns[problem][k]`` no matter which thread asks or in
    which order, so batch replays are bit-reproducible at any parallelism.
    """

    def __init__(
        self,
        turns: Mapping[str, Sequence[str]] | None = None,
        table: Mapping[str, str] | None = None,
    ) -> None:
        self._turns = {k: tuple(v) for k, v in (turns or {}).items()}
        self._table = dict(table or {})

    def _lookup(self, messages: Sequence[Message]) -> str:
        digest = conversation_digest(messages)
        if digest in self._table:
            return self._table[digest]
        first_user = next((m.content for m in messages if m.role == "user"), None)
        if first_user is not None and first_user in self._turns:
            turn_index = sum(1 for m in messages if m.role == "assistant")
            script = self._turns[first_user]
            if turn_index < len(script):
                return script[turn_index]
            raise KeyError(
                f"script for this problem has {len(script)} turns; turn {turn_index} requested"
            )
        raise KeyError(f"no scripted turn for conversation digest {digest[:12]}…")

    def generate(self, messages: Sequence[Message], params: SamplingParams) -> GenerationResult:
        validate_messages(messages)
        full = self._lookup(messages)
        text, matched = enforce_stop(full, params.stop_sequences)
        tokens = approx_token_count(text)
        if matched is not None:
            return GenerationResult(text, "stop_sequence", tokens, matched)
        # max_tokens is deliberately not modelled: scripted turns are atomic.
        return GenerationResult(text, "natural_end", tokens)


# --- recorded fixtures ------------------------------------------------------


def record_fixture(
    backend: InferenceBackend,
    messages: Sequence[Message],
    params: SamplingParams,
    path: str | Path,
) -> GenerationResult:
    """Run one generation and persist the exchange for offline replay.

    Only message content, sampling parameters, and the result are stored —
    never auth headers or tokens.
    """
    result = backend.generate(messages, params)
    doc = {
        "request": {
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "params": {
                "temperature": params.temperature,
                "top_k": params.top_k,
                "top_p": params.top_p,
                "max_tokens": params.max_tokens,
                "stop_sequences": list(params.stop_sequences),
            },
        },
        "response": {
            "text": result.text,
            "finish_reason": result.finish_reason,
            "token_count": result.token_count,
            "matched_stop": result.matched_stop,
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return result


class FixtureBackend:
    """Replay fixtures recorded by :func:`record_fixture`.

    Keyed by conversation digest; a request whose messages match no fixture
    raises ``KeyError``.
    """

    def __init__(self, paths: Sequence[str | Path]) -> None:
        self._fixtures: dict[str, dict] = {}
        for p in paths:
            doc = json.loads(Path(p).read_text(encoding="utf-8"))
            msgs = [Message(m["role"], m["content"]) for m in doc["request"]["messages"]]
            self._fixtures[conversation_digest(msgs)] = doc["response"]

    def generate(self, messages: Sequence[Message], params: SamplingParams) -> GenerationResult:
        validate_messages(messages)
        digest = conversation_digest(messages)
        if digest not in self._fixtures:
            raise KeyError(f"no recorded fixture for conversation digest {digest[:12]}…")
        doc = self._fixtures[digest]
        return GenerationResult(
            text=doc["text"],
            finish_reason=doc["finish_reason"],
            token_count=doc["token_count"],
            matched_stop=doc.get("matched_stop"),
        )
