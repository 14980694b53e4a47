"""Chat-completion backends: remote HTTP and deterministic record/replay.

Every model-dependent operation in the package goes through ``complete`` so
it can run offline against a replay script. Replay scripts are JSON lines,
one ``{"match": ..., "response": ...}`` object per line; entries are consumed
strictly in order and ``match`` (when set) must be a substring of the last
user message.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

TOKEN_ENV_VAR = "REPAIR_API_TOKEN"

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"


class LLMError(Exception):
    pass


class BackendUnavailableError(LLMError):
    """The HTTP backend failed after its bounded retries."""


class ReplayExhaustedError(LLMError):
    """The replay script has no entries left."""


class ReplayMismatchError(LLMError):
    def __init__(self, expected: str, got: str):
        super().__init__(
            f"replay entry expected last user message to contain {expected!r}; "
            f"got {got[:200]!r}"
        )
        self.expected = expected
        self.got = got


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT):
            raise ValueError(f"unknown role: {self.role}")
        if self.role in (ROLE_SYSTEM, ROLE_USER) and not self.content:
            raise ValueError(f"{self.role} message must have content")


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


def system(content: str) -> ChatMessage:
    return ChatMessage(ROLE_SYSTEM, content)


def user(content: str) -> ChatMessage:
    return ChatMessage(ROLE_USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(ROLE_ASSISTANT, content)


def approx_tokens(text: str) -> int:
    """Crude character/4 token estimate, used only for cost reporting."""
    return max(1, len(text) // 4)


@dataclass
class Usage:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, messages: list[ChatMessage], response: str) -> None:
        self.calls += 1
        self.prompt_tokens += sum(approx_tokens(m.content) for m in messages)
        self.completion_tokens += approx_tokens(response)


class Backend:
    """Interface: subclasses implement _complete(messages, params) -> str."""

    def __init__(self):
        self.usage = Usage()

    def _complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        raise NotImplementedError

    def complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        response = self._complete(messages, params)
        self.usage.add(messages, response)
        return response


class HttpBackend(Backend):
    """JSON-over-HTTP chat endpoint with bounded exponential-backoff retries.

    Request body: {"model", "messages", "temperature", "max_tokens"}; the
    response must contain choices[0].message.content. A bearer token is read
    from the REPAIR_API_TOKEN environment variable when present.
    """

    def __init__(
        self,
        url: str,
        model: str,
        retries: int = 3,
        backoff_seconds: float = 0.5,
        timeout_seconds: float = 120.0,
    ):
        super().__init__()
        self.url = url
        self.model = model
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self.timeout_seconds = timeout_seconds

    def _complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(
                    self.url, json=body, headers=headers, timeout=self.timeout_seconds
                )
                if resp.status_code >= 500:
                    raise requests.RequestException(f"server error {resp.status_code}")
                resp.raise_for_status()
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries - 1:
                    time.sleep(self.backoff_seconds * (2**attempt))
        raise BackendUnavailableError(f"backend failed after {self.retries} attempts: {last_error}")


@dataclass
class ReplayEntry:
    response: str
    match: str | None = None


class ReplayBackend(Backend):
    """Replays a fixed script of responses; any mismatch is an error.

    The cursor is private to this instance, so concurrent episodes each need
    their own backend.
    """

    def __init__(self, entries: list[ReplayEntry]):
        super().__init__()
        self.entries = list(entries)
        self.cursor = 0

    @classmethod
    def from_script(cls, path: str | Path) -> "ReplayBackend":
        entries = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise LLMError(f"{path}:{lineno}: bad replay entry: {exc}")
            entries.append(ReplayEntry(response=obj["response"], match=obj.get("match")))
        return cls(entries)

    def _complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        if self.cursor >= len(self.entries):
            raise ReplayExhaustedError(
                f"replay script exhausted after {len(self.entries)} entries"
            )
        entry = self.entries[self.cursor]
        if entry.match is not None:
            last_user = next(
                (m.content for m in reversed(messages) if m.role == ROLE_USER), ""
            )
            if entry.match not in last_user:
                raise ReplayMismatchError(entry.match, last_user)
        self.cursor += 1
        return entry.response


class RecordingBackend(Backend):
    """Wraps another backend and appends every exchange to a JSONL file.

    Each line holds {"messages", "params", "response"}; the "response" field
    alone is also a valid replay script line, so a recorded session can be
    replayed directly.
    """

    def __init__(self, inner: Backend, path: str | Path):
        super().__init__()
        self.inner = inner
        self.path = Path(path)

    def _complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        response = self.inner.complete(messages, params)
        record = {
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "params": {
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
                "seed": params.seed,
            },
            "response": response,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        return response


def complete(
    backend: Backend,
    messages: list[ChatMessage],
    params: CompletionParams | None = None,
) -> str:
    """Run one completion; messages must start with exactly one system message."""
    if not messages or messages[0].role != ROLE_SYSTEM:
        raise ValueError("messages must start with a system message")
    if any(m.role == ROLE_SYSTEM for m in messages[1:]):
        raise ValueError("only the first message may be a system message")
    return backend.complete(messages, params or CompletionParams())
