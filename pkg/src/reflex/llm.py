"""Chat-completion backends: live HTTP, scripted fixtures and transcript replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

from reflex.errors import (
    BackendError,
    FixtureExhausted,
    MalformedResponse,
    NetworkError,
    RateLimited,
    ReplayDivergence,
    SchemaError,
)

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
BACKEND_KINDS = ("http", "scripted", "replay")
END_OF_TRANSCRIPT = "<end of transcript>"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message must not be empty")


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    max_retries: int = 3
    api_key_env: str | None = None
    fixture_path: str | None = None
    transcript_path: str | None = None
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        needed = {"http": ("endpoint", "model"), "scripted": ("fixture_path",), "replay": ("transcript_path",)}
        for name in needed[self.kind]:
            if not getattr(self, name):
                raise ValueError(f"{self.kind} backend needs {name}")


class LlmBackend(Protocol):
    def complete(self, messages: list[ChatMessage], stage: str = "inference") -> str: ...


def render_messages(messages: list[ChatMessage]) -> str:
    """Stable text form of a conversation; this is what transcripts store and hash."""
    return "".join(f"<{m.role}>\n{m.content}\n" for m in messages)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# ----------------------------------------------------------------------------- http


class HttpBackend:
    """OpenAI-style chat-completions client with exponential backoff."""

    def __init__(
        self,
        config: BackendConfig,
        sleep: Callable[[float], None] = time.sleep,
        opener: Callable[..., Any] = urllib.request.urlopen,
    ) -> None:
        self.config = config
        self._sleep = sleep
        self._open = opener

    def _request(self, messages: list[ChatMessage]) -> urllib.request.Request:
        body = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": self.config.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if not key:
                raise NetworkError(f"environment variable {self.config.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return urllib.request.Request(
            self.config.endpoint or "", data=json.dumps(body).encode(), headers=headers, method="POST"
        )

    def complete(self, messages: list[ChatMessage], stage: str = "inference") -> str:
        req = self._request(messages)
        delay = 1.0
        last: BackendError | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                log.warning("retrying chat completion in %.0f s (%s)", delay, last)
                self._sleep(delay)
                delay *= 2.0
            try:
                with self._open(req, timeout=self.config.timeout) as resp:
                    raw = resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code == 429:
                    last = RateLimited(f"rate limited by {self.config.endpoint}")
                elif exc.code >= 500:
                    last = NetworkError(f"server error {exc.code} from {self.config.endpoint}")
                else:
                    raise NetworkError(f"HTTP {exc.code} from {self.config.endpoint}") from exc
                continue
            except (urllib.error.URLError, OSError) as exc:
                last = NetworkError(f"cannot reach {self.config.endpoint}: {exc}")
                continue
            return _first_choice(raw)
        assert last is not None
        raise last


def _first_choice(raw: bytes) -> str:
    try:
        doc = json.loads(raw)
        content = doc["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected chat-completion payload: {raw[:200]!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("choice content is not text")
    return content


# ------------------------------------------------------------------------- scripted


def load_fixture(path: str | Path) -> list[tuple[str, str]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise SchemaError(f"{path}:$", "fixture must be a JSON array")
    rules = []
    for i, r in enumerate(doc):
        if not isinstance(r, dict) or not isinstance(r.get("match"), str) or not isinstance(r.get("response"), str):
            raise SchemaError(f"{path}:[{i}]", "rule needs string fields 'match' and 'response'")
        rules.append((r["match"], r["response"]))
    return rules


class ScriptedBackend:
    """Answers from (prefix -> response) rules; longest matching prefix wins, each rule fires once."""

    def __init__(self, rules: list[tuple[str, str]]) -> None:
        self._rules = list(rules)
        self._used = [False] * len(self._rules)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        return cls(load_fixture(path))

    def complete(self, messages: list[ChatMessage], stage: str = "inference") -> str:
        users = [m for m in messages if m.role == "user"]
        text = users[-1].content if users else ""
        best = None
        for i, (match, _) in enumerate(self._rules):
            if self._used[i] or not text.startswith(match):
                continue
            if best is None or len(match) > len(self._rules[best][0]):
                best = i
        if best is None:
            raise FixtureExhausted(f"no unused fixture rule matches prompt starting {text[:60]!r}")
        self._used[best] = True
        return self._rules[best][1]


# --------------------------------------------------------------------------- replay


def read_transcript(path: str | Path) -> list[dict[str, Any]]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{n}", f"invalid JSON line: {exc.msg}") from exc
    return records


def exchange_records(records: list[dict[str, Any]]) -> list[dict[str, Any]]:
    return [r for r in records if "prompt" in r and ("response" in r or "error" in r)]


_REPLAYABLE_ERRORS: dict[str, type[BackendError]] = {
    cls.__name__: cls for cls in (BackendError, NetworkError, RateLimited, MalformedResponse, FixtureExhausted)
}


class ReplayBackend:
    """Plays back recorded responses in order, refusing prompts that differ from the recording."""

    def __init__(self, records: list[dict[str, Any]]) -> None:
        self._records = exchange_records(records)
        self._i = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayBackend:
        return cls(read_transcript(path))

    def complete(self, messages: list[ChatMessage], stage: str = "inference") -> str:
        got = prompt_hash(render_messages(messages))
        if self._i >= len(self._records):
            raise ReplayDivergence(END_OF_TRANSCRIPT, got)
        rec = self._records[self._i]
        expected = prompt_hash(rec["prompt"])
        if expected != got:
            raise ReplayDivergence(expected, got)
        self._i += 1
        if "error" in rec:
            raise _REPLAYABLE_ERRORS.get(rec.get("error_type", ""), BackendError)(rec["error"])
        return rec["response"]


# ------------------------------------------------------------------------ recording


class TranscriptSink:
    """Append-only JSON-lines file; records are flushed as they arrive."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


class RecordingBackend:
    def __init__(self, inner: LlmBackend, sink: TranscriptSink, clock: Callable[[], float] = time.time) -> None:
        self.inner = inner
        self.sink = sink
        self._clock = clock

    def complete(self, messages: list[ChatMessage], stage: str = "inference") -> str:
        record: dict[str, Any] = {"stage": stage, "prompt": render_messages(messages)}
        try:
            response = self.inner.complete(messages, stage=stage)
        except BackendError as exc:
            # failed exchanges are kept so a replay fails the same way
            self.sink.append({**record, "error_type": type(exc).__name__, "error": str(exc), "timestamp": self._clock()})
            raise
        self.sink.append({**record, "response": response, "timestamp": self._clock()})
        return response


def record_wrap(inner: LlmBackend, sink: TranscriptSink) -> RecordingBackend:
    return RecordingBackend(inner, sink)


def make_backend(config: BackendConfig) -> LlmBackend:
    if config.kind == "http":
        return HttpBackend(config)
    if config.kind == "scripted":
        return ScriptedBackend.from_file(config.fixture_path)  # type: ignore[arg-type]
    return ReplayBackend.from_file(config.transcript_path)  # type: ignore[arg-type]


def parse_backend_spec(spec: str) -> BackendConfig:
    """``kind:detail`` where detail is a fixture, transcript, or HTTP config JSON path."""
    kind, sep, detail = spec.partition(":")
    if not sep or not detail:
        raise ValueError(f"backend spec must look like kind:path, got {spec!r}")
    if kind == "scripted":
        return BackendConfig("scripted", fixture_path=detail)
    if kind == "replay":
        return BackendConfig("replay", transcript_path=detail)
    if kind == "http":
        try:
            doc = json.loads(Path(detail).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read HTTP backend config {detail}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"HTTP backend config {detail} must be a JSON object")
        allowed = {"endpoint", "model", "temperature", "max_retries", "api_key_env", "timeout"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown HTTP config fields {sorted(unknown)}")
        return BackendConfig("http", **doc)
    raise ValueError(f"unknown backend kind {kind!r}; use http, scripted or replay")
