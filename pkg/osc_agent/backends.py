"""
Chat backends for the agent loop.

Three implementations share one async ``send(messages, decoding)`` contract:

- HttpChatBackend: POSTs to ``{base_url}/v1/chat/completions`` with aiohttp,
  bearer token from the ``OSC_LLM_API_KEY`` environment variable.
- ScriptedBackend: replays canned responses in order (a list, or the
  responses stored in a run log).
- RecordingBackend: wraps another backend and appends every exchange to a
  JSON-lines file that ScriptedBackend can replay.

Timeouts and bounded retries are applied at the call site by
``send_with_retries`` (tenacity), so every backend gets the same policy.
"""

import asyncio
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import aiohttp
from tenacity import AsyncRetrying, RetryError, retry_if_exception_type, stop_after_attempt, wait_fixed

from .errors import AgentError, BackendError, BackendTimeout, ConfigError, PersistenceError

logger = logging.getLogger(__name__)

API_KEY_ENV = "OSC_LLM_API_KEY"
CHAT_PATH = "/v1/chat/completions"
ROLES = ("system", "user", "assistant")


# ─────────────────────── Messages ────────────────────────────


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise AgentError(f"unknown chat role {self.role!r}; expected one of {ROLES}")
        if not self.content.strip():
            raise AgentError(f"{self.role} message content is empty")

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class DecodingConfig:
    model: str = "gpt-4o-mini"
    temperature: float = 1.0
    max_tokens: int = 4096
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class TokenUsage:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, completion: Completion) -> None:
        self.requests += 1
        self.prompt_tokens += completion.prompt_tokens
        self.completion_tokens += completion.completion_tokens

    def to_dict(self) -> Dict[str, int]:
        return {
            "requests": self.requests,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


class LlmBackend(Protocol):
    name: str

    async def send(self, messages: Sequence[ChatMessage], decoding: DecodingConfig) -> Completion:
        ...

    async def close(self) -> None:
        ...


# ─────────────────────── Retry policy ────────────────────────


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    wait: float = 1.0
    timeout: float = 120.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.timeout <= 0 or self.wait < 0:
            raise ConfigError("timeout must be > 0 and retry wait >= 0")


async def send_with_retries(
    backend: LlmBackend,
    messages: Sequence[ChatMessage],
    decoding: DecodingConfig,
    policy: RetryPolicy = RetryPolicy(),
) -> Tuple[Completion, int]:
    """
    Send with a per-attempt timeout and bounded retries.

    Returns:
        (completion, attempts_used)

    Raises:
        BackendError: Every attempt failed or timed out.
    """
    retrying = AsyncRetrying(
        stop=stop_after_attempt(policy.max_attempts),
        wait=wait_fixed(policy.wait),
        retry=retry_if_exception_type(BackendError),
    )
    attempts = 0
    try:
        async for attempt in retrying:
            with attempt:
                attempts = attempt.retry_state.attempt_number
                try:
                    completion = await asyncio.wait_for(backend.send(messages, decoding), timeout=policy.timeout)
                except asyncio.TimeoutError as e:
                    raise BackendTimeout(f"{backend.name} gave no answer within {policy.timeout}s") from e
                if attempts > 1:
                    logger.info("%s answered on attempt %d", backend.name, attempts)
                return completion, attempts
    except RetryError as e:
        last = e.last_attempt.exception()
        reason = last.one_line() if isinstance(last, BackendError) else str(last)
        raise BackendError(f"{backend.name} failed after {attempts} attempts: {reason}") from last
    raise BackendError(f"{backend.name} made no attempt")


# ─────────────────────── HTTP chat completions ───────────────


class HttpChatBackend:
    """OpenAI-compatible chat-completions client over aiohttp."""

    name = "http"

    def __init__(self, base_url: str, api_key: Optional[str] = None, timeout: float = 120.0):
        if not base_url:
            raise ConfigError("backend.base_url is required for the http backend")
        self.url = base_url.rstrip("/") + CHAT_PATH
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = aiohttp.ClientTimeout(total=timeout)
        self._session: Optional[aiohttp.ClientSession] = None

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    async def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(timeout=self.timeout, headers=self._headers())
        return self._session

    async def send(self, messages: Sequence[ChatMessage], decoding: DecodingConfig) -> Completion:
        payload: Dict = {
            "model": decoding.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        }
        if decoding.seed is not None:
            payload["seed"] = decoding.seed

        session = await self._get_session()
        try:
            async with session.post(self.url, json=payload) as response:
                body = await response.text()
                if response.status != 200:
                    raise BackendError(f"HTTP {response.status} from {self.url}: {body[:200]}")
        except asyncio.TimeoutError as e:
            raise BackendTimeout(f"request to {self.url} timed out") from e
        except aiohttp.ClientError as e:
            raise BackendError(f"request to {self.url} failed: {e}") from e

        try:
            data = json.loads(body)
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendError(f"unexpected chat-completions response: {body[:200]}") from e
        usage = data.get("usage") or {}
        return Completion(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )

    async def close(self) -> None:
        if self._session is not None and not self._session.closed:
            await self._session.close()


# ─────────────────────── Scripted replay ─────────────────────


ScriptItem = Union[str, BaseException]


class ScriptedBackend:
    """
    Replays responses in order. An exception instance in the script is raised
    instead of answered, which lets tests stage timeouts and failures.
    """

    name = "scripted"

    def __init__(self, script: Sequence[ScriptItem]):
        self.script: List[ScriptItem] = list(script)
        self.position = 0
        self.requests: List[List[ChatMessage]] = []

    @classmethod
    def from_run_log(cls, path: Path) -> "ScriptedBackend":
        """Responses from every record that carries one, in file order."""
        responses = [r["response"] for r in read_jsonl(Path(path)) if "response" in r]
        if not responses:
            raise PersistenceError(f"{path} holds no recorded responses to replay")
        return cls(responses)

    @property
    def remaining(self) -> int:
        return len(self.script) - self.position

    async def send(self, messages: Sequence[ChatMessage], decoding: DecodingConfig) -> Completion:
        self.requests.append(list(messages))
        if self.position >= len(self.script):
            raise BackendError(f"scripted backend exhausted after {len(self.script)} responses")
        item = self.script[self.position]
        self.position += 1
        if isinstance(item, BaseException):
            raise item
        return Completion(text=item, prompt_tokens=_count_words(messages), completion_tokens=len(item.split()))

    async def close(self) -> None:
        return None


def _count_words(messages: Sequence[ChatMessage]) -> int:
    return sum(len(m.content.split()) for m in messages)


# ─────────────────────── Recording proxy ─────────────────────


class RecordingBackend:
    """Passes requests to ``inner`` and appends each exchange to ``path``."""

    name = "recording"

    def __init__(self, inner: LlmBackend, path: Path):
        self.inner = inner
        self.log = JsonLinesLog(Path(path))

    async def send(self, messages: Sequence[ChatMessage], decoding: DecodingConfig) -> Completion:
        completion = await self.inner.send(messages, decoding)
        self.log.append(
            {
                "kind": "exchange",
                "backend": self.inner.name,
                "model": decoding.model,
                "messages": [m.to_dict() for m in messages],
                "response": completion.text,
                "prompt_tokens": completion.prompt_tokens,
                "completion_tokens": completion.completion_tokens,
            }
        )
        return completion

    async def close(self) -> None:
        await self.inner.close()


# ─────────────────────── JSON-lines logs ─────────────────────


@dataclass
class JsonLinesLog:
    """Append-only JSON-lines file; without a path records are kept in memory only."""

    path: Optional[Path] = None
    records: List[Dict] = field(default_factory=list)

    def append(self, record: Dict) -> None:
        self.records.append(record)
        if self.path is None:
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        except OSError as e:
            raise PersistenceError(f"cannot append to {self.path}: {e}") from e

    def reset(self) -> None:
        """Start the file afresh."""
        self.records.clear()
        if self.path is not None and self.path.exists():
            try:
                self.path.unlink()
            except OSError as e:
                raise PersistenceError(f"cannot reset {self.path}: {e}") from e


def read_jsonl(path: Path) -> List[Dict]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise PersistenceError(f"cannot read {path}: {e}") from e
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as e:
            raise PersistenceError(f"{path}:{number}: malformed JSON line: {e}") from e
    return records


def create_backend(kind: str, **options) -> LlmBackend:
    """
    Build a backend by name.

    Options: ``base_url``, ``timeout`` (http); ``script`` (scripted, a run-log
    path or a list of responses); ``record_to`` (recording, wraps http).
    """
    if kind == "http":
        return HttpChatBackend(options.get("base_url", ""), timeout=float(options.get("timeout", 120.0)))
    if kind == "scripted":
        script = options.get("script")
        if script is None:
            raise ConfigError("backend.script is required for the scripted backend")
        if isinstance(script, (list, tuple)):
            return ScriptedBackend(script)
        return ScriptedBackend.from_run_log(Path(script))
    if kind == "recording":
        record_to = options.get("record_to")
        if not record_to:
            raise ConfigError("backend.record_to is required for the recording backend")
        inner_kind = options.get("inner", "http")
        inner = create_backend(inner_kind, **{k: v for k, v in options.items() if k not in ("inner", "record_to")})
        return RecordingBackend(inner, Path(record_to))
    raise ConfigError(f"unknown backend kind {kind!r}; expected http, scripted or recording")
