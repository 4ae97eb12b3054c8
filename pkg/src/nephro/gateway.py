"""Uniform access to model backends.

Three backend kinds share one request shape:

* ``remote_http``: an OpenAI-style chat-completions endpoint (hosted or a
  local inference server). Images travel as base64 data URLs.
* ``scripted_fixture``: replies looked up by request fingerprint in a
  JSON file mapping fingerprint -> reply text.
* ``trend_oracle``: a deterministic stand-in model that reads the data
  block in the prompt (see :mod:`nephro.oracle`).
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import logging
import os
import random
import threading
import time
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Union

import httpx

from nephro.errors import FixtureMissError, TransportError, ValidationError

logger = logging.getLogger(__name__)

API_KEY_ENV = "NEPHRO_API_KEY"
BACKEND_KINDS = ("remote_http", "scripted_fixture", "trend_oracle")
Role = Literal["system", "user", "assistant"]


@dataclasses.dataclass(frozen=True)
class BackendConfig:
    name: str
    kind: str
    model_name: str = ""
    endpoint_url: Optional[str] = None
    fixture_path: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 4
    max_in_flight: int = 4
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    jitter: float = 0.1

    def __post_init__(self) -> None:
        problems = []
        if self.kind not in BACKEND_KINDS:
            problems.append(f"backend {self.name}: unknown kind {self.kind!r}")
        if self.kind == "remote_http" and not self.endpoint_url:
            problems.append(f"backend {self.name}: remote_http requires endpoint_url")
        if self.kind == "scripted_fixture" and not self.fixture_path:
            problems.append(f"backend {self.name}: scripted_fixture requires fixture_path")
        if self.kind != "remote_http" and self.temperature != 0:
            problems.append(f"backend {self.name}: scripted kinds must use temperature 0")
        if not 0.0 <= self.temperature <= 2.0:
            problems.append(f"backend {self.name}: temperature outside [0, 2]")
        if self.max_tokens < 1 or self.max_retries < 0 or self.max_in_flight < 1:
            problems.append(f"backend {self.name}: max_tokens/max_in_flight must be >= 1, max_retries >= 0")
        if self.timeout <= 0 or self.backoff_base < 0 or not 0.0 <= self.jitter < 1.0:
            problems.append(f"backend {self.name}: invalid timeout/backoff/jitter")
        if problems:
            raise ValidationError(problems)

    @property
    def label(self) -> str:
        return self.model_name or self.name

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "BackendConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"backend {name}: unknown keys {unknown}")
        return cls(name=name, **{k: v for k, v in data.items() if k != "name"})


@dataclasses.dataclass(frozen=True)
class TextPart:
    text: str


@dataclasses.dataclass(frozen=True)
class ImagePart:
    png: bytes

    def __post_init__(self) -> None:
        if not self.png:
            raise ValidationError("image part must hold nonempty PNG bytes")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.png).hexdigest()


Part = Union[TextPart, ImagePart]


@dataclasses.dataclass(frozen=True)
class Message:
    role: Role
    parts: tuple[Part, ...]

    @classmethod
    def text(cls, role: Role, text: str, *images: bytes) -> "Message":
        return cls(role, (TextPart(text), *(ImagePart(b) for b in images)))

    @property
    def text_content(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclasses.dataclass(frozen=True)
class ChatRequest:
    """One model call.

    ``template`` names the prompt template the request was built from and
    ``sample_index`` distinguishes repeated samples of the same prompt;
    both enter the fingerprint. ``request_tag`` is for logs only.
    """

    messages: tuple[Message, ...]
    template: str = ""
    temperature: Optional[float] = None
    max_tokens: Optional[int] = None
    request_tag: str = ""
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.messages, tuple):
            object.__setattr__(self, "messages", tuple(self.messages))
        if not any(m.role == "user" for m in self.messages):
            raise ValidationError("a chat request needs at least one user message")

    @property
    def text(self) -> str:
        return "\n".join(m.text_content for m in self.messages)

    @property
    def images(self) -> list[bytes]:
        return [p.png for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def followed_by(self, reply_text: str, user_text: str) -> "ChatRequest":
        """The same conversation extended by an assistant reply and a user turn."""
        extra = (Message.text("assistant", reply_text), Message.text("user", user_text))
        return dataclasses.replace(self, messages=self.messages + extra)


@dataclasses.dataclass(frozen=True)
class ModelReply:
    text: str
    finish_reason: str  # stop | length | error
    latency: float = 0.0
    attempt_count: int = 1


def fingerprint(request: ChatRequest) -> str:
    """Stable hash of template name, ordered text parts, image hashes, sample index."""
    texts = [p.text for m in request.messages for p in m.parts if isinstance(p, TextPart)]
    images = [p.digest for m in request.messages for p in m.parts if isinstance(p, ImagePart)]
    payload = json.dumps(
        {"template": request.template, "texts": texts, "images": images, "sample": request.sample_index},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def load_fixtures(path: Union[str, os.PathLike]) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValidationError(f"fixture file {path} must map fingerprints to reply strings")
    return data


def save_fixtures(fixtures: dict[str, str], path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(json.dumps(fixtures, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")


def wire_payload(backend: BackendConfig, request: ChatRequest) -> dict:
    """JSON body for the chat-completions wire protocol."""
    messages = []
    for m in request.messages:
        content = []
        for p in m.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                url = "data:image/png;base64," + base64.b64encode(p.png).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": url}})
        messages.append({"role": m.role, "content": content})
    temperature = backend.temperature if request.temperature is None else request.temperature
    return {
        "model": backend.model_name,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": request.max_tokens or backend.max_tokens,
    }


def backoff_delay(backend: BackendConfig, attempt: int, rng: random.Random) -> float:
    """Delay before retry number ``attempt`` (1-based)."""
    nominal = backend.backoff_base * backend.backoff_factor ** (attempt - 1)
    return nominal * rng.uniform(1.0 - backend.jitter, 1.0 + backend.jitter)


class _Retryable(Exception):
    def __init__(self, cause: object):
        super().__init__(str(cause))
        self.cause = cause


class Gateway:
    """Dispatches chat requests to backends; safe to share across threads.

    At most ``max_in_flight`` requests per remote backend are outstanding at
    once. ``sleep`` and ``rng`` are injectable so tests can observe the
    backoff schedule without waiting.
    """

    def __init__(
        self,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
        http_client: Optional[httpx.Client] = None,
        record: Optional[dict[str, str]] = None,
    ):
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._client = http_client
        self._owns_client = http_client is None
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        self._fixtures: dict[str, dict[str, str]] = {}
        self._lock = threading.Lock()
        self.record = record
        self.transport_failures = 0  # requests that exhausted retries or failed hard

    def close(self) -> None:
        if self._client is not None and self._owns_client:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def complete(self, backend: BackendConfig, request: ChatRequest) -> ModelReply:
        if backend.kind == "trend_oracle":
            from nephro.oracle import trend_oracle_reply

            reply = trend_oracle_reply(request)
        elif backend.kind == "scripted_fixture":
            reply = self._fixture_reply(backend, request)
        else:
            try:
                reply = self._remote_reply(backend, request)
            except TransportError:
                with self._lock:
                    self.transport_failures += 1
                raise
        if self.record is not None:
            with self._lock:
                self.record[fingerprint(request)] = reply.text
        return reply

    # -- scripted ------------------------------------------------------------

    def _fixture_reply(self, backend: BackendConfig, request: ChatRequest) -> ModelReply:
        with self._lock:
            table = self._fixtures.get(backend.name)
            if table is None:
                table = self._fixtures[backend.name] = load_fixtures(backend.fixture_path)
        fp = fingerprint(request)
        if fp not in table:
            raise FixtureMissError(fp)
        return ModelReply(table[fp], "stop", 0.0, 1)

    # -- remote --------------------------------------------------------------

    def _http(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                self._client = httpx.Client()
            return self._client

    def _semaphore(self, backend: BackendConfig) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._semaphores.get(backend.name)
            if sem is None:
                sem = self._semaphores[backend.name] = threading.BoundedSemaphore(backend.max_in_flight)
            return sem

    def _remote_reply(self, backend: BackendConfig, request: ChatRequest) -> ModelReply:
        payload = wire_payload(backend, request)
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        started = time.monotonic()
        last_cause: object = None
        for attempt in range(1, backend.max_retries + 2):
            if attempt > 1:
                with self._rng_lock:
                    delay = backoff_delay(backend, attempt - 1, self._rng)
                logger.info("retrying %s (%s) in %.2fs, attempt %d", backend.name, request.request_tag, delay, attempt)
                self._sleep(delay)
            try:
                with self._semaphore(backend):
                    text, finish = self._post_once(backend, payload, headers)
            except _Retryable as exc:
                last_cause = exc.cause
                logger.warning("transient failure from %s (%s): %s", backend.name, request.request_tag, exc)
                continue
            return ModelReply(text, finish, time.monotonic() - started, attempt)
        raise TransportError(
            f"backend {backend.name}: gave up after {backend.max_retries + 1} attempts: {last_cause}",
            cause=last_cause,
            attempts=backend.max_retries + 1,
        )

    def _post_once(self, backend: BackendConfig, payload: dict, headers: dict) -> tuple[str, str]:
        try:
            resp = self._http().post(backend.endpoint_url, json=payload, headers=headers, timeout=backend.timeout)
        except httpx.TimeoutException as exc:
            raise _Retryable(f"timeout: {exc}") from None
        except httpx.TransportError as exc:
            raise _Retryable(f"connection error: {exc}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(
                f"backend {backend.name}: HTTP {resp.status_code} (not retried)",
                cause=resp.status_code,
                attempts=1,
            )
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"backend {backend.name}: malformed response body ({exc})", cause=exc) from None
        if isinstance(content, list):  # some servers return content parts
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        reason = choice.get("finish_reason") or "stop"
        if reason not in ("stop", "length"):
            reason = "error"
        return str(content or ""), reason


def make_request(
    template: str,
    system: str,
    user_text: str,
    images: Sequence[bytes] = (),
    temperature: Optional[float] = None,
    request_tag: str = "",
    sample_index: int = 0,
) -> ChatRequest:
    messages = []
    if system:
        messages.append(Message.text("system", system))
    messages.append(Message.text("user", user_text, *images))
    return ChatRequest(
        tuple(messages),
        template=template,
        temperature=temperature,
        request_tag=request_tag,
        sample_index=sample_index,
    )
