"""Chat-completion backends.

``HttpBackend`` speaks the usual ``/chat/completions`` JSON body and inlines
images as base64 data URIs. ``ScriptedBackend`` replays canned replies from
per-conversation queues so whole runs can be tested offline.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence

import httpx

from .errors import AuthMissing, BackendTimeout, QueueExhausted, SchemaViolation, TransportError

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str = ""
    image_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise SchemaViolation(f"unknown chat role {self.role!r}")
        if not self.text and self.image_ref is None:
            raise SchemaViolation("chat message needs text or an image")
        if self.image_ref is not None and self.role != "user":
            raise SchemaViolation("only user messages may carry images")
        if self.role == "tool" and not self.text:
            raise SchemaViolation("tool messages carry an observation string")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "text": self.text}
        if self.image_ref:
            out["image_ref"] = self.image_ref
        return out


class ChatBackend(Protocol):
    def complete(self, messages: Sequence[ChatMessage], key: Optional[str] = None) -> str: ...


class AuditLog:
    """Append-only JSONL transcript of every request/response pair."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, backend: str, key: Optional[str], messages: Sequence[ChatMessage], response: str) -> None:
        line = json.dumps(
            {"backend": backend, "key": key, "request": [m.to_dict() for m in messages], "response": response},
            ensure_ascii=False,
        )
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    max_backoff: float = 30.0
    max_image_dim: int = 1024
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")

    @property
    def url(self) -> str:
        base = self.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def backoff_delay(self, attempt: int) -> float:
        return min(self.max_backoff, self.backoff * 2**attempt)


def encode_image(path: str | Path, max_dim: int = 1024) -> str:
    """Data URI for an image, downscaled so its longer side is at most ``max_dim``.

    Files Pillow cannot decode (multi-band rasters, for instance) are sent as-is.
    """
    raw = Path(path).read_bytes()
    mime = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
    try:
        from PIL import Image

        with Image.open(io.BytesIO(raw)) as img:
            if max(img.size) > max_dim:
                img.thumbnail((max_dim, max_dim))
                buf = io.BytesIO()
                fmt = img.format or "PNG"
                img.save(buf, format=fmt)
                raw = buf.getvalue()
                mime = Image.MIME.get(fmt, mime)
    except Exception:  # noqa: BLE001 - opaque payloads pass through untouched
        pass
    return f"data:{mime};base64,{base64.b64encode(raw).decode('ascii')}"


def build_request_body(config: BackendConfig, messages: Sequence[ChatMessage]) -> dict[str, Any]:
    wire = []
    for m in messages:
        if m.image_ref:
            parts: list[dict[str, Any]] = []
            if m.text:
                parts.append({"type": "text", "text": m.text})
            parts.append({"type": "image_url", "image_url": {"url": encode_image(m.image_ref, config.max_image_dim)}})
            wire.append({"role": m.role, "content": parts})
        else:
            wire.append({"role": m.role, "content": m.text})
    body: dict[str, Any] = {
        "model": config.model,
        "messages": wire,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    if config.seed is not None:
        body["seed"] = config.seed
    return body


def _response_text(payload: Any) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion payload: {exc}") from None
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return content or ""


class HttpBackend:
    def __init__(
        self,
        config: BackendConfig,
        client: Optional[httpx.Client] = None,
        audit: Optional[AuditLog] = None,
        sleep: Callable[[float], None] = time.sleep,
        name: str = "http",
    ):
        self.config = config
        self._client = client
        self.audit = audit
        self._sleep = sleep
        self.name = name

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.config.timeout)
        return self._client

    def complete(self, messages: Sequence[ChatMessage], key: Optional[str] = None) -> str:
        if not messages:
            raise ValueError("no messages to send")
        api_key = os.environ.get(self.config.api_key_env, "").strip()
        if not api_key:
            raise AuthMissing(f"environment variable {self.config.api_key_env} is not set")
        body = build_request_body(self.config, messages)
        headers = {"Authorization": f"Bearer {api_key}"}
        last: Exception | None = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                self._sleep(self.config.backoff_delay(attempt - 1))
            try:
                resp = self._http().post(self.config.url, json=body, headers=headers, timeout=self.config.timeout)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"request timed out: {exc}")
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure: {exc}")
            else:
                if resp.status_code >= 500:
                    last = TransportError(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    raise TransportError(f"request rejected with {resp.status_code}: {resp.text[:200]}")
                else:
                    text = _response_text(resp.json())
                    if self.audit:
                        self.audit.write(self.name, key, messages, text)
                    return text
            log.warning("%s attempt %d/%d failed: %s", self.name, attempt + 1, self.config.retries + 1, last)
        assert last is not None
        raise last


class ScriptedBackend:
    """Replays ``scripts[key]`` in order; unknown keys get ``fallback`` if set."""

    def __init__(
        self,
        scripts: Mapping[str, Sequence[str]],
        fallback: Optional[str] = None,
        audit: Optional[AuditLog] = None,
        name: str = "scripted",
    ):
        self._queues = {k: list(v) for k, v in scripts.items()}
        self._cursor = {k: 0 for k in self._queues}
        self._locks = {k: threading.Lock() for k in self._queues}
        self.fallback = fallback
        self.audit = audit
        self.name = name
        self.transcript: list[tuple[Optional[str], tuple[ChatMessage, ...], str]] = []
        self._transcript_lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], key: Optional[str] = None) -> str:
        if not messages:
            raise ValueError("no messages to send")
        if key in self._queues:
            with self._locks[key]:
                i = self._cursor[key]
                if i >= len(self._queues[key]):
                    raise QueueExhausted(f"script for {key!r} exhausted after {i} replies")
                self._cursor[key] = i + 1
                reply = self._queues[key][i]
        elif self.fallback is not None:
            reply = self.fallback
        else:
            raise QueueExhausted(f"no script for {key!r} and no fallback")
        with self._transcript_lock:
            self.transcript.append((key, tuple(messages), reply))
        if self.audit:
            self.audit.write(self.name, key, messages, reply)
        return reply

    def remaining(self, key: str) -> int:
        return len(self._queues.get(key, ())) - self._cursor.get(key, 0)

    @classmethod
    def from_file(cls, path: str | Path, fallback: Optional[str] = None, **kwargs: Any) -> "ScriptedBackend":
        return cls(load_scripts(path), fallback=fallback, **kwargs)


def load_scripts(path: str | Path) -> dict[str, list[str]]:
    """Read ``{"key": [...replies]}`` from JSON, or ``{"key", "responses"}`` lines from JSONL."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                data[str(obj["key"])] = obj["responses"]
    if not isinstance(data, dict):
        raise SchemaViolation(f"{path}: scripts must map keys to reply lists")
    return {str(k): [str(r) for r in v] for k, v in data.items()}


@dataclass
class BackendSpec:
    """Config-file description of a backend (``mode`` is "mock" or "http")."""

    mode: str = "mock"
    http: Optional[BackendConfig] = None
    scripts: dict[str, list[str]] = field(default_factory=dict)
    fallback: Optional[str] = None

    def build(self, audit: Optional[AuditLog] = None, name: str = "backend") -> ChatBackend:
        if self.mode == "http":
            if self.http is None:
                raise ValueError(f"{name}: http mode needs endpoint and model")
            return HttpBackend(self.http, audit=audit, name=name)
        if self.mode == "mock":
            return ScriptedBackend(self.scripts, fallback=self.fallback, audit=audit, name=name)
        raise ValueError(f"{name}: unknown backend mode {self.mode!r}")
