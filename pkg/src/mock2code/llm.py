"""Multimodal chat backend: prompt rendering, wire transport, and record/replay.

Every model round-trip is identified by a digest over the declared request
fields (template name, rendered text, image pixel hashes, decoding params).
A transcript store maps digests to recorded responses, which makes full
pipeline runs replayable and byte-deterministic without a live endpoint.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import requests
from PIL import Image

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("divide", "semantic", "group", "code", "style", "analysis", "repair")

API_KEY_ENV = "DESIGNCODER_API_KEY"

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 4096
DEFAULT_MAX_CONCURRENCY = 4

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = (1.0, 2.0, 4.0)


class UnboundPlaceholder(Exception):
    """A template placeholder was left without a binding."""


class ImageArityMismatch(Exception):
    """Attached images do not match what the template expects."""


class TransportError(Exception):
    """Transport failed after the full retry budget."""


class AuthError(Exception):
    """Endpoint rejected or is missing credentials."""


class ReplayMiss(Exception):
    """Replay store has no response for the request digest."""

    def __init__(self, digest: str, template_name: str):
        self.digest = digest
        self.template_name = template_name
        super().__init__(f"no recorded response for template '{template_name}' digest {digest}")


class DigestCollision(Exception):
    """The same digest was recorded twice with different response text."""


class ResponseParseError(Exception):
    """Model response did not match the expected structured shape."""


@dataclass(frozen=True)
class Decoding:
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_text_skeleton: str
    expects_image: bool
    response_schema: str

    def placeholders(self) -> set[str]:
        found: set[str] = set()
        for m in string.Template.pattern.finditer(self.user_text_skeleton):
            name = m.group("named") or m.group("braced")
            if name:
                found.add(name)
        return found


@dataclass(frozen=True)
class LlmRequest:
    template_name: str
    system_text: str
    rendered_text: str
    images: tuple[Image.Image, ...] = ()
    decoding: Decoding = field(default_factory=Decoding)


@dataclass(frozen=True)
class LlmResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


def _parse_template_file(text: str, origin: str) -> PromptTemplate:
    header, sep, rest = text.partition("--- system ---")
    if not sep or "--- user ---" not in rest:
        raise ValueError(f"template {origin} must contain '--- system ---' and '--- user ---' sections")
    system_text, _, user_text = rest.partition("--- user ---")
    meta: dict[str, str] = {}
    for line in header.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    for required in ("name", "expects_image", "response_schema"):
        if required not in meta:
            raise ValueError(f"template {origin} missing header field `{required}`")
    return PromptTemplate(
        name=meta["name"],
        system_text=system_text.strip() + "\n",
        user_text_skeleton=user_text.strip() + "\n",
        expects_image=meta["expects_image"].lower() == "true",
        response_schema=meta["response_schema"],
    )


def load_template(name: str) -> PromptTemplate:
    """Load one of the versioned prompt templates shipped with the package."""
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}; known: {TEMPLATE_NAMES}")
    text = resources.files("mock2code.prompts").joinpath(f"{name}.prompt").read_text(encoding="utf-8")
    template = _parse_template_file(text, f"{name}.prompt")
    if template.name != name:
        raise ValueError(f"template file {name}.prompt declares name {template.name!r}")
    return template


def render_prompt(
    template: PromptTemplate,
    bindings: dict[str, str],
    images: list[Image.Image] | tuple[Image.Image, ...] = (),
    decoding: Decoding | None = None,
) -> LlmRequest:
    """Bind placeholders and attach images, yielding a sendable request."""
    missing = template.placeholders() - set(bindings)
    if missing:
        raise UnboundPlaceholder(f"template '{template.name}' placeholders unbound: {sorted(missing)}")
    rendered = string.Template(template.user_text_skeleton).substitute(bindings)
    if template.expects_image and not images:
        raise ImageArityMismatch(f"template '{template.name}' expects at least one image")
    if not template.expects_image and images:
        raise ImageArityMismatch(f"template '{template.name}' takes no images, got {len(images)}")
    return LlmRequest(
        template_name=template.name,
        system_text=template.system_text,
        rendered_text=rendered,
        images=tuple(images),
        decoding=decoding or Decoding(),
    )


def _image_content_hash(image: Image.Image) -> str:
    h = hashlib.sha256()
    h.update(image.mode.encode())
    h.update(f"{image.width}x{image.height}".encode())
    h.update(image.tobytes())
    return h.hexdigest()


def request_digest(request: LlmRequest) -> str:
    """Stable digest over the declared request fields only."""
    payload = json.dumps(
        {
            "template": request.template_name,
            "text": request.rendered_text,
            "images": [_image_content_hash(img) for img in request.images],
            "decoding": {
                "temperature": request.decoding.temperature,
                "max_tokens": request.decoding.max_tokens,
            },
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TranscriptStore:
    """Digest → recorded response map, persisted as one JSONL file per run.

    Lookups are pure reads; recording is serialized behind a lock.
    """

    def __init__(self) -> None:
        self._entries: dict[str, tuple[str, str]] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def lookup(self, digest: str) -> tuple[str, str] | None:
        return self._entries.get(digest)

    def record(self, digest: str, template_name: str, response_text: str) -> None:
        with self._lock:
            existing = self._entries.get(digest)
            if existing is not None:
                if existing[1] != response_text:
                    raise DigestCollision(
                        f"digest {digest} already recorded with different response text"
                    )
                return
            self._entries[digest] = (template_name, response_text)
            self._order.append(digest)

    @classmethod
    def load(cls, path: str | Path) -> "TranscriptStore":
        store = cls()
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad transcript line: {exc}") from exc
            store.record(entry["digest"], entry["template"], entry["response_text"])
        return store

    def save(self, path: str | Path) -> None:
        lines = []
        for digest in self._order:
            template_name, text = self._entries[digest]
            lines.append(json.dumps(
                {"digest": digest, "template": template_name, "response_text": text},
                sort_keys=False, separators=(",", ": "), ensure_ascii=False,
            ))
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def record(request: LlmRequest, response: LlmResponse, store: TranscriptStore) -> TranscriptStore:
    """Record a round-trip so replay-mode send() returns exactly this response."""
    store.record(request_digest(request), request.template_name, response.text)
    return store


class ReplayBackend:
    """Answers requests from a transcript store; misses carry digest + template."""

    def __init__(self, store: TranscriptStore, max_concurrency: int = DEFAULT_MAX_CONCURRENCY):
        self.store = store
        self.max_concurrency = max_concurrency

    def send(self, request: LlmRequest) -> LlmResponse:
        digest = request_digest(request)
        found = self.store.lookup(digest)
        if found is None:
            raise ReplayMiss(digest, request.template_name)
        return LlmResponse(text=found[1])


def _encode_image_part(image: Image.Image) -> dict[str, Any]:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    data = base64.b64encode(buf.getvalue()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}}


class LiveBackend:
    """Chat-completions style HTTP client with bounded retry on transient failures."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
        timeout_s: float = 120.0,
        attempts: int = RETRY_ATTEMPTS,
        backoff_s: tuple[float, ...] = RETRY_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_concurrency = max_concurrency
        self.timeout_s = timeout_s
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.sleep = sleep

    def send(self, request: LlmRequest) -> LlmResponse:
        if not self.api_key:
            raise AuthError(f"no API key: set {API_KEY_ENV}")
        content: list[dict[str, Any]] = [{"type": "text", "text": request.rendered_text}]
        content.extend(_encode_image_part(img) for img in request.images)
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: str = ""
        for attempt in range(self.attempts):
            if attempt > 0:
                self.sleep(self.backoff_s[min(attempt - 1, len(self.backoff_s) - 1)])
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.attempts, last_error)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.attempts, last_error)
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return _parse_chat_response(resp.json())
        raise TransportError(f"gave up after {self.attempts} attempts; last error: {last_error}")


def _parse_chat_response(payload: Any) -> LlmResponse:
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed chat response: {exc}") from exc
    if not isinstance(text, str) or not text:
        raise TransportError("chat response carried empty content")
    usage = payload.get("usage") or {}
    return LlmResponse(
        text=text,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
    )


class RecordingBackend:
    """Proxies another backend and records every round-trip into a store."""

    def __init__(self, inner: Any, store: TranscriptStore):
        self.inner = inner
        self.store = store
        self.max_concurrency = getattr(inner, "max_concurrency", DEFAULT_MAX_CONCURRENCY)

    def send(self, request: LlmRequest) -> LlmResponse:
        response = self.inner.send(request)
        record(request, response, self.store)
        return response


def send(request: LlmRequest, backend: Any) -> LlmResponse:
    """Send through whichever backend is configured (live, replay, or recording)."""
    return backend.send(request)


_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*(.*?)```", re.DOTALL)


def extract_json_payload(text: str) -> Any:
    """Pull the first JSON value out of a model response.

    Accepts fenced blocks, bare JSON, or JSON embedded in prose; raises
    ResponseParseError when nothing parseable is found.
    """
    candidates: list[str] = [m.group(1) for m in _FENCE_RE.finditer(text)]
    candidates.append(text)
    start = min((i for i in (text.find("["), text.find("{")) if i >= 0), default=-1)
    if start >= 0:
        candidates.append(text[start:])
    for candidate in candidates:
        candidate = candidate.strip()
        if not candidate:
            continue
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            decoder = json.JSONDecoder()
            # earliest opener wins, so an outer object beats a nested array
            for idx in sorted(i for i in (candidate.find("["), candidate.find("{")) if i >= 0):
                try:
                    value, _ = decoder.raw_decode(candidate[idx:])
                    return value
                except json.JSONDecodeError:
                    continue
    raise ResponseParseError(f"no JSON payload found in response: {text[:120]!r}")


def strip_code_fences(text: str) -> str:
    """Return fenced source content when present, otherwise the trimmed text."""
    m = _FENCE_RE.search(text)
    if m:
        return m.group(1).strip() + "\n"
    stripped = text.strip()
    return stripped + "\n" if stripped else ""
