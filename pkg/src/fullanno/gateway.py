"""Client layer for the external expert models (detectors, OCR, region
captioner, OCR verifier, caption integrator).

One Gateway instance is shared by all workers. It enforces, per endpoint:

* in-flight concurrency <= max_in_flight (semaphore);
* a sliding 60-second window of at most requests_per_minute requests;
* at most max_retries retries on retryable failures (timeout, HTTP 429/5xx)
  with exponential backoff starting at backoff_base milliseconds;
* an on-disk content-addressed response cache keyed by
  sha256(endpoint_id + template version + canonical request bytes) — a hit
  returns the byte-identical prior response with no network call.

Time comes from an injectable clock so the limiter and backoff are testable
(and deterministic) without real sleeping. Cache writes happen only after a
request completes, so cancelling an in-flight request cannot corrupt it.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ClientError, ConfigError, EmptyResponse, MalformedResponse
from .model import BBox, Detection, DenseCaption, OcrEntry
from .tokenizers import Tokenizer

DEFAULT_AUTH_ENV_VAR = "FULLANNO_API_KEY"


@dataclass(frozen=True)
class EndpointConfig:
    endpoint_id: str
    base_url: str
    model: str = ""
    auth_env_var: str = DEFAULT_AUTH_ENV_VAR
    max_in_flight: int = 4
    requests_per_minute: int = 60
    max_retries: int = 3
    backoff_base_ms: int = 250
    temperature: float = 0.2
    max_output_tokens: int = 512
    stub: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ConfigError(f"{self.endpoint_id}: max_in_flight must be >= 1")

    @property
    def is_stub(self) -> bool:
        return self.base_url.startswith("stub:")

    @classmethod
    def from_json(cls, endpoint_id: str, doc: dict) -> "EndpointConfig":
        decoding = doc.get("decoding", {})
        return cls(
            endpoint_id=endpoint_id,
            base_url=doc["base_url"],
            model=doc.get("model", ""),
            auth_env_var=doc.get("auth_env_var", DEFAULT_AUTH_ENV_VAR),
            max_in_flight=doc.get("max_in_flight", 4),
            requests_per_minute=doc.get("requests_per_minute", 60),
            max_retries=doc.get("max_retries", 3),
            backoff_base_ms=doc.get("backoff_base_ms", 250),
            temperature=decoding.get("temperature", 0.2),
            max_output_tokens=decoding.get("max_output_tokens", 512),
            stub=doc.get("stub", {}),
        )


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class FakeClock:
    """Deterministic clock for tests and stub-only runs; sleep() just advances."""

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self._t += seconds

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


class _EndpointLimiter:
    """Sliding-window rate limit plus in-flight semaphore for one endpoint."""

    def __init__(self, cfg: EndpointConfig, clock):
        self._cfg = cfg
        self._clock = clock
        self._sem = threading.Semaphore(cfg.max_in_flight)
        self._lock = threading.Lock()
        self._issued: deque[float] = deque()

    def __enter__(self):
        self._sem.acquire()
        while True:
            with self._lock:
                now = self._clock.now()
                while self._issued and self._issued[0] <= now - 60.0:
                    self._issued.popleft()
                if len(self._issued) < self._cfg.requests_per_minute:
                    self._issued.append(now)
                    return self
                wait = self._issued[0] + 60.0 - now
            self._clock.sleep(wait)

    def __exit__(self, *exc):
        self._sem.release()


class ResponseCache:
    """Content-addressed on-disk cache; one JSON file per request hash."""

    def __init__(self, cache_dir: Optional[str], clock):
        self._dir = cache_dir
        self._clock = clock
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    def _path(self, request_hash: str) -> str:
        return os.path.join(self._dir, request_hash + ".json")

    def get(self, request_hash: str) -> Optional[dict]:
        if not self._dir:
            return None
        path = self._path(request_hash)
        with self._lock:
            if not os.path.exists(path):
                self.misses += 1
                return None
            with open(path, encoding="utf-8") as f:
                entry = json.load(f)
            self.hits += 1
        return entry["response"]

    def put(self, request_hash: str, response: dict) -> None:
        if not self._dir:
            return
        entry = {
            "request_hash": request_hash,
            "response": response,
            "timestamp": self._clock.now(),
        }
        tmp = self._path(request_hash) + ".tmp"
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(entry, f)
            os.replace(tmp, self._path(request_hash))


class HttpTransport:
    """Live HTTP JSON transport (chat-completion wire shape, bearer auth)."""

    def __init__(self, timeout: float = 60.0):
        self._timeout = timeout

    def send(self, cfg: EndpointConfig, payload: dict) -> dict:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(cfg.auth_env_var, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                cfg.base_url, json=payload, headers=headers, timeout=self._timeout
            )
        except requests.Timeout:
            raise ClientError(f"{cfg.endpoint_id}: request timed out", retryable=True)
        except requests.RequestException as e:
            raise ClientError(f"{cfg.endpoint_id}: {e}", retryable=True)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ClientError(
                f"{cfg.endpoint_id}: HTTP {resp.status_code}",
                retryable=True,
                status=resp.status_code,
            )
        if resp.status_code >= 400:
            raise ClientError(
                f"{cfg.endpoint_id}: HTTP {resp.status_code}",
                retryable=False,
                status=resp.status_code,
            )
        try:
            return resp.json()
        except ValueError:
            raise MalformedResponse(f"{cfg.endpoint_id}: response is not JSON")


def canonical_request_bytes(payload: dict) -> bytes:
    return json.dumps(payload, ensure_ascii=True, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def request_hash(endpoint_id: str, template_version: str, payload: dict) -> str:
    h = hashlib.sha256()
    h.update(endpoint_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(template_version.encode("utf-8"))
    h.update(b"\x00")
    h.update(canonical_request_bytes(payload))
    return h.hexdigest()


class Gateway:
    """Shared, thread-safe front door to every configured expert endpoint."""

    def __init__(
        self,
        endpoints: dict[str, EndpointConfig],
        transport=None,
        cache_dir: Optional[str] = None,
        clock=None,
        dry_run: bool = False,
    ):
        self.clock = clock or SystemClock()
        self._endpoints = dict(endpoints)
        self._dry_run = dry_run
        if transport is None:
            transport = HttpTransport()
        self._transport = transport
        self._stub_transport = None  # lazy, avoids import cycle with stubs
        self.cache = ResponseCache(cache_dir, self.clock)
        self._limiters: dict[str, _EndpointLimiter] = {}
        self._limiter_lock = threading.Lock()
        self.network_calls = 0
        self.clamp_warnings = 0

    def endpoint(self, endpoint_id: str) -> EndpointConfig:
        try:
            return self._endpoints[endpoint_id]
        except KeyError:
            raise ConfigError(f"endpoint {endpoint_id!r} is not configured")

    def _limiter(self, cfg: EndpointConfig) -> _EndpointLimiter:
        with self._limiter_lock:
            if cfg.endpoint_id not in self._limiters:
                self._limiters[cfg.endpoint_id] = _EndpointLimiter(cfg, self.clock)
            return self._limiters[cfg.endpoint_id]

    def _send(self, cfg: EndpointConfig, payload: dict) -> dict:
        if cfg.is_stub:
            if self._stub_transport is None:
                from .stubs import StubTransport

                self._stub_transport = StubTransport()
            return self._stub_transport.send(cfg, payload)
        if self._dry_run:
            raise ConfigError(
                f"dry run: endpoint {cfg.endpoint_id!r} is not a stub; refusing network access"
            )
        return self._transport.send(cfg, payload)

    def request(self, cfg: EndpointConfig, payload: dict,
                template_version: str = "") -> dict:
        """Issue one request through cache, limiter and retry machinery."""
        rhash = request_hash(cfg.endpoint_id, template_version, payload)
        cached = self.cache.get(rhash)
        if cached is not None:
            return cached
        attempts = 0
        while True:
            attempts += 1
            with self._limiter(cfg):
                self.network_calls += 1
                try:
                    response = self._send(cfg, payload)
                    break
                except ClientError as e:
                    if not e.retryable or attempts > cfg.max_retries:
                        raise
            self.clock.sleep(cfg.backoff_base_ms / 1000.0 * (2 ** (attempts - 1)))
        self.cache.put(rhash, response)
        return response

    # --- operations -------------------------------------------------------

    def detect(self, image_ref: str, image_size: tuple[float, float],
               source: EndpointConfig) -> list[Detection]:
        """Run one detector source over an image; boxes clamped to the image."""
        payload = {
            "op": "detect",
            "model": source.model,
            "image_ref": image_ref,
            "image_size": [image_size[0], image_size[1]],
        }
        response = self.request(source, payload)
        raw = response.get("detections")
        if not isinstance(raw, list):
            raise MalformedResponse(f"{source.endpoint_id}: missing 'detections' list")
        out = []
        for i, d in enumerate(raw):
            try:
                box = BBox(*(float(c) for c in d["bbox"]))
                category = str(d["category"])
                score = float(d["score"])
            except (KeyError, TypeError, ValueError):
                raise MalformedResponse(
                    f"{source.endpoint_id}: malformed detection at index {i}"
                )
            clamped = box.clamped(image_size[0], image_size[1])
            if clamped != box:
                self.clamp_warnings += 1
            if clamped.degenerate:
                continue
            out.append(Detection(bbox=clamped, category=category, score=score,
                                 source_id=source.endpoint_id))
        return out

    def recognize_text(self, image_ref: str, image_size: tuple[float, float],
                       source: EndpointConfig) -> list[OcrEntry]:
        """Run the OCR source; entries come back unverified, ids are per-call
        ordinals the caller must remap to dataset-unique ids."""
        payload = {
            "op": "ocr",
            "model": source.model,
            "image_ref": image_ref,
            "image_size": [image_size[0], image_size[1]],
        }
        response = self.request(source, payload)
        raw = response.get("entries")
        if not isinstance(raw, list):
            raise MalformedResponse(f"{source.endpoint_id}: missing 'entries' list")
        out = []
        for i, e in enumerate(raw):
            try:
                box = BBox(*(float(c) for c in e["bbox"]))
                text = str(e["text"])
                confidence = float(e.get("confidence", 1.0))
            except (KeyError, TypeError, ValueError):
                raise MalformedResponse(
                    f"{source.endpoint_id}: malformed ocr entry at index {i}"
                )
            clamped = box.clamped(image_size[0], image_size[1])
            if clamped.degenerate:
                continue
            out.append(OcrEntry(ocr_id=i, bbox=clamped, text=text,
                                confidence=confidence))
        return out

    def _chat(self, source: EndpointConfig, user_content, template_version: str = "",
              temperature: Optional[float] = None,
              max_output_tokens: Optional[int] = None) -> str:
        payload = {
            "model": source.model,
            "messages": [{"role": "user", "content": user_content}],
            "temperature": source.temperature if temperature is None else temperature,
            "max_tokens": source.max_output_tokens if max_output_tokens is None else max_output_tokens,
        }
        response = self.request(source, payload, template_version=template_version)
        try:
            content = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse(f"{source.endpoint_id}: no message content in response")
        if not isinstance(content, str):
            raise MalformedResponse(f"{source.endpoint_id}: message content is not text")
        return content

    def describe_region(self, crop_ref: str, prompt: str,
                        source: EndpointConfig) -> str:
        """Caption one context-padded crop."""
        content = [
            {"type": "image_ref", "ref": crop_ref},
            {"type": "text", "text": prompt},
        ]
        text = self._chat(source, content)
        if not text.strip():
            raise EmptyResponse(f"{source.endpoint_id}: empty region description")
        return text

    def verify_text(self, crop_ref: str, text: str, source: EndpointConfig) -> str:
        """Ask the verifier to confirm/correct one OCR reading; may return ''."""
        prompt = (
            f'An OCR system read the text "{text}" in this image region. '
            "Reply with the exact text visible in the region and nothing else."
        )
        content = [
            {"type": "image_ref", "ref": crop_ref},
            {"type": "text", "text": prompt},
        ]
        return self._chat(source, content)

    def integrate_caption(self, message, source: EndpointConfig,
                          tokenizer: Tokenizer) -> DenseCaption:
        """Produce the dense caption for one image from its IntegrationMessage."""
        payload_messages = [
            {"role": "system", "content": message.system_preamble},
            {"role": "user", "content": message.content},
        ]
        payload = {
            "model": source.model,
            "messages": payload_messages,
            "temperature": source.temperature,
            "max_tokens": source.max_output_tokens,
        }
        response = self.request(source, payload,
                                template_version=message.template_version)
        try:
            text = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse(f"{source.endpoint_id}: no message content in response")
        if not isinstance(text, str) or not text.strip():
            raise EmptyResponse(f"{source.endpoint_id}: empty dense caption")
        return DenseCaption(
            text=text,
            token_length=tokenizer.count(text),
            generator={
                "endpoint_id": source.endpoint_id,
                "model": source.model,
                "temperature": source.temperature,
                "max_output_tokens": source.max_output_tokens,
                "timestamp": self.clock.now(),
                "template_version": message.template_version,
            },
            prompt_hash=message.hash,
        )
