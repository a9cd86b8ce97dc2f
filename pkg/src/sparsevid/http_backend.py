"""Chat-completions client with retries, a wall-clock deadline, and a shared
concurrency limiter."""
from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx

from .backend import (AuthError, BackendError, MalformedReply, OptionScores, RateLimited,
                      SamplingParams, ServerError, Timeout, score_options_via_logprobs)
from .video import Frame

log = logging.getLogger(__name__)

REDACTED = "***"


@dataclass
class EndpointConfig:
    endpoint: str
    model: str
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout_ms: int = 30_000
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_base_s: float = 0.5
    backoff_max_s: float = 8.0
    logprobs: bool = True
    sampling_fallback: int = 8
    debug_log: str | None = None
    headers: dict[str, str] = field(default_factory=dict)

    @property
    def timeout_s(self) -> float:
        return self.timeout_ms / 1000.0

    @property
    def deadline_s(self) -> float:
        """Upper bound on one call, retries and backoff included."""
        return (self.max_retries + 1) * self.timeout_s


def image_part(frame: Frame) -> dict[str, Any]:
    b64 = base64.b64encode(frame.data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{frame.mime};base64,{b64}"}}


def chat_body(model: str, prompt: str, images: Sequence[Frame], params: SamplingParams,
              **extra: Any) -> dict[str, Any]:
    content: list[dict[str, Any]] = [{"type": "text", "text": prompt}]
    content.extend(image_part(f) for f in images)
    body = {
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
    }
    body.update(extra)
    return body


class HttpBackend:
    """Talks to any OpenAI-compatible ``/chat/completions`` endpoint.

    Transient failures (timeouts, connection errors, 429, 5xx) are retried
    with exponential backoff; the whole call never exceeds
    ``(max_retries + 1) * timeout``.
    """

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client()
        self._limiter = threading.BoundedSemaphore(max(1, config.max_concurrency))
        self._log_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json", **self.config.headers}
        env = self.config.api_key_env
        key = os.environ.get(env) if env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _debug(self, record: dict[str, Any]) -> None:
        if not self.config.debug_log:
            return
        with self._log_lock, open(self.config.debug_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        cfg = self.config
        deadline = time.monotonic() + cfg.deadline_s
        headers = self._headers()
        last: BackendError | None = None
        for attempt in range(cfg.max_retries + 1):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            t0 = time.monotonic()
            retry_after = None
            if not self._limiter.acquire(timeout=remaining):
                last = Timeout("timed out waiting for a free request slot")
                break
            try:
                resp = self._client.post(cfg.endpoint, json=body, headers=headers,
                                         timeout=min(cfg.timeout_s, max(deadline - t0, 1e-3)))
            except httpx.TimeoutException as exc:
                self._limiter.release()
                last = Timeout(f"request timed out after {cfg.timeout_s:.3g}s: {exc}")
            except httpx.TransportError as exc:
                self._limiter.release()
                last = Timeout(f"endpoint unreachable: {exc}")
            else:
                self._limiter.release()
                self._debug({
                    "attempt": attempt, "status": resp.status_code,
                    "elapsed_ms": round((time.monotonic() - t0) * 1000, 2),
                    "request": {**body, "messages": "<omitted>"},
                    "headers": {k: (REDACTED if k.lower() == "authorization" else v)
                                for k, v in headers.items()},
                    "response": resp.text[:2000],
                })
                status = resp.status_code
                if status in (401, 403):
                    raise AuthError(f"HTTP {status}: {resp.text[:200]}")
                if status == 429:
                    last = RateLimited(f"HTTP 429 after {attempt + 1} attempt(s)")
                    retry_after = _retry_after(resp)
                elif status >= 500:
                    last = ServerError(f"HTTP {status}: {resp.text[:200]}")
                elif status >= 400:
                    raise BackendError(f"HTTP {status}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedReply(f"response is not JSON: {exc}") from exc
            log.warning("attempt %d/%d failed: %s", attempt + 1, cfg.max_retries + 1, last)
            if attempt == cfg.max_retries:
                break
            delay = min(cfg.backoff_base_s * 2 ** attempt, cfg.backoff_max_s)
            if retry_after is not None:
                delay = min(max(delay, retry_after), cfg.backoff_max_s)
            delay = min(delay, deadline - time.monotonic())
            if delay > 0:
                time.sleep(delay)
        raise last or Timeout("deadline exhausted before the first attempt")

    def generate(self, prompt: str, images: Sequence[Frame], params: SamplingParams) -> str:
        data = self._post(chat_body(self.config.model, prompt, images, params))
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedReply(f"no choices[0].message.content in reply: {exc!r}") from exc
        if not isinstance(content, str):
            raise MalformedReply("message content is not a string")
        return content

    def first_token_logprobs(self, prompt: str, images: Sequence[Frame]) -> dict[str, float]:
        if not self.config.logprobs:
            return {}
        params = SamplingParams(temperature=0.0, top_p=1.0, max_tokens=1)
        data = self._post(chat_body(self.config.model, prompt, images, params,
                                    logprobs=True, top_logprobs=20))
        try:
            first = data["choices"][0]["logprobs"]["content"][0]
        except (KeyError, IndexError, TypeError):
            return {}
        out: dict[str, float] = {}
        for cand in first.get("top_logprobs") or [first]:
            token = str(cand.get("token", "")).strip().strip("().").upper()
            if token and token not in out:
                out[token] = float(cand["logprob"])
        return out

    def score_options(self, prompt: str, images: Sequence[Frame],
                      options: Sequence[str]) -> OptionScores:
        return score_options_via_logprobs(self, prompt, images, options,
                                          samples=self.config.sampling_fallback,
                                          allow_sampling=self.config.sampling_fallback > 0)


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("Retry-After")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None
