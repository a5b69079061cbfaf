"""Uniform completion interface over pluggable model providers.

Two providers ship: an OpenAI-style HTTP chat-completion client and a
deterministic scripted provider used for tests and replayable runs.
Credentials are referenced by environment-variable name only and never
written to logs or journals.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_CAP_S = 30.0


class GatewayConfigError(ValueError):
    """Provider configuration is invalid (bad script file, missing endpoint...)."""


class TransportError(RuntimeError):
    """Transient transport failure; retried up to max_retries."""


class EmptyCompletionError(RuntimeError):
    """Provider returned nothing usable (refusal, exhausted script queue)."""


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class ModelConfig:
    provider: str = "scripted"  # scripted | http_openai_style
    model_name: str = "scripted"
    temperature: float = 0.7
    max_output_tokens: int = 4096
    request_timeout: float = 120.0
    max_retries: int = 3
    script_path: Optional[str] = None
    endpoint: Optional[str] = None
    api_key_env: Optional[str] = None

    def validate(self) -> None:
        if self.temperature < 0:
            raise GatewayConfigError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise GatewayConfigError("max_output_tokens must be positive")
        if self.provider == "scripted":
            if self.script_path is None:
                raise GatewayConfigError("scripted provider requires script_path")
        elif self.provider == "http_openai_style":
            if not self.endpoint:
                raise GatewayConfigError("http provider requires an endpoint")
            if not self.api_key_env:
                raise GatewayConfigError("http provider requires api_key_env (env var name)")
        else:
            raise GatewayConfigError(f"unknown provider {self.provider!r}")


@dataclass
class CompletionRecord:
    prompt_hash: str
    response_text: str
    latency: float
    token_counts: Optional[Tuple[int, int]] = None
    provider_meta: Dict[str, Any] = field(default_factory=dict)


class ScriptedProvider:
    """Deterministic canned-response provider.

    Unkeyed responses are served in order and consumed; keyed responses match
    by prompt-hash prefix, are checked after the queue is exhausted, and are
    reusable so identical prompts replay identically.
    """

    def __init__(self, queue: List[str], keyed: Optional[List[Tuple[str, str]]] = None):
        self.queue: List[str] = list(queue)
        self.keyed: List[Tuple[str, str]] = list(keyed or [])
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        queue: List[str] = []
        keyed: List[Tuple[str, str]] = []
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise GatewayConfigError(f"cannot read script file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                response = entry["response"]
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise GatewayConfigError(f"{path}:{lineno}: malformed script entry: {exc}") from exc
            if entry.get("match") is not None:
                keyed.append((str(entry["match"]), str(response)))
            else:
                queue.append(str(response))
        if not queue and not keyed:
            raise GatewayConfigError(f"script file {path} contains no responses")
        return cls(queue, keyed)

    def complete(self, prompt: str, cfg: ModelConfig) -> Tuple[str, Dict[str, Any]]:
        self.calls += 1
        h = prompt_hash(prompt)
        if self.queue:
            return self.queue.pop(0), {"source": "queue"}
        # Longest matching hash prefix wins; empty prefix acts as a catch-all.
        best: Optional[Tuple[str, str]] = None
        for prefix, response in self.keyed:
            if h.startswith(prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, response)
        if best is not None:
            return best[1], {"source": "keyed", "match": best[0]}
        raise EmptyCompletionError("scripted provider queue exhausted")


class HttpOpenAIProvider:
    """OpenAI-style JSON chat-completion client."""

    def __init__(self, transport: Optional[Callable[..., Dict[str, Any]]] = None):
        self.transport = transport or self._default_transport

    @staticmethod
    def _default_transport(url: str, headers: Dict[str, str], payload: Dict[str, Any], timeout: float):
        import requests

        try:
            resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise EmptyCompletionError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        return resp.json()

    def complete(self, prompt: str, cfg: ModelConfig) -> Tuple[str, Dict[str, Any]]:
        api_key = os.environ.get(cfg.api_key_env or "", "")
        if not api_key:
            raise GatewayConfigError(f"credential env var {cfg.api_key_env} is not set")
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        data = self.transport(cfg.endpoint, headers, payload, cfg.request_timeout)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EmptyCompletionError(f"unexpected response shape: {exc}") from exc
        if not text:
            raise EmptyCompletionError("provider returned empty content")
        meta: Dict[str, Any] = {}
        usage = data.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            meta["token_counts"] = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return text, meta


def load_script(path: str | Path) -> ScriptedProvider:
    return ScriptedProvider.from_file(path)


class LMGateway:
    """Retry/backoff wrapper plus append-only completion log."""

    def __init__(
        self,
        cfg: ModelConfig,
        provider: Optional[Any] = None,
        log_path: Optional[str | Path] = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        cfg.validate()
        self.cfg = cfg
        if provider is not None:
            self.provider = provider
        elif cfg.provider == "scripted":
            self.provider = ScriptedProvider.from_file(cfg.script_path)
        else:
            self.provider = HttpOpenAIProvider()
        self.log_path = Path(log_path) if log_path else None
        self.sleep = sleep
        self.clock = clock
        self.log: List[CompletionRecord] = []
        self._backoff_rng = random.Random(0)
        self.total_calls = 0

    def complete(self, bundle) -> CompletionRecord:
        """Complete a PromptBundle (anything with a .rendered attribute)."""
        prompt = bundle.rendered if hasattr(bundle, "rendered") else str(bundle)
        h = prompt_hash(prompt)
        attempt = 0
        while True:
            start = self.clock()
            try:
                self.total_calls += 1
                text, meta = self.provider.complete(prompt, self.cfg)
                break
            except TransportError as exc:
                attempt += 1
                if attempt > self.cfg.max_retries:
                    raise TransportError(f"exhausted {self.cfg.max_retries} retries: {exc}") from exc
                delay = min(BACKOFF_CAP_S, BACKOFF_BASE_S * (BACKOFF_FACTOR ** (attempt - 1)))
                delay *= 0.5 + self._backoff_rng.random()
                logger.warning("transport failure (%s); retry %d in %.1fs", exc, attempt, delay)
                self.sleep(delay)
        latency = self.clock() - start
        record = CompletionRecord(
            prompt_hash=h,
            response_text=text,
            latency=latency,
            token_counts=meta.pop("token_counts", None),
            provider_meta=meta,
        )
        self._append_log(record)
        return record

    def _append_log(self, record: CompletionRecord) -> None:
        self.log.append(record)
        if self.log_path is not None:
            row = {
                "prompt_hash": record.prompt_hash,
                "response_text": record.response_text,
                "latency": record.latency,
                "token_counts": list(record.token_counts) if record.token_counts else None,
                "provider_meta": record.provider_meta,
            }
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
