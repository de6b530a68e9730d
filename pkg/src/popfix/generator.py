"""Pluggable candidate-generation backends.

Three interchangeable implementations sit behind one `generate(bundle)`
method: an OpenAI-compatible HTTP client, a deterministic scripted mock for
tests and offline demos, and a replay cache that serves recorded exchanges.
Any backend can be wrapped for recording, which is what makes whole runs
reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import requests

from .errors import (
    BackendError,
    CacheMissError,
    ContractError,
    ScriptExhaustedError,
    TransportError,
)
from .operators import PromptBundle


class BackendKind(str, Enum):
    HTTP = "http"
    SCRIPTED = "scripted"
    REPLAY = "replay"


@dataclass(frozen=True)
class BackendConfig:
    backend: BackendKind = BackendKind.SCRIPTED
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.8
    max_output_tokens: int = 2048
    request_timeout_s: float = 60.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5
    max_in_flight: int = 4
    api_key_env_var: str = "POPFIX_API_KEY"
    cache_path: str | None = None
    # model -> {"prompt": $ per 1k prompt tokens, "completion": $ per 1k completion tokens}
    price_per_1k: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.backend is BackendKind.HTTP and (not self.endpoint_url or not self.model_name):
            raise ContractError("http backend requires endpoint_url and model_name")
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ContractError("max_in_flight must be >= 1")

    def cost_of(self, prompt_tokens: int, completion_tokens: int) -> float:
        prices = self.price_per_1k.get(self.model_name)
        if not prices:
            return 0.0
        return (
            prompt_tokens / 1000.0 * float(prices.get("prompt", 0.0))
            + completion_tokens / 1000.0 * float(prices.get("completion", 0.0))
        )


@dataclass(frozen=True)
class GeneratorExchange:
    request_id: str
    kind: str
    prompt_text: str
    response_text: str
    latency_s: float
    prompt_tokens: int
    completion_tokens: int
    estimated_cost: float
    backend_tag: str
    prompt_sha256: str

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "kind": self.kind,
            "prompt_text": self.prompt_text,
            "response_text": self.response_text,
            "latency_s": self.latency_s,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "estimated_cost": self.estimated_cost,
            "backend_tag": self.backend_tag,
            "prompt_sha256": self.prompt_sha256,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorExchange":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__})


def prompt_hash(kind: str, rendered_text: str, model_name: str, temperature: float) -> str:
    payload = json.dumps([kind, rendered_text, model_name, float(temperature)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _rough_tokens(text: str) -> int:
    return max(1, (len(text) + 3) // 4)


class _BaseBackend:
    tag = "base"

    def __init__(self, config: BackendConfig):
        self.config = config
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def call_count(self) -> int:
        return self._calls

    def _next_request_id(self) -> str:
        with self._lock:
            self._calls += 1
            return f"q{self._calls:05d}"

    def _hash(self, bundle: PromptBundle) -> str:
        return prompt_hash(
            bundle.kind.value, bundle.rendered_text, self.config.model_name, self.config.temperature
        )

    def generate(self, bundle: PromptBundle) -> GeneratorExchange:
        raise NotImplementedError


class HttpBackend(_BaseBackend):
    """OpenAI-compatible /chat/completions client with retrying and a
    hard cap on concurrently in-flight requests."""

    tag = "http"

    def __init__(self, config: BackendConfig):
        super().__init__(config)
        self._gate = threading.Semaphore(config.max_in_flight)
        self._in_flight = 0
        self._in_flight_high_water = 0

    @property
    def in_flight_high_water(self) -> int:
        return self._in_flight_high_water

    def _url(self) -> str:
        url = self.config.endpoint_url
        if "chat/completions" in url:
            return url
        return url.rstrip("/") + "/chat/completions"

    def generate(self, bundle: PromptBundle) -> GeneratorExchange:
        import os

        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": bundle.rendered_text}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env_var, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_failure = "no attempt made"
        with self._gate:
            with self._lock:
                self._in_flight += 1
                self._in_flight_high_water = max(self._in_flight_high_water, self._in_flight)
            try:
                started = time.monotonic()
                for attempt in range(self.config.max_retries + 1):
                    if attempt:
                        time.sleep(self.config.retry_backoff_s * 2 ** (attempt - 1))
                    try:
                        resp = requests.post(
                            self._url(), json=body, headers=headers, timeout=self.config.request_timeout_s
                        )
                    except requests.RequestException as exc:
                        last_failure = f"transport: {exc}"
                        continue
                    if resp.status_code == 429 or resp.status_code >= 500:
                        last_failure = f"HTTP {resp.status_code}"
                        continue
                    if resp.status_code != 200:
                        raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                    return self._exchange_from(resp, bundle, time.monotonic() - started)
            finally:
                with self._lock:
                    self._in_flight -= 1
        raise TransportError(f"gave up after {self.config.max_retries + 1} attempts ({last_failure})")

    def _exchange_from(
        self, resp: requests.Response, bundle: PromptBundle, latency: float
    ) -> GeneratorExchange:
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from None
        if not content:
            raise BackendError("empty completion")
        usage = payload.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens", _rough_tokens(bundle.rendered_text)))
        completion_tokens = int(usage.get("completion_tokens", _rough_tokens(content)))
        return GeneratorExchange(
            request_id=self._next_request_id(),
            kind=bundle.kind.value,
            prompt_text=bundle.rendered_text,
            response_text=content,
            latency_s=latency,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            estimated_cost=self.config.cost_of(prompt_tokens, completion_tokens),
            backend_tag=self.tag,
            prompt_sha256=self._hash(bundle),
        )


@dataclass
class ScriptedRule:
    """One scripted response with optional match predicates.

    kind restricts to a prompt kind; contains requires every listed substring
    in the rendered prompt; ordinal matches the N-th call of that kind (or
    N-th overall when kind is unset). once-rules are consumed on first use.
    """

    response: str
    kind: str | None = None
    contains: str | Sequence[str] | None = None
    ordinal: int | None = None
    once: bool = False
    consumed: bool = False

    def matches(self, bundle: PromptBundle, kind_ordinal: int, total_ordinal: int) -> bool:
        if self.consumed:
            return False
        if self.kind is not None and self.kind != bundle.kind.value:
            return False
        if self.ordinal is not None:
            reference = kind_ordinal if self.kind is not None else total_ordinal
            if self.ordinal != reference:
                return False
        if self.contains is not None:
            needles = [self.contains] if isinstance(self.contains, str) else list(self.contains)
            if not all(needle in bundle.rendered_text for needle in needles):
                return False
        return True


class ScriptedBackend(_BaseBackend):
    """Deterministic mock: a queue of responses and/or predicate rules.

    Plain strings act as a FIFO queue (each consumed once, matching any
    request); ScriptedRule entries allow kind/substring/ordinal dispatch for
    building whole engine scenarios.
    """

    tag = "scripted"

    def __init__(
        self,
        script: Sequence[str | ScriptedRule] = (),
        default_response: str | None = None,
        config: BackendConfig | None = None,
    ):
        super().__init__(config or BackendConfig(backend=BackendKind.SCRIPTED))
        self.rules = [
            entry if isinstance(entry, ScriptedRule) else ScriptedRule(response=entry, once=True)
            for entry in script
        ]
        self.default_response = default_response
        self._kind_counts: dict[str, int] = defaultdict(int)

    @classmethod
    def from_file(cls, path: str | Path, config: BackendConfig | None = None) -> "ScriptedBackend":
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            ScriptedRule(
                response=entry["response"],
                kind=entry.get("kind"),
                contains=entry.get("contains"),
                ordinal=entry.get("ordinal"),
                once=entry.get("once", False),
            )
            for entry in spec
        ]
        return cls(script=rules, config=config)

    def generate(self, bundle: PromptBundle) -> GeneratorExchange:
        with self._lock:
            self._kind_counts[bundle.kind.value] += 1
            kind_ordinal = self._kind_counts[bundle.kind.value]
            total_ordinal = sum(self._kind_counts.values())
            response = None
            for rule in self.rules:
                if rule.matches(bundle, kind_ordinal, total_ordinal):
                    response = rule.response
                    if rule.once:
                        rule.consumed = True
                    break
            if response is None:
                response = self.default_response
        if response is None:
            raise ScriptExhaustedError(
                f"no scripted response for {bundle.kind.value} call #{kind_ordinal}"
            )
        prompt_tokens = _rough_tokens(bundle.rendered_text)
        completion_tokens = _rough_tokens(response)
        return GeneratorExchange(
            request_id=self._next_request_id(),
            kind=bundle.kind.value,
            prompt_text=bundle.rendered_text,
            response_text=response,
            latency_s=0.0,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            estimated_cost=self.config.cost_of(prompt_tokens, completion_tokens),
            backend_tag=self.tag,
            prompt_sha256=self._hash(bundle),
        )


class ReplayBackend(_BaseBackend):
    """Serves previously recorded exchanges keyed by prompt hash.

    Identical prompts (e.g. repeated init calls) are replayed FIFO in their
    recorded order. Replay must run with the same model_name/temperature the
    recording used, otherwise hashes cannot line up.
    """

    tag = "replay"

    def __init__(self, cache_path: str | Path, config: BackendConfig | None = None):
        super().__init__(config or BackendConfig(backend=BackendKind.REPLAY))
        self._records: dict[str, deque[GeneratorExchange]] = defaultdict(deque)
        path = Path(cache_path)
        if not path.exists():
            raise CacheMissError(f"replay cache not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = GeneratorExchange.from_dict(json.loads(line))
                self._records[record.prompt_sha256].append(record)

    def generate(self, bundle: PromptBundle) -> GeneratorExchange:
        digest = self._hash(bundle)
        with self._lock:
            queue = self._records.get(digest)
            if not queue:
                raise CacheMissError(
                    f"no recorded exchange for {bundle.kind.value} prompt {digest[:12]}..."
                )
            record = queue.popleft()
            self._calls += 1
        # Recorded fields (ids, tokens, cost, tag) come back verbatim so a
        # replayed run reproduces the original report; latency is zeroed.
        return GeneratorExchange(**{**record.to_dict(), "latency_s": 0.0})


class RecordingBackend:
    """Wraps any backend and appends every exchange to a JSON Lines cache."""

    def __init__(self, inner, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    @property
    def tag(self) -> str:
        return self.inner.tag

    @property
    def config(self) -> BackendConfig:
        return self.inner.config

    @property
    def call_count(self) -> int:
        return self.inner.call_count

    def generate(self, bundle: PromptBundle) -> GeneratorExchange:
        exchange = self.inner.generate(bundle)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(exchange.to_dict(), ensure_ascii=False) + "\n")
        return exchange


def make_backend(config: BackendConfig):
    if config.backend is BackendKind.HTTP:
        return HttpBackend(config)
    if config.backend is BackendKind.SCRIPTED:
        if not config.cache_path:
            raise ContractError(
                "scripted backend needs cache_path pointing at a script file "
                "(or construct ScriptedBackend directly)"
            )
        return ScriptedBackend.from_file(config.cache_path, config)
    if config.backend is BackendKind.REPLAY:
        if not config.cache_path:
            raise ContractError("replay backend needs cache_path")
        return ReplayBackend(config.cache_path, config)
    raise ContractError(f"unknown backend {config.backend!r}")
