"""LLM gateway: one decoding contract, content-addressed caching, audit log.

Every reformulation call goes through :class:`LLMGateway`. Providers are
either :class:`OpenAIChatProvider` (any OpenAI-compatible chat-completions
endpoint) or :class:`MockProvider`, a deterministic offline stand-in.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import httpx

from .exceptions import PreconditionError, ProtocolError, TransportError
from .utils import atomic_write_text, canonical_json

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 256

# Stand-ins for "the temperature recommended by each method".
DEFAULT_TEMPERATURES = {
    "genqr": 0.8,
    "genqr_ensemble": 0.8,
    "q2k": 0.8,
    "q2d_zs": 1.0,
    "q2d_fs": 1.0,
    "q2d_cot": 1.0,
    "qa_expand": 1.0,
    "mugi": 1.0,
    "lamer": 1.0,
    "csqe": 1.0,
}

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class DecodingConfig:
    model: str
    temperature: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.model:
            raise PreconditionError("model name is required")
        if self.temperature < 0:
            raise PreconditionError(f"temperature must be >= 0, got {self.temperature}")
        if isinstance(self.max_tokens, bool) or not isinstance(self.max_tokens, int) or self.max_tokens < 1:
            raise PreconditionError(f"max_tokens must be a positive integer, got {self.max_tokens!r}")
        if self.max_tokens != DEFAULT_MAX_TOKENS:
            logger.warning(
                "decoding override: max_tokens=%d for model %s (default %d)",
                self.max_tokens, self.model, DEFAULT_MAX_TOKENS,
            )


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise PreconditionError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    """A chat call.

    ``tag`` names the expected output shape (keywords, passage, questions,
    filter, judge) and ``sample_index`` distinguishes independent draws of
    an otherwise identical prompt.
    """

    messages: tuple[Message, ...]
    config: DecodingConfig
    tag: str = "passage"
    sample_index: int = 0

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not any(m.role == "user" for m in msgs):
            raise PreconditionError("chat request needs at least one user message")

    @property
    def prompt(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    def wire_messages(self) -> list[dict]:
        return [{"role": m.role, "content": m.content} for m in self.messages]


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    provider: str = ""
    cached: bool = False
    key: str = ""


def cache_key(request: ChatRequest) -> str:
    cfg = request.config
    payload = {
        "model": cfg.model,
        "messages": request.wire_messages(),
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "seed": cfg.seed,
        "sample_index": request.sample_index,
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


class OpenAIChatProvider:
    """OpenAI-compatible ``/chat/completions`` client with bounded retries.

    Transport failures, HTTP 429 and 5xx are retried with exponential
    backoff; other 4xx responses raise ProtocolError immediately.
    """

    name = "openai"

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        max_attempts: int = 4,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url or os.environ.get("REFORMKIT_LLM_BASE_URL") or os.environ.get(
            "OPENAI_BASE_URL", "https://api.openai.com/v1"
        )
        self.api_key = api_key or os.environ.get("REFORMKIT_LLM_API_KEY") or os.environ.get("OPENAI_API_KEY", "")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def payload(self, request: ChatRequest) -> dict:
        cfg = request.config
        body = {
            "model": cfg.model,
            "messages": request.wire_messages(),
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        if cfg.seed is not None:
            body["seed"] = cfg.seed + request.sample_index
        return body

    def generate(self, request: ChatRequest) -> Completion:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self.payload(request)
        last_error = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post("/chat/completions", json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                status = response.status_code
                if status == 429 or status >= 500:
                    last_error = f"HTTP {status}"
                elif status >= 400:
                    raise ProtocolError(
                        f"provider rejected request with HTTP {status}: {_error_message(response)}",
                        provider_message=_error_message(response),
                        status_code=status,
                    )
                else:
                    return self._parse(response)
            if attempt + 1 < self.max_attempts:
                delay = self.backoff * 2**attempt
                logger.info("LLM call failed (%s); retrying in %.1fs", last_error, delay)
                self._sleep(delay)
        raise TransportError(f"LLM endpoint failed after {self.max_attempts} attempts: {last_error}")

    def _parse(self, response) -> Completion:
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError):
            raise ProtocolError("malformed chat-completions response", provider_message=response.text) from None
        usage = data.get("usage") or {}
        return Completion(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            provider=self.name,
        )


def _error_message(response) -> str:
    try:
        err = response.json().get("error")
        if isinstance(err, dict):
            return str(err.get("message", err))
        if err:
            return str(err)
    except ValueError:
        pass
    return response.text


_VOCAB = (
    "absorption acid activation adaptation algorithm analysis antibody archive assembly "
    "asset atmosphere audit balance bandwidth barrier baseline battery benchmark binding "
    "biomarker boundary budget calibration capacity carbon catalyst cellular channel "
    "charter circuit climate cluster coating cohort collateral compliance compound "
    "conduction contract corridor cortex coupling credit crystal culture current "
    "database deficit density deposit diagnosis diffusion dividend dosage drainage "
    "ecology electrode emission enzyme equity erosion estuary exchange exposure "
    "fabric factor fermentation fiber filter fiscal fracture frequency friction fusion "
    "galaxy genome glacier gradient granite habitat harvest hormone hydrogen immunity "
    "incentive index infection inflation inventory isotope journal kernel kinetics "
    "lattice ledger legislation lens lineage liquidity magnet mandate margin membrane "
    "merger metabolism migration mineral molecule monsoon mortgage mutation network "
    "neuron nitrogen nutrient orbit organism oxidation parameter pathogen pension "
    "petition phenotype photon pigment plasma policy polymer portfolio precinct "
    "protein protocol pulse quarry quota radiation reactor receptor reef regulation "
    "reservoir resistance retina revenue ridge salinity satellite sediment sensor "
    "sequence signal soil spectrum statute strain subsidy substrate surplus symptom "
    "syndrome tariff telescope tendon terrain therapy thermal tissue torque toxin "
    "trajectory treaty tremor turbine vaccine valve vapor velocity venture vessel "
    "virus voltage watershed wavelength yield"
).split()

_ANSWER_LINE = re.compile(r"^\s*Answer\s+(\d+)\s*:", re.MULTILINE)
_DOC_MARKER = "Document:"
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


class MockProvider:
    """Deterministic offline provider.

    Output is a pure function of (prompt digest, seed, request tag, sample
    index) and always parses under the toolkit's output contracts. A custom
    ``responder(request) -> str | None`` can override the built-in pools.
    """

    name = "mock"

    def __init__(self, seed: int = 0, responder: Optional[Callable[[ChatRequest], Optional[str]]] = None):
        self.seed = seed
        self.responder = responder

    def generate(self, request: ChatRequest) -> Completion:
        text = self.responder(request) if self.responder else None
        if text is None:
            text = self._builtin(request)
        words = text.split()
        if len(words) > request.config.max_tokens:
            text = " ".join(words[: request.config.max_tokens])
        return Completion(
            text=text,
            prompt_tokens=len(request.prompt.split()),
            completion_tokens=min(len(words), request.config.max_tokens),
            provider=self.name,
        )

    def _rng(self, request: ChatRequest) -> random.Random:
        prompt_digest = hashlib.sha256(request.prompt.encode("utf-8")).hexdigest()
        seed = request.config.seed if request.config.seed is not None else self.seed
        return random.Random(f"{seed}:{prompt_digest}:{request.sample_index}:{request.tag}")

    def _builtin(self, request: ChatRequest) -> str:
        rng = self._rng(request)
        tag = request.tag
        if tag == "keywords":
            return ", ".join(rng.sample(_VOCAB, rng.randint(5, 8)))
        if tag == "questions":
            lines = []
            for i in range(3):
                a, b = rng.sample(_VOCAB, 2)
                lines.append(f"{i + 1}. How does {a} relate to {b}?")
            return "\n".join(lines)
        if tag == "filter":
            n = max((int(m) for m in _ANSWER_LINE.findall(request.prompt)), default=1)
            keep = sorted(rng.sample(range(1, n + 1), rng.randint(1, n)))
            return "\n".join(str(i) for i in keep)
        if tag == "judge":
            sentences = _document_sentences(request.prompt)
            return rng.choice(sentences) if sentences else "NONE"
        sentences = []
        for _ in range(rng.randint(2, 3)):
            words = rng.sample(_VOCAB, rng.randint(8, 14))
            sentences.append(" ".join(words).capitalize() + ".")
        return " ".join(sentences)


def _document_sentences(prompt: str) -> list[str]:
    if _DOC_MARKER not in prompt:
        return []
    body = prompt.split(_DOC_MARKER, 1)[1].strip().split("\n\n", 1)[0]
    return [s.strip() for s in _SENTENCE_SPLIT.split(body) if s.strip()]


class LLMGateway:
    """Single choke point for LLM traffic.

    ``complete`` always reaches the provider; ``cached_complete`` serves
    from a content-addressed cache first. Every call (hit or miss) appends a
    JSONL record to the audit log when one is configured.
    """

    def __init__(self, provider, cache_dir=None, audit_log=None, max_in_flight: int = 8):
        self.provider = provider
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.audit_log = Path(audit_log) if audit_log else None
        self.provider_calls = 0
        self.cache_hits = 0
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    @property
    def provider_name(self) -> str:
        return getattr(self.provider, "name", type(self.provider).__name__)

    def complete(self, request: ChatRequest) -> Completion:
        key = cache_key(request)
        with self._semaphore:
            result = self.provider.generate(request)
        with self._lock:
            self.provider_calls += 1
        result = Completion(
            text=result.text,
            prompt_tokens=result.prompt_tokens,
            completion_tokens=result.completion_tokens,
            provider=result.provider or self.provider_name,
            cached=False,
            key=key,
        )
        self._audit(request, result)
        return result

    def cached_complete(self, request: ChatRequest) -> Completion:
        if self.cache_dir is None:
            return self.complete(request)
        key = cache_key(request)
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            stored = self._load(key)
            if stored is not None:
                with self._lock:
                    self.cache_hits += 1
                self._audit(request, stored)
                return stored
            result = self.complete(request)
            self._store(key, request, result)
            return result

    def _entry_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def _load(self, key: str) -> Optional[Completion]:
        path = self._entry_path(key)
        if not path.exists():
            return None
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            if data["key"] != key:
                raise ValueError("key mismatch")
            return Completion(
                text=data["text"],
                prompt_tokens=int(data["prompt_tokens"]),
                completion_tokens=int(data["completion_tokens"]),
                provider=data["provider"],
                cached=True,
                key=key,
            )
        except (ValueError, KeyError, TypeError, OSError) as exc:
            logger.warning("invalidating corrupt cache entry %s (%s)", path.name, exc)
            path.unlink(missing_ok=True)
            return None

    def _store(self, key: str, request: ChatRequest, result: Completion) -> None:
        entry = {
            "key": key,
            "text": result.text,
            "prompt_tokens": result.prompt_tokens,
            "completion_tokens": result.completion_tokens,
            "provider": result.provider,
            "request": _request_record(request),
        }
        atomic_write_text(self._entry_path(key), json.dumps(entry, ensure_ascii=False, sort_keys=True))

    def _audit(self, request: ChatRequest, result: Completion) -> None:
        if self.audit_log is None:
            return
        record = {
            "ts_ms": int(time.time() * 1000),
            "key": result.key,
            "cached": result.cached,
            "provider": result.provider,
            "request": _request_record(request),
            "response": {
                "text": result.text,
                "prompt_tokens": result.prompt_tokens,
                "completion_tokens": result.completion_tokens,
            },
        }
        line = json.dumps(record, ensure_ascii=False) + "\n"
        with self._lock:
            self.audit_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_log, "a", encoding="utf-8") as fh:
                fh.write(line)


def _request_record(request: ChatRequest) -> dict:
    return {
        "messages": request.wire_messages(),
        "config": asdict(request.config),
        "tag": request.tag,
        "sample_index": request.sample_index,
    }


def build_provider(spec: dict):
    """Provider from a config mapping: ``{"provider": "mock"|"openai", ...}``."""
    kind = spec.get("provider", "mock")
    if kind == "mock":
        return MockProvider(seed=int(spec.get("seed") or 0))
    if kind == "openai":
        return OpenAIChatProvider(
            base_url=spec.get("base_url"),
            api_key=os.environ.get(spec["api_key_env"]) if spec.get("api_key_env") else None,
            max_attempts=int(spec.get("max_attempts", 4)),
        )
    raise PreconditionError(f"unknown LLM provider {kind!r}")
