"""Generator abstraction: mock oracle for desk-scale runs, HTTP client for real endpoints.

A generator client turns a prompt into an answer string and reports a stable
fingerprint identifying the system that produced it. The mock oracle answers
from normalized-substring evidence in the context documents, with optional
confusion (too many irrelevant documents break generation) and seeded noise,
so corpus-scale behavior is fully deterministic and replayable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import requests

from .metrics import exact_match, normalize_answer, token_f1

logger = logging.getLogger(__name__)

UNKNOWN_ANSWER = "UNKNOWN"


class TransportError(RuntimeError):
    """Endpoint unreachable or timed out after all retries."""


class ProtocolError(RuntimeError):
    """Endpoint responded, but not with a usable answer."""


@dataclass(frozen=True)
class Prompt:
    """A generation request: ranked context document texts plus the query.

    ``text`` is the fully rendered prompt (see compress.assemble_prompt);
    clients send it verbatim, so caching and mock noise key on it.
    """

    query_id: str
    query: str
    context_docs: tuple[str, ...]
    template_id: str
    text: str


class GeneratorClient(Protocol):
    def generate(self, prompt: Prompt) -> str: ...

    def fingerprint(self) -> str: ...


@dataclass(frozen=True)
class JudgeMode:
    """How generator output is judged against gold answers.

    ``em`` is normalized exact match; ``f1`` accepts any output whose best
    token-F1 against a gold reaches the threshold (for free-form answers).
    """

    kind: str = "em"
    threshold: float = 0.6

    def __post_init__(self) -> None:
        if self.kind not in ("em", "f1"):
            raise ValueError(f"unknown judge mode {self.kind!r}")
        if self.kind == "f1" and not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"f1 threshold must be in (0, 1], got {self.threshold}")

    @classmethod
    def parse(cls, spec: str) -> "JudgeMode":
        """Parse ``"em"``, ``"f1"``, or ``"f1:0.6"``."""
        if spec == "em":
            return cls(kind="em")
        if spec == "f1":
            return cls(kind="f1")
        if spec.startswith("f1:"):
            return cls(kind="f1", threshold=float(spec.split(":", 1)[1]))
        raise ValueError(f"unknown judge mode spec {spec!r}")

    def __str__(self) -> str:
        return self.kind if self.kind == "em" else f"f1:{self.threshold}"


def judge_correct(output: str, golds: Sequence[str], mode: JudgeMode = JudgeMode()) -> bool:
    """Decide whether a generated answer counts as correct."""
    if not golds:
        raise ValueError("judge_correct requires at least one gold answer")
    if mode.kind == "em":
        return bool(exact_match(output, golds))
    return token_f1(output, golds) >= mode.threshold


# ---------------------------------------------------------------------------
# Mock oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MockOracleConfig:
    """Behavior knobs for the deterministic mock generator.

    confusion_threshold: if set, generation fails whenever the number of
        context documents containing no gold answer reaches it, so extra
        context can hurt (needed to reproduce rise-then-fall sweeps).
    noise_rate: probability of flipping a correct answer to a wrong token,
        derived per-prompt from the seed, hence order-independent.
    """

    match_mode: str = "normalized-substring"
    confusion_threshold: int | None = None
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.match_mode != "normalized-substring":
            raise ValueError(f"unsupported match_mode {self.match_mode!r}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must be in [0, 1), got {self.noise_rate}")


def _stable_unit(seed: int, key: str) -> float:
    """Uniform [0, 1) value derived from (seed, key); stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}|{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _doc_has_evidence(doc_text: str, norm_golds: Sequence[str]) -> bool:
    norm_doc = normalize_answer(doc_text)
    return any(g and g in norm_doc for g in norm_golds)


def mock_generate(
    config: MockOracleConfig,
    prompt: Prompt,
    golds: Sequence[str],
    closed_book_known: bool = False,
) -> str:
    """Deterministic stand-in for a real generator.

    Answers with the first gold when some context document contains a gold
    answer (normalized substring), or when the context is empty and the
    example is flagged closed-book-known. The confusion threshold and noise
    flip are applied after that base decision.
    """
    if not golds:
        raise ValueError("mock_generate requires at least one gold answer")
    norm_golds = [normalize_answer(g) for g in golds]

    if prompt.context_docs:
        evidence = [_doc_has_evidence(doc, norm_golds) for doc in prompt.context_docs]
        answered = any(evidence)
        if answered and config.confusion_threshold is not None:
            distractors = sum(1 for has in evidence if not has)
            if distractors >= config.confusion_threshold:
                answered = False
    else:
        answered = closed_book_known

    if answered and config.noise_rate > 0.0:
        key = f"{prompt.query_id}|{prompt.text}"
        if _stable_unit(config.seed, key) < config.noise_rate:
            digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:6]
            return f"noise-{digest}"

    return golds[0] if answered else UNKNOWN_ANSWER


class MockOracleClient:
    """GeneratorClient over mock_generate, bound to a corpus's gold answers.

    ``closed_book_ids`` lists the examples the simulated model can answer
    with no context at all (label-0 candidates).
    """

    def __init__(
        self,
        config: MockOracleConfig,
        golds_by_id: Mapping[str, Sequence[str]],
        closed_book_ids: Sequence[str] = (),
    ):
        self.config = config
        self.golds_by_id = {k: tuple(v) for k, v in golds_by_id.items()}
        self.closed_book_ids = frozenset(closed_book_ids)
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, prompt: Prompt) -> str:
        golds = self.golds_by_id.get(prompt.query_id)
        if golds is None:
            raise KeyError(f"mock oracle has no gold answers for query {prompt.query_id!r}")
        with self._lock:
            self.calls += 1
        return mock_generate(
            self.config,
            prompt,
            golds,
            closed_book_known=prompt.query_id in self.closed_book_ids,
        )

    def fingerprint(self) -> str:
        corpus = hashlib.sha256()
        for qid in sorted(self.golds_by_id):
            closed = qid in self.closed_book_ids
            corpus.update(f"{qid}|{self.golds_by_id[qid]}|{closed}\n".encode("utf-8"))
        cfg = (
            f"{self.config.match_mode}|{self.config.confusion_threshold}"
            f"|{self.config.noise_rate}|{self.config.seed}"
        )
        corpus.update(cfg.encode("utf-8"))
        return f"mock:{corpus.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HttpGeneratorConfig:
    """Connection settings for a plain JSON-over-POST generation endpoint.

    Request shape: {"model", "prompt", "temperature", "max_tokens"} -> {"text"}.
    Responses are cached under cache_dir keyed by hash(model, prompt text).
    """

    endpoint_url: str
    model_name: str
    temperature: float = 0.0
    max_tokens: int = 256
    timeout_ms: int = 30000
    max_retries: int = 3
    api_key_env_var: str | None = None
    cache_dir: str | None = None
    max_in_flight: int = 4
    backoff_base_s: float = 0.25


def _default_request(config: HttpGeneratorConfig, prompt: Prompt) -> dict:
    return {
        "model": config.model_name,
        "prompt": prompt.text,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }


def _default_parse(payload: dict) -> str:
    if "text" not in payload:
        raise ProtocolError(f"response missing 'text' field: {str(payload)[:200]}")
    return str(payload["text"])


class HttpGeneratorClient:
    """GeneratorClient speaking plain JSON over HTTP POST, with retries and a disk cache.

    ``request_builder`` / ``response_parser`` are the adapter point for
    chat-message-shaped endpoints.
    """

    def __init__(
        self,
        config: HttpGeneratorConfig,
        request_builder: Callable[[HttpGeneratorConfig, Prompt], dict] = _default_request,
        response_parser: Callable[[dict], str] = _default_parse,
        session: requests.Session | None = None,
    ):
        self.config = config
        self.request_builder = request_builder
        self.response_parser = response_parser
        self.session = session or requests.Session()
        self.calls = 0
        self.cache_hits = 0
        self._in_flight = threading.Semaphore(config.max_in_flight)
        self._cache_lock = threading.Lock()
        if config.cache_dir:
            Path(config.cache_dir).mkdir(parents=True, exist_ok=True)

    def _cache_path(self, prompt: Prompt) -> Path | None:
        if not self.config.cache_dir:
            return None
        key = hashlib.sha256(
            f"{self.config.model_name}\x00{prompt.text}".encode("utf-8")
        ).hexdigest()
        return Path(self.config.cache_dir) / f"{key}.json"

    def generate(self, prompt: Prompt) -> str:
        # Counters share the cache lock; contention is negligible.
        with self._cache_lock:
            self.calls += 1
        cache_path = self._cache_path(prompt)
        if cache_path is not None and cache_path.exists():
            with self._cache_lock:
                self.cache_hits += 1
            return json.loads(cache_path.read_text(encoding="utf-8"))["text"]

        text = self._fetch(prompt)
        if cache_path is not None:
            with self._cache_lock:
                tmp = cache_path.with_suffix(".tmp")
                tmp.write_text(json.dumps({"text": text}, ensure_ascii=False), encoding="utf-8")
                tmp.replace(cache_path)
        return text

    def _fetch(self, prompt: Prompt) -> str:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        payload = self.request_builder(self.config, prompt)
        timeout_s = self.config.timeout_ms / 1000.0
        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                time.sleep(self.config.backoff_base_s * 2 ** (attempt - 1))
            try:
                with self._in_flight:
                    resp = self.session.post(
                        self.config.endpoint_url, json=payload, headers=headers, timeout=timeout_s
                    )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                logger.warning("generation attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                continue
            if 200 <= resp.status_code < 300:
                if attempt > 0:
                    logger.info("generation succeeded on attempt %d/%d", attempt + 1, attempts)
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"non-JSON response: {resp.text[:200]}") from exc
                return self.response_parser(body)
            if 500 <= resp.status_code < 600:
                last_error = ProtocolError(f"status {resp.status_code}: {resp.text[:200]}")
                logger.warning(
                    "generation attempt %d/%d got status %d",
                    attempt + 1,
                    attempts,
                    resp.status_code,
                )
                continue
            # 4xx is not retryable: the request itself is wrong.
            reason = "unauthorized" if resp.status_code == 401 else "request rejected"
            raise ProtocolError(f"{reason}: status {resp.status_code}: {resp.text[:200]}")
        raise TransportError(
            f"endpoint {self.config.endpoint_url} failed after {attempts} attempts: {last_error}"
        )

    def fingerprint(self) -> str:
        return f"http:{self.config.model_name}@{self.config.endpoint_url}"
