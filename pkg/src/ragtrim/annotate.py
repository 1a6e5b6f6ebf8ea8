"""Label each example with the smallest rank-prefix the generator needs to answer.

The search walks k upward (optionally probing the empty closed-book context
first) and stops at the first prefix the judge accepts, so easy queries cost
one generator call. Only rank prefixes are ever evaluated.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .compress import assemble_prompt, select_top_k
from .data import AnnotatedTriplet, CompressionLabel, JoinedDataset, QAExample, RetrievalSet
from .generation import (
    GeneratorClient,
    JudgeMode,
    Prompt,
    ProtocolError,
    TransportError,
    judge_correct,
)

__all__ = [
    "AnnotationError",
    "AnnotationAborted",
    "AnnotationOptions",
    "AnnotationStats",
    "annotate_dataset",
    "find_optimal_k",
    "select_top_k",
]

logger = logging.getLogger(__name__)


class AnnotationError(RuntimeError):
    """A single example could not be annotated (generator failure)."""


class AnnotationAborted(RuntimeError):
    """Too many per-example failures; carries the partial results."""

    def __init__(self, message: str, triplets: list[AnnotatedTriplet], stats: "AnnotationStats"):
        super().__init__(message)
        self.triplets = triplets
        self.stats = stats


@dataclass(frozen=True)
class AnnotationOptions:
    judge_mode: JudgeMode = JudgeMode()
    include_k0: bool = True
    template_id: str = "qa_default"
    failure_limit: float = 0.10
    workers: int = 1


@dataclass
class AnnotationStats:
    total_examples: int = 0
    annotated: int = 0
    failed: int = 0
    label_histogram: dict[str, int] = field(default_factory=dict)
    unanswerable_count: int = 0
    generator_calls: int = 0
    cache_hits: int = 0

    @property
    def cache_hit_rate(self) -> float:
        lookups = self.generator_calls + self.cache_hits
        return self.cache_hits / lookups if lookups else 0.0

    def to_dict(self) -> dict:
        return {
            "total_examples": self.total_examples,
            "annotated": self.annotated,
            "failed": self.failed,
            "label_histogram": dict(sorted(self.label_histogram.items())),
            "unanswerable_count": self.unanswerable_count,
            "generator_calls": self.generator_calls,
            "cache_hits": self.cache_hits,
            "cache_hit_rate": self.cache_hit_rate,
        }


def find_optimal_k(
    example: QAExample,
    retrieval: RetrievalSet,
    client: GeneratorClient,
    judge_mode: JudgeMode = JudgeMode(),
    include_k0: bool = True,
    template_id: str = "qa_default",
    generate: Callable[[Prompt], str] | None = None,
) -> CompressionLabel:
    """Smallest k whose rank-prefix yields a judged-correct answer.

    Probes k=0 (closed book) first when enabled, then k=1..N ascending with
    early exit. Returns the unanswerable label when no prefix works.
    """
    generate = generate or client.generate
    ks = range(0 if include_k0 else 1, retrieval.n + 1)
    for k in ks:
        prompt = assemble_prompt(example, select_top_k(retrieval, k), template_id)
        output = generate(prompt)
        if judge_correct(output, example.gold_answers, judge_mode):
            return CompressionLabel.keep(k)
    return CompressionLabel.unanswerable()


def _histogram_key(label: CompressionLabel) -> str:
    return "unanswerable" if label.is_unanswerable else str(label.k)


def annotate_dataset(
    dataset: JoinedDataset,
    client: GeneratorClient,
    options: AnnotationOptions = AnnotationOptions(),
    memo: dict[tuple[str, str, str], str] | None = None,
) -> tuple[list[AnnotatedTriplet], AnnotationStats]:
    """Annotate every example in the dataset; returns triplets sorted by example id.

    Generator failures skip the example and are logged. When failures exceed
    ``failure_limit`` of the dataset, the run aborts with partial results
    attached to the exception. Generations are memoized by (fingerprint,
    query, prompt); pass the same ``memo`` dict to re-annotate under a new
    judge mode without re-generating.
    """
    fingerprint = client.fingerprint()
    stats = AnnotationStats(total_examples=len(dataset))
    memo = {} if memo is None else memo
    memo_lock = threading.Lock()

    def memoized_generate(prompt: Prompt) -> str:
        key = (fingerprint, prompt.query_id, prompt.text)
        with memo_lock:
            if key in memo:
                stats.cache_hits += 1
                return memo[key]
        output = client.generate(prompt)
        with memo_lock:
            stats.generator_calls += 1
            memo[key] = output
        return output

    def annotate_one(pair: tuple[QAExample, RetrievalSet]) -> tuple[str, CompressionLabel]:
        example, retrieval = pair
        try:
            label = find_optimal_k(
                example,
                retrieval,
                client,
                judge_mode=options.judge_mode,
                include_k0=options.include_k0,
                template_id=options.template_id,
                generate=memoized_generate,
            )
        except (TransportError, ProtocolError) as exc:
            raise AnnotationError(f"generator failed for example {example.id}: {exc}") from exc
        return example.id, label

    triplets: list[AnnotatedTriplet] = []

    def record(example_id: str, label: CompressionLabel) -> None:
        stats.annotated += 1
        key = _histogram_key(label)
        stats.label_histogram[key] = stats.label_histogram.get(key, 0) + 1
        if label.is_unanswerable:
            stats.unanswerable_count += 1
        triplets.append(
            AnnotatedTriplet(
                example_id=example_id,
                query_id=example_id,
                label=label,
                generator_fingerprint=fingerprint,
            )
        )

    def check_abort() -> None:
        if stats.failed / stats.total_examples > options.failure_limit:
            triplets.sort(key=lambda t: t.example_id)
            raise AnnotationAborted(
                f"aborting: {stats.failed}/{stats.total_examples} examples failed "
                f"(limit {options.failure_limit:.0%})",
                triplets,
                stats,
            )

    if options.workers <= 1:
        for pair in dataset:
            try:
                example_id, label = annotate_one(pair)
            except AnnotationError as exc:
                stats.failed += 1
                logger.warning("%s", exc)
                check_abort()
                continue
            record(example_id, label)
    else:
        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            for outcome in pool.map(_safe(annotate_one), dataset.pairs):
                if isinstance(outcome, AnnotationError):
                    stats.failed += 1
                    logger.warning("%s", outcome)
                    check_abort()
                else:
                    record(*outcome)

    triplets.sort(key=lambda t: t.example_id)
    return triplets, stats


def _safe(fn):
    def wrapped(arg):
        try:
            return fn(arg)
        except AnnotationError as exc:
            return exc

    return wrapped
