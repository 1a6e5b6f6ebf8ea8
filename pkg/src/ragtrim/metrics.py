"""Answer-quality metrics: exact match, token F1, ROUGE-1/2/L, and report aggregation.

All metrics operate on a shared lexical tokenizer (lowercase, split on
non-alphanumeric runs). Exact match additionally applies answer
normalization (punctuation and English articles stripped), the usual
convention for open-domain QA scoring.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_RE = re.compile(r"[^\w\s]|_")
_TOKEN_RE = re.compile(r"[^\W_]+")


def normalize_answer(s: str) -> str:
    """Lowercase, replace punctuation with spaces, drop articles, collapse whitespace."""
    s = s.lower()
    s = _PUNCT_RE.sub(" ", s)
    s = _ARTICLE_RE.sub(" ", s)
    return " ".join(s.split())


def tokenize(s: str) -> list[str]:
    """Lowercase tokens split on non-alphanumeric boundaries. Articles are kept."""
    return _TOKEN_RE.findall(s.lower())


def exact_match(pred: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold answer."""
    if not golds:
        raise ValueError("exact_match requires at least one gold answer")
    norm_pred = normalize_answer(pred)
    return int(any(norm_pred == normalize_answer(g) for g in golds))


def _f1_from_counts(overlap: int, n_pred: int, n_gold: int) -> float:
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0
    if overlap == 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_gold
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    """Max over golds of the harmonic mean of token precision/recall.

    Tokens are compared as multisets. Two empty strings score 1.0; exactly
    one empty scores 0.0.
    """
    if not golds:
        raise ValueError("token_f1 requires at least one gold answer")
    pred_tokens = Counter(tokenize(pred))
    best = 0.0
    for gold in golds:
        gold_tokens = Counter(tokenize(gold))
        overlap = sum((pred_tokens & gold_tokens).values())
        score = _f1_from_counts(overlap, sum(pred_tokens.values()), sum(gold_tokens.values()))
        best = max(best, score)
    return best


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f: float


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(pred: str, ref: str, n: int) -> RougeScore:
    """N-gram multiset overlap between prediction and reference."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pred_grams = _ngrams(tokenize(pred), n)
    ref_grams = _ngrams(tokenize(ref), n)
    n_pred = sum(pred_grams.values())
    n_ref = sum(ref_grams.values())
    if n_pred == 0 or n_ref == 0:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum((pred_grams & ref_grams).values())
    precision = overlap / n_pred
    recall = overlap / n_ref
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return RougeScore(precision, recall, f)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Single-row DP; O(len(a) * len(b)) time, O(len(b)) space.
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(pred: str, ref: str) -> RougeScore:
    """Longest-common-subsequence overlap between prediction and reference."""
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(pred_tokens, ref_tokens)
    precision = lcs / len(pred_tokens)
    recall = lcs / len(ref_tokens)
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return RougeScore(precision, recall, f)


def rouge_n_best(pred: str, golds: Sequence[str], n: int) -> RougeScore:
    """rouge_n against each gold, keeping the highest-F variant."""
    if not golds:
        raise ValueError("rouge_n_best requires at least one gold answer")
    return max((rouge_n(pred, g, n) for g in golds), key=lambda r: r.f)


def rouge_l_best(pred: str, golds: Sequence[str]) -> RougeScore:
    """rouge_l against each gold, keeping the highest-F variant."""
    if not golds:
        raise ValueError("rouge_l_best requires at least one gold answer")
    return max((rouge_l(pred, g) for g in golds), key=lambda r: r.f)


SPECIFIC = "specific"
OPEN_ENDED = "open_ended"


def specificity_split(relevance_scores: Sequence[float]) -> str:
    """Classify a query as specific or open-ended from its document relevance scores.

    Specific iff the spread (max - min) strictly exceeds 0.3.
    """
    if len(relevance_scores) < 1:
        raise ValueError("specificity_split requires at least one relevance score")
    spread = max(relevance_scores) - min(relevance_scores)
    return SPECIFIC if spread > 0.3 else OPEN_ENDED


def answer_relevance_scores(doc_texts: Sequence[str], golds: Sequence[str]) -> list[float]:
    """Per-document relevance to the gold answer, scored as token F1."""
    return [token_f1(text, golds) for text in doc_texts]


@dataclass(frozen=True)
class ExampleResult:
    """Judged outcome for one example under one method."""

    example_id: str
    em: int
    f1: float
    rouge_1: float
    rouge_2: float
    rouge_l: float
    token_count: int
    k: int
    split: str | None = None


@dataclass
class EvalReport:
    """Mean metrics over a result set, with optional per-split breakdowns."""

    n: int
    em: float
    f1: float
    rouge_1: float
    rouge_2: float
    rouge_l: float
    mean_tokens: float
    avg_docs: float
    splits: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "em": self.em,
            "f1": self.f1,
            "rouge_1": self.rouge_1,
            "rouge_2": self.rouge_2,
            "rouge_l": self.rouge_l,
            "mean_tokens": self.mean_tokens,
            "avg_docs": self.avg_docs,
        }
        if self.splits:
            out["splits"] = {name: rep.to_dict() for name, rep in self.splits.items()}
        return out


def score_output(
    example_id: str,
    output: str,
    golds: Sequence[str],
    token_count: int,
    k: int,
    split: str | None = None,
) -> ExampleResult:
    """Score one generated answer against its gold answers."""
    return ExampleResult(
        example_id=example_id,
        em=exact_match(output, golds),
        f1=token_f1(output, golds),
        rouge_1=rouge_n_best(output, golds, 1).f,
        rouge_2=rouge_n_best(output, golds, 2).f,
        rouge_l=rouge_l_best(output, golds).f,
        token_count=token_count,
        k=k,
        split=split,
    )


def aggregate(results: Iterable[ExampleResult]) -> EvalReport:
    """Mean every metric over the result set; breaks down by split when tagged."""
    rows = list(results)
    if not rows:
        raise ValueError("aggregate requires a non-empty result set")

    def _report(subset: list[ExampleResult]) -> EvalReport:
        n = len(subset)
        return EvalReport(
            n=n,
            em=sum(r.em for r in subset) / n,
            f1=sum(r.f1 for r in subset) / n,
            rouge_1=sum(r.rouge_1 for r in subset) / n,
            rouge_2=sum(r.rouge_2 for r in subset) / n,
            rouge_l=sum(r.rouge_l for r in subset) / n,
            mean_tokens=sum(r.token_count for r in subset) / n,
            avg_docs=sum(r.k for r in subset) / n,
        )

    report = _report(rows)
    split_names = sorted({r.split for r in rows if r.split is not None})
    for name in split_names:
        report.splits[name] = _report([r for r in rows if r.split == name])
    return report
