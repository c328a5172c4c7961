"""Corpus-level evaluation metrics.

Frozen metric definitions (results are comparable run-to-run only under
these exact conventions):

* Ingredient sets: true/false positives and false negatives are accumulated
  over the whole dataset, then ``iou = tp / (tp + fp + fn)`` and
  ``f1 = 2 tp / (2 tp + fp + fn)``. Reported on a 0-100 scale by the CLI.
* BLEU: corpus-level, n-grams up to order 4, equal weights, multiplicative
  brevity penalty ``exp(1 - ref_len / cand_len)`` when the candidate side is
  shorter, no smoothing: if any order has zero clipped matches (or the
  candidates contribute zero n-grams of that order) the score is 0. Text is
  tokenized with the international scheme below. Scale 0-100.
* ROUGE-L: token-level longest-common-subsequence F-measure with beta = 1.2,
  ``F = (1 + b^2) P R / (R + b^2 P)``. Scale 0-100.

International tokenization: Unicode punctuation and symbol characters are
split into standalone tokens, except that a punctuation character flanked by
digits on both sides stays attached (so ``3.5`` is one token); the result is
then split on whitespace. No lowercasing.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigError

BLEU_MAX_ORDER = 4
ROUGE_BETA = 1.2


# ---------------------------------------------------------------------------
# Accumulated set counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SetCountAccumulator:
    """Value-semantic TP/FP/FN counts; merging is commutative and associative."""

    tp: int = 0
    fp: int = 0
    fn: int = 0


def update_set_counts(acc: SetCountAccumulator, predicted: Iterable[int],
                      truth: Iterable[int]) -> SetCountAccumulator:
    pred = set(predicted)
    true = set(truth)
    return SetCountAccumulator(
        tp=acc.tp + len(pred & true),
        fp=acc.fp + len(pred - true),
        fn=acc.fn + len(true - pred),
    )


def merge_set_counts(a: SetCountAccumulator, b: SetCountAccumulator) -> SetCountAccumulator:
    return SetCountAccumulator(tp=a.tp + b.tp, fp=a.fp + b.fp, fn=a.fn + b.fn)


def finalize_set_metrics(acc: SetCountAccumulator) -> dict[str, float]:
    denom = acc.tp + acc.fp + acc.fn
    if denom == 0:
        raise ConfigError("set metrics are undefined for an all-zero accumulator")
    return {
        "iou": acc.tp / denom,
        "f1": 2 * acc.tp / (2 * acc.tp + acc.fp + acc.fn),
    }


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

def _is_separable(text: str, pos: int) -> bool:
    ch = text[pos]
    cat = unicodedata.category(ch)
    if cat.startswith("S"):
        return True
    if not cat.startswith("P"):
        return False
    prev_digit = pos > 0 and text[pos - 1].isdigit()
    next_digit = pos + 1 < len(text) and text[pos + 1].isdigit()
    return not (prev_digit and next_digit)


def tokenize_international(text: str) -> list[str]:
    """Split punctuation/symbols into their own tokens, then on whitespace."""
    out: list[str] = []
    for i, ch in enumerate(text):
        if _is_separable(text, i):
            out.append(f" {ch} ")
        else:
            out.append(ch)
    return "".join(out).split()


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Corpus 4-gram BLEU on a 0-100 scale; one reference per candidate."""
    if len(candidates) != len(references):
        raise ConfigError(
            f"candidate/reference length mismatch: {len(candidates)} vs {len(references)}")
    if not candidates:
        raise ConfigError("corpus_bleu requires at least one pair")

    matched = [0] * BLEU_MAX_ORDER
    total = [0] * BLEU_MAX_ORDER
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_tokens = tokenize_international(cand)
        ref_tokens = tokenize_international(ref)
        cand_len += len(cand_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, BLEU_MAX_ORDER + 1):
            cand_counts = _ngram_counts(cand_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            total[n - 1] += sum(cand_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())

    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / BLEU_MAX_ORDER
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    """Classic O(len(a) * len(b)) longest-common-subsequence length."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """Token-level LCS F-measure (beta = 1.2) on a 0-100 scale."""
    ref_tokens = tokenize_international(reference)
    if not ref_tokens:
        raise ConfigError("rouge_l requires a nonempty reference")
    cand_tokens = tokenize_international(candidate)
    if not cand_tokens:
        return 0.0
    lcs = lcs_length(cand_tokens, ref_tokens)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref_tokens)
    precision = lcs / len(cand_tokens)
    beta_sq = ROUGE_BETA ** 2
    return 100.0 * (1 + beta_sq) * recall * precision / (recall + beta_sq * precision)


def mean_rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Average per-pair ROUGE-L over a corpus."""
    if len(candidates) != len(references):
        raise ConfigError(
            f"candidate/reference length mismatch: {len(candidates)} vs {len(references)}")
    if not candidates:
        raise ConfigError("mean_rouge_l requires at least one pair")
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)
