"""Text-generation metrics: BLEU-2, ROUGE-L, Dist-n, exact accuracy.

Metric tokenization is lowercased whitespace splitting, independent of
the model tokenizer.
"""

from __future__ import annotations

import math
from collections import Counter

__all__ = ["words", "bleu2", "rouge_l", "dist_n", "accuracy"]


def words(text) -> list[str]:
    if isinstance(text, str):
        return text.lower().split()
    return [w.lower() for w in text]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu2(pred, ref) -> float:
    """Geometric mean of clipped 1/2-gram precisions with brevity penalty.

    BP = 1 when the prediction is longer than the reference, otherwise
    exp(1 - r/c). Any zero precision (or an empty prediction) gives 0.
    """
    p, r = words(pred), words(ref)
    c, rl = len(p), len(r)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in (1, 2):
        pn_counts = _ngrams(p, n)
        total = sum(pn_counts.values())
        if total == 0:
            return 0.0
        clipped = sum(min(count, _ngrams(r, n)[gram]) for gram, count in pn_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += 0.5 * math.log(clipped / total)
    bp = 1.0 if c > rl else math.exp(1.0 - rl / c)
    return bp * math.exp(log_sum)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ai in a:
        cur = [0] * (len(b) + 1)
        for j, bj in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if ai == bj else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pred, ref, beta: float = math.inf) -> float:
    """LCS F-measure; beta = inf returns recall exactly (the usual setting)."""
    if beta <= 0:
        raise ValueError("rouge_l: beta must be positive")
    p, r = words(pred), words(ref)
    if not p or not r:
        return 0.0
    lcs = _lcs_length(p, r)
    recall = lcs / len(r)
    precision = lcs / len(p)
    if math.isinf(beta):
        return recall
    denom = recall + beta * beta * precision
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * recall * precision / denom


def dist_n(predictions, n: int) -> float:
    """Distinct n-grams across all predictions over total n-grams."""
    if n not in (1, 2):
        raise ValueError("dist_n: n must be 1 or 2")
    seen = set()
    total = 0
    for pred in predictions:
        toks = words(pred)
        for i in range(len(toks) - n + 1):
            seen.add(tuple(toks[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def accuracy(preds: list[str], golds: list[str]) -> float:
    """Exact string match after trimming and lowercasing."""
    if len(preds) != len(golds):
        raise ValueError(f"accuracy: {len(preds)} predictions vs {len(golds)} references")
    if not preds:
        raise ValueError("accuracy: no samples")
    hits = sum(p.strip().lower() == g.strip().lower() for p, g in zip(preds, golds))
    return hits / len(preds)
