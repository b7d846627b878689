"""WER and classification metrics."""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

Words = Union[str, Sequence[str]]


def _words(x: Words) -> list:
    if isinstance(x, str):
        x = x.strip()
        return x.split(" ") if x else []
    return list(x)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs (two-row DP)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Words, hypothesis: Words) -> float:
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(references: Sequence[Words], hypotheses: Sequence[Words]) -> float:
    """Total edits over total reference words."""
    if len(references) != len(hypotheses):
        raise ValueError("length mismatch")
    edits = words = 0
    for r, h in zip(references, hypotheses):
        r, h = _words(r), _words(h)
        edits += edit_distance(r, h)
        words += len(r)
    if words == 0:
        raise ValueError("references are empty")
    return edits / words


def classification_metrics(golds: Sequence[str], preds: Sequence[str], label_set: Sequence[str]) -> dict:
    """Accuracy, macro-F1 over ``label_set`` and UAR over classes present in golds.

    F1 of a class that never occurs in golds or preds counts as 0.
    """
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} golds vs {len(preds)} predictions")
    if not golds:
        raise ValueError("no examples")
    golds = list(golds)
    preds = list(preds)
    acc = float(np.mean([g == p for g, p in zip(golds, preds)]))
    f1s, recalls = [], []
    for c in label_set:
        tp = sum(g == c and p == c for g, p in zip(golds, preds))
        fp = sum(g != c and p == c for g, p in zip(golds, preds))
        fn = sum(g == c and p != c for g, p in zip(golds, preds))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
        if tp + fn:
            recalls.append(tp / (tp + fn))
    return {"accuracy": acc, "macro_f1": float(np.mean(f1s)), "uar": float(np.mean(recalls))}
