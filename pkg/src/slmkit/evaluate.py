"""Batch decoding of task samples and per-task metric reports."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

from .decoding import build_trie, constrained_decode_batch, greedy_decode, joint_decode
from .errors import MalformedOutputError
from .joint import parse_joint
from .metrics import classification_metrics, corpus_wer
from .model import SpeechLM, collate
from .numcore import no_grad
from .tasks import JOINT_INSTRUCTIONS, JOINT_NAMES, TaskSample, joint_prompt_for, label_set


def decode_texts(model: SpeechLM, samples: Sequence[TaskSample], max_len: int = 48, batch_size: int = 32,
                 labels: Optional[Sequence[str]] = None, mode: str = "greedy_masked") -> list:
    """Decode every sample; with ``labels`` the output is restricted to that set."""
    trie = build_trie(labels, model.vocab) if labels is not None else None
    out = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i:i + batch_size], model.vocab, with_targets=False)
        with no_grad():
            fused = model.fused(batch)
        if trie is None:
            out.extend(model.vocab.decode(ids) for ids in greedy_decode(model.lm, fused, max_len))
        else:
            out.extend(constrained_decode_batch(model.lm, fused, trie, mode))
    return out


def _classification_rows(task: str, golds, preds) -> list:
    labels = label_set(task)
    m = classification_metrics(golds, preds, labels)
    invalid = sum(p not in labels for p in preds) / len(preds)
    return [(task, "accuracy", m["accuracy"]), (task, "macro_f1", m["macro_f1"]), (task, "uar", m["uar"]),
            (task, "invalid_rate", invalid)]


def evaluate(model: SpeechLM, samples: Sequence[TaskSample], constrained: bool = False,
             mode: str = "greedy_masked", max_len: int = 48) -> list:
    """Single-task evaluation; returns ``(task, metric, value)`` rows in task order."""
    rows = []
    by_task: dict = {}
    for s in samples:
        if not s.joint:
            by_task.setdefault(s.task_id, []).append(s)
    for task in sorted(by_task):
        items = by_task[task]
        if task == "asr":
            hyps = decode_texts(model, items, max_len)
            rows.append((task, "wer", corpus_wer([s.label for s in items], hyps)))
            continue
        labels = label_set(task) if constrained else None
        preds = decode_texts(model, items, max_len, labels=labels, mode=mode)
        rows.extend(_classification_rows(task, [s.label for s in items], preds))
    return rows


def as_joint(sample: TaskSample, variant: int = 0) -> TaskSample:
    """The same audio posed as a two-answer (transcript first) request."""
    return dataclasses.replace(sample, prompt=joint_prompt_for(sample.task_id, variant), joint=True)


def evaluate_joint(model: SpeechLM, samples: Sequence[TaskSample], constrained: bool = False,
                   max_len: int = 64, batch_size: int = 32) -> list:
    """One generation per sample yields both the transcript and the task answer.

    ``samples`` carry their single-task labels (plus transcripts); outputs that
    fail to parse are counted and scored as wrong. With ``constrained`` the
    record format is forced and the answer is restricted to the label set.
    """
    rows = []
    by_task: dict = {}
    for s in samples:
        if s.task_id in JOINT_INSTRUCTIONS and s.task_id != "asr" and not s.joint:
            by_task.setdefault(s.task_id, []).append(s)
    for task in sorted(by_task):
        items = by_task[task]
        posed = [as_joint(s) for s in items]
        if constrained:
            texts = []
            for i in range(0, len(posed), batch_size):
                batch = collate(posed[i:i + batch_size], model.vocab, with_targets=False)
                with no_grad():
                    fused = model.fused(batch)
                texts.extend(joint_decode(model.lm, fused, model.vocab, JOINT_NAMES[task], label_set(task)))
        else:
            texts = decode_texts(model, posed, max_len, batch_size)
        hyps, preds, failures = [], [], 0
        for text in texts:
            try:
                fields = parse_joint(text)
            except MalformedOutputError:
                fields = {}
                failures += 1
            hyps.append(fields.get("ASR", ""))
            preds.append(fields.get(JOINT_NAMES[task], ""))
        rows.append((task, "joint_asr_wer", corpus_wer([s.transcript for s in items], hyps)))
        for _, metric, value in _classification_rows(task, [s.label for s in items], preds):
            rows.append((task, f"joint_{metric}", value))
        rows.append((task, "joint_parse_failures", float(failures)))
    return rows


def format_report(rows) -> str:
    return "\n".join(f"{task}, {metric}, {value:.6f}" for task, metric, value in rows)
