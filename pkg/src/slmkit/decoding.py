"""Greedy, trie-constrained and joint (multi-answer) decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .joint import JointPrompt, parse_joint, render_joint_prompt, serialize_joint
from .lm import BOS_ID, EOS_ID, FusedInput, TextLM
from .numcore import Tensor, log_softmax, no_grad
from .vocab import TokenVocab

MODES = ("greedy_masked", "exhaustive")

__all__ = ["MODES", "LabelTrie", "TrieNode", "build_trie", "constrained_decode", "constrained_decode_batch",
           "greedy_decode", "joint_decode", "label_scores", "JointPrompt", "parse_joint",
           "render_joint_prompt", "serialize_joint"]


def _memory(lm: TextLM, fused: FusedInput):
    with no_grad():
        return lm.encode(fused)


def _step_logits(lm: TextLM, memory: Tensor, mem_len, prefix: np.ndarray) -> np.ndarray:
    with no_grad():
        return lm.decoder_logits(memory, mem_len, prefix).data[:, -1]


def greedy_decode(lm: TextLM, fused: FusedInput, max_len: int) -> list:
    """Argmax decoding for every row of ``fused``; eos is not included in the output."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    memory = _memory(lm, fused)
    B = memory.shape[0]
    prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        # np.argmax returns the first maximum, i.e. the lowest id on ties
        nxt = np.argmax(_step_logits(lm, memory, fused.length, prefix), axis=-1)
        for i in range(B):
            if not done[i]:
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


@dataclass
class TrieNode:
    children: dict = field(default_factory=dict)
    label: Optional[int] = None   # set on the node reached through eos


class LabelTrie:
    """Prefix tree over label tokenizations; ``end_id`` (eos by default) closes every path."""

    def __init__(self, labels: Sequence[str], sequences: Sequence[Sequence[int]], end_id: int = EOS_ID):
        self.labels = list(labels)
        self.sequences = [list(s) for s in sequences]
        self.end_id = end_id
        self.root = TrieNode()
        for k, seq in enumerate(self.sequences):
            node = self.root
            for tok in seq + [end_id]:
                node = node.children.setdefault(tok, TrieNode())
            node.label = k

    def num_nodes(self) -> int:
        stack, n = [self.root], 0
        while stack:
            node = stack.pop()
            n += 1
            stack.extend(node.children.values())
        return n

    def terminals(self) -> list:
        found, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.label is not None:
                found.append(node.label)
            stack.extend(node.children.values())
        return found


def build_trie(labels: Sequence[str], vocab: TokenVocab, end_id: int = EOS_ID) -> LabelTrie:
    labels = list(labels)
    if not labels:
        raise ValueError("label set is empty")
    if len(set(labels)) != len(labels):
        raise ValueError("label set contains duplicates")
    seqs = [vocab.encode(lab) for lab in labels]
    if any(not s for s in seqs):
        raise ValueError("labels must tokenize to at least one piece")
    if len({tuple(s) for s in seqs}) != len(seqs):
        raise ValueError("two labels share a tokenization")
    if any(end_id in s for s in seqs):
        raise ValueError("a label contains the terminating token")
    return LabelTrie(labels, seqs, end_id)


def label_scores(lm: TextLM, fused: FusedInput, trie: LabelTrie, row: int = 0) -> np.ndarray:
    """Mean per-token log-probability (eos included) of every label for one input row."""
    memory = _memory(lm, fused)
    n = len(trie.labels)
    mem = Tensor(np.repeat(memory.data[row:row + 1], n, axis=0))
    mem_len = np.repeat(np.asarray(fused.length)[row:row + 1], n)
    targets = [s + [trie.end_id] for s in trie.sequences]
    dec_in, tgt, mask = lm.teacher_forcing(targets)
    with no_grad():
        logp = log_softmax(lm.decoder_logits(mem, mem_len, dec_in).data)
    tok = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    return (tok * mask).sum(axis=1) / mask.sum(axis=1)


def _greedy_masked(lm: TextLM, fused: FusedInput, trie: LabelTrie) -> list:
    memory = _memory(lm, fused)
    B = memory.shape[0]
    nodes = [trie.root] * B
    prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
    result: list = [None] * B
    while any(r is None for r in result):
        logits = _step_logits(lm, memory, fused.length, prefix)
        nxt = np.full(B, EOS_ID, dtype=np.int64)
        for i in range(B):
            if result[i] is not None:
                continue
            allowed = sorted(nodes[i].children)
            tok = allowed[int(np.argmax(logits[i, allowed]))]
            nodes[i] = nodes[i].children[tok]
            nxt[i] = tok
            if nodes[i].label is not None:
                result[i] = trie.labels[nodes[i].label]
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return result


def _exhaustive(lm: TextLM, fused: FusedInput, trie: LabelTrie) -> list:
    out = []
    for row in range(fused.sequence.shape[0]):
        scores = label_scores(lm, fused, trie, row)
        best = scores.max()
        out.append(min(lab for lab, s in zip(trie.labels, scores) if s == best))
    return out


def constrained_decode_batch(lm: TextLM, fused: FusedInput, trie: LabelTrie, mode: str = "greedy_masked") -> list:
    if mode == "greedy_masked":
        return _greedy_masked(lm, fused, trie)
    if mode == "exhaustive":
        return _exhaustive(lm, fused, trie)
    raise ValueError(f"unknown constrained decoding mode {mode!r}; expected one of {MODES}")


def constrained_decode(lm: TextLM, fused: FusedInput, trie: LabelTrie, mode: str = "greedy_masked") -> str:
    """Decode the first row of ``fused``; the result is always one of ``trie.labels``."""
    if fused.sequence.shape[0] != 1:
        raise ValueError("constrained_decode takes a single input; use constrained_decode_batch")
    return constrained_decode_batch(lm, fused, trie, mode)[0]


def joint_decode(lm: TextLM, fused: FusedInput, vocab: TokenVocab, task_name: str,
                 labels: Sequence[str], max_len: int = 48) -> list:
    """Format-constrained two-answer decoding, one string per row.

    The output always reads ``ASR: <free text> | <task_name>: <label> |``:
    field names and separators are forced, the transcript is decoded greedily
    (eos masked) until the model emits the separator, and the answer goes
    through the label trie.
    """
    pipe = vocab.encode("|")
    if len(pipe) != 1:
        raise ValueError("the record separator must be a single token")
    pipe_id = pipe[0]
    trie = build_trie(labels, vocab, end_id=pipe_id)
    memory = _memory(lm, fused)
    B = memory.shape[0]
    queue = [list(vocab.encode("ASR:")) for _ in range(B)]
    phase = ["asr"] * B
    asr_len = [0] * B
    nodes = [trie.root] * B
    emitted = [[] for _ in range(B)]
    prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
    while any(p != "done" for p in phase):
        logits = _step_logits(lm, memory, fused.length, prefix)
        nxt = np.zeros(B, dtype=np.int64)
        for i in range(B):
            if phase[i] == "done":
                continue
            if queue[i]:
                tok = queue[i].pop(0)
            elif phase[i] == "asr":
                row = logits[i].copy()
                row[EOS_ID] = -np.inf
                tok = int(np.argmax(row)) if asr_len[i] < max_len else pipe_id
                asr_len[i] += 1
                if tok == pipe_id:
                    queue[i] = list(vocab.encode(f"{task_name}:"))
                    phase[i] = "label"
            else:
                allowed = sorted(nodes[i].children)
                tok = allowed[int(np.argmax(logits[i, allowed]))]
                nodes[i] = nodes[i].children[tok]
                if nodes[i].label is not None:
                    phase[i] = "done"
            nxt[i] = tok
            emitted[i].append(tok)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return [vocab.decode(ids) for ids in emitted]
