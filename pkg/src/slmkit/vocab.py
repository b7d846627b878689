"""Closed word-piece vocabulary over the synthetic corpus alphabet."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PIECE_RE = re.compile(r"===|\.\.\.|[A-Za-z0-9]+|[^\sA-Za-z0-9]")
NO_SPACE_BEFORE = {",", ":", ".", "?", "!"}
GLUE = {"_", "-"}
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")


def split_pieces(text: str) -> list:
    return PIECE_RE.findall(text)


def join_pieces(pieces: Sequence[str]) -> str:
    out = []
    glue_next = False
    for piece in pieces:
        if out and not glue_next and piece not in NO_SPACE_BEFORE and piece not in GLUE:
            out.append(" ")
        out.append(piece)
        glue_next = piece in GLUE
    return "".join(out)


class TokenVocab:
    def __init__(self, pieces: Iterable[str]):
        extra = sorted(set(pieces) - set(SPECIALS))
        self.itos = list(SPECIALS) + extra
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad, self.bos, self.eos, self.sep = range(4)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "TokenVocab":
        pieces = set()
        for t in texts:
            pieces.update(split_pieces(t))
        return cls(pieces)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def encode(self, text: str, add_eos: bool = False) -> list:
        ids = []
        for piece in split_pieces(text):
            if piece not in self.stoi:
                raise ValueError(f"unknown token {piece!r}")
            ids.append(self.stoi[piece])
        if add_eos:
            ids.append(self.eos)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        pieces = []
        for i in ids:
            if i == self.eos:
                break
            if i in (self.pad, self.bos, self.sep):
                continue
            pieces.append(self.itos[i])
        return join_pieces(pieces)

    def to_lines(self) -> list:
        return list(self.itos)

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "TokenVocab":
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError("vocabulary does not start with the special tokens")
        vocab = cls(lines[4:])
        if vocab.itos != list(lines):
            raise ValueError("vocabulary lines are not in canonical order")
        return vocab
