"""Compound-goal prompts and the pipe-delimited joint output grammar.

Wire format: ``NAME1: value1 | NAME2: value2 |`` with single spaces around
every separator and a trailing pipe. Values may contain commas and colons;
the literal `` | `` is reserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import MalformedOutputError

PREAMBLE = "Perform the following audio-based tasks in the order as described."
FIELD_SEP = ": "
RECORD_SEP = " | "


@dataclass
class JointPrompt:
    tasks: Sequence[str]
    instructions: Sequence[str]

    def directive(self) -> str:
        fields = RECORD_SEP.join(f"{name}{FIELD_SEP}..." for name in self.tasks)
        return f'Make sure to format the output as "{fields} |"'


def render_joint_prompt(jp: JointPrompt) -> str:
    if len(jp.tasks) < 2:
        raise ValueError("joint prompts need at least two tasks")
    if len(jp.tasks) != len(jp.instructions):
        raise ValueError("one instruction per task is required")
    if jp.tasks[0] != "ASR":
        raise ValueError("the transcript task must come first")
    lines = [PREAMBLE]
    for name, instruction in zip(jp.tasks, jp.instructions):
        lines.append(f"=== Task: {name} ===")
        lines.append(instruction)
    lines.append(jp.directive())
    return "\n".join(lines)


def parse_joint(text: str) -> dict:
    """Parse a joint record into an ordered ``{name: value}`` dict."""
    if not text.endswith(" |"):
        raise MalformedOutputError("missing trailing pipe", text[-20:])
    body = text[:-2]
    out = {}
    for segment in body.split(RECORD_SEP):
        cut = segment.find(FIELD_SEP)
        if cut < 0:
            raise MalformedOutputError(f"segment {segment!r} has no task name", segment)
        name = segment[:cut]
        if not name.strip():
            raise MalformedOutputError(f"empty task name in segment {segment!r}", segment)
        if name in out:
            raise MalformedOutputError(f"duplicate task {name!r}", segment)
        out[name] = segment[cut + len(FIELD_SEP):]
    return out


def serialize_joint(fields: Mapping[str, str]) -> str:
    if not fields:
        raise ValueError("nothing to serialize")
    for name, value in fields.items():
        if not name.strip() or FIELD_SEP in name or RECORD_SEP in name or "|" in name:
            raise ValueError(f"invalid task name {name!r}")
        if RECORD_SEP in value:
            raise ValueError(f"value for {name!r} contains the reserved separator")
    text = RECORD_SEP.join(f"{n}{FIELD_SEP}{v}" for n, v in fields.items()) + " |"
    try:
        if parse_joint(text) != dict(fields):
            raise ValueError
    except (ValueError, MalformedOutputError):
        raise ValueError(f"fields {dict(fields)!r} do not survive a round trip") from None
    return text
