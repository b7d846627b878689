"""Flat ``section.key = value`` run configuration.

Every key has a default; unknown keys are rejected. ``RunConfig.to_text``
writes the effective configuration in the same format, so echoing it back in
reproduces a run exactly.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .model import ModelConfig
from .tasks import TASK_IDS
from .trainer import TrainConfig


@dataclass
class DataConfig:
    tasks: str = "asr,ic,kws,er"
    n_train: int = 256
    n_valid: int = 16
    n_test: int = 128
    noise_sigma: float = 0.1
    joint_fraction: float = 0.5      # share of ic/er samples posed as transcript-plus-answer requests
    raw_dim: int = 32
    frames_per_token: int = 16
    style_scale: float = 1.0
    voice_seed: int = 0
    pretrain_utterances: int = 256

    def task_list(self) -> list:
        tasks = [t.strip() for t in self.tasks.split(",") if t.strip()]
        unknown = [t for t in tasks if t not in TASK_IDS]
        if unknown:
            raise ValueError(f"unknown task ids {unknown}; known: {list(TASK_IDS)}")
        if not tasks:
            raise ValueError("data.tasks is empty")
        return tasks


@dataclass
class BrqConfig:
    steps: int = 500                 # full scale: 500k
    batch_size: int = 8              # full scale: 2048
    peak_lr: float = 5e-3
    warmup_steps: int = 50           # full scale: 50k
    weight_decay: float = 0.01
    mask_span: int = 10
    mask_ratio: float = 0.4
    stack: int = 4
    num_codebooks: int = 2           # full scale: 16
    codebook_size: int = 64          # full scale: 8192
    code_dim: int = 16


@dataclass
class DecodeConfig:
    max_len: int = 48
    mode: str = "greedy_masked"
    batch_size: int = 32


# ModelConfig fields that are owned by other sections
_MODEL_SKIP = {"encoder", "seed"}
_ENCODER_SKIP = {"raw_dim", "seed"}
_TRAIN_SKIP = {"seed"}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    brq: BrqConfig = field(default_factory=BrqConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder, raw_dim=self.data.raw_dim, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder_config(), **self.model, seed=self.seed)

    def train_config(self) -> TrainConfig:
        opts = {k: default for k, (_, default) in _dict_sections()["train"].items()}
        opts.update(self.train)
        opts["task_weights"] = parse_weights(opts["task_weights"])
        return TrainConfig(**opts, seed=self.seed)

    def to_text(self) -> str:
        return "\n".join(f"{k} = {format_value(v)}" for k, v in flatten(self).items()) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text())


def format_weights(weights: dict) -> str:
    return ",".join(f"{t}:{w!r}" for t, w in weights.items())


def parse_weights(text: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        task, _, w = item.partition(":")
        if task not in TASK_IDS or not w:
            raise ValueError(f"bad task weight entry {item!r}; expected task:weight")
        out[task] = float(w)
    return out


def _section_fields(cls, skip=()) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = (hints[f.name], default)
    return out


def _dict_sections() -> dict:
    train = _section_fields(TrainConfig, _TRAIN_SKIP)
    train["task_weights"] = (str, format_weights(train["task_weights"][1]))
    return {"encoder": _section_fields(EncoderConfig, _ENCODER_SKIP),
            "model": _section_fields(ModelConfig, _MODEL_SKIP),
            "train": train}


def schema() -> dict:
    """Every accepted key mapped to (type, default)."""
    keys = {"seed": (int, 0), "out_dir": (str, "runs/default")}
    for name, cls in (("data", DataConfig), ("brq", BrqConfig), ("decode", DecodeConfig)):
        for k, spec in _section_fields(cls).items():
            keys[f"{name}.{k}"] = spec
    for name, fields_ in _dict_sections().items():
        for k, spec in fields_.items():
            keys[f"{name}.{k}"] = spec
    return keys


def flatten(cfg: RunConfig) -> dict:
    out = {}
    for key, (_, default) in schema().items():
        section, _, name = key.rpartition(".")
        if not section:
            out[key] = getattr(cfg, key)
            continue
        holder = getattr(cfg, section)
        out[key] = holder.get(name, default) if isinstance(holder, dict) else getattr(holder, name)
    return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(text: str, typ):
    text = text.strip()
    if typing.get_origin(typ) is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() == "none":
            return None
        typ = args[0]
    if typ is bool:
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    values = flatten(base or RunConfig())
    keys = schema()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value")
        if key not in keys:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = coerce(value, keys[key][0])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return build(values)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    return parse_config("\n".join(overrides), cfg)


def build(values: dict) -> RunConfig:
    sections: dict = {}
    for key, v in values.items():
        section, _, name = key.rpartition(".")
        sections.setdefault(section, {})[name] = v
    top = sections.pop("")
    cfg = RunConfig(seed=top["seed"], out_dir=top["out_dir"],
                    data=DataConfig(**sections["data"]), brq=BrqConfig(**sections["brq"]),
                    decode=DecodeConfig(**sections["decode"]), encoder=sections["encoder"],
                    model=sections["model"], train=sections["train"])
    # surface invalid combinations now rather than mid-run
    cfg.data.task_list()
    cfg.model_config()
    cfg.train_config()
    if cfg.decode.mode not in ("greedy_masked", "exhaustive"):
        raise ValueError(f"decode.mode must be greedy_masked or exhaustive, got {cfg.decode.mode!r}")
    return cfg


def load_config(path: Optional[Path], overrides=()) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return apply_overrides(parse_config(text), overrides)
