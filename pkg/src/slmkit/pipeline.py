"""End-to-end steps shared by the command line, scripts and tests."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .brq import BrqPretrainer, BrqQuantizer, MaskSpec
from .checkpoint import Checkpoint, load_into
from .config import RunConfig
from .encoder import AudioEncoder
from .errors import CheckpointError, InvalidStateError
from .model import SpeechLM
from .tasks import (AudioConfig, Renderer, ToyTaskSpec, gen_corpus, gen_pretraining_audio, read_audio,
                    read_manifest, write_audio, write_manifest)
from .trainer import Trainer
from .vocab import TokenVocab

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
JOINT_TASKS = ("ic", "er")


class DivergenceError(InvalidStateError):
    """A loss became non-finite."""


def renderer_for(cfg: RunConfig) -> Renderer:
    d = cfg.data
    return Renderer(AudioConfig(raw_dim=d.raw_dim, frames_per_token=d.frames_per_token,
                                style_scale=d.style_scale, voice_seed=d.voice_seed))


def generate_corpora(cfg: RunConfig) -> dict:
    """``{task: {split: [TaskSample]}}`` for every configured task, in config order."""
    d = cfg.data
    rng = np.random.default_rng([cfg.seed, 0])
    renderer = renderer_for(cfg)
    out = {}
    for task in d.task_list():
        spec = ToyTaskSpec(task, n_train=d.n_train, n_valid=d.n_valid, n_test=d.n_test,
                           noise_sigma=d.noise_sigma,
                           joint_fraction=d.joint_fraction if task in JOINT_TASKS else 0.0)
        out[task] = gen_corpus(spec, rng, renderer)
    return out


def pretraining_audio(cfg: RunConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 1])
    return gen_pretraining_audio(cfg.data.pretrain_utterances, rng, renderer_for(cfg),
                                 noise_sigma=cfg.data.noise_sigma)


def manifest_path(data_dir: Path, task: str, split: str) -> Path:
    return Path(data_dir) / f"{task}_{split}.jsonl"


def write_dataset(cfg: RunConfig, data_dir: Path) -> dict:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    corpora = generate_corpora(cfg)
    for task, splits in corpora.items():
        for split, samples in splits.items():
            write_manifest(manifest_path(data_dir, task, split), samples, data_dir / "audio")
    pre_dir = data_dir / "pretrain"
    pre_dir.mkdir(exist_ok=True)
    names = []
    for i, a in enumerate(pretraining_audio(cfg)):
        write_audio(pre_dir / f"utt-{i:05d}.f64", a)
        names.append(f"pretrain/utt-{i:05d}.f64")
    (data_dir / "pretrain.txt").write_text("\n".join(names) + "\n")
    return corpora


def load_split(data_dir: Path, tasks: Sequence[str], split: str) -> list:
    out = []
    for task in tasks:
        path = manifest_path(data_dir, task, split)
        if not path.exists():
            raise FileNotFoundError(f"missing manifest {path}")
        out.extend(read_manifest(path))
    return out


def load_pretraining_audio(data_dir: Path) -> list:
    listing = Path(data_dir) / "pretrain.txt"
    if not listing.exists():
        raise FileNotFoundError(f"missing {listing}; run gen-data first")
    return [read_audio(Path(data_dir) / name) for name in listing.read_text().split()]


# -- encoder pretraining ----------------------------------------------------------

def make_pretrainer(cfg: RunConfig) -> BrqPretrainer:
    b = cfg.brq
    encoder = AudioEncoder(cfg.encoder_config())
    quantizer = BrqQuantizer(cfg.data.raw_dim, stack=b.stack, num_codebooks=b.num_codebooks,
                             codebook_size=b.codebook_size, code_dim=b.code_dim, seed=cfg.seed + 3)
    return BrqPretrainer(encoder, quantizer, MaskSpec(b.mask_span, b.mask_ratio), peak_lr=b.peak_lr,
                         warmup_steps=b.warmup_steps, weight_decay=b.weight_decay, seed=cfg.seed)


def pretrain_encoder(cfg: RunConfig, audios: Sequence[np.ndarray], steps: Optional[int] = None,
                     on_step=None) -> tuple:
    """Run masked-prediction pretraining; returns (pretrainer, per-step losses)."""
    steps = cfg.brq.steps if steps is None else steps
    pt = make_pretrainer(cfg)
    batch = min(cfg.brq.batch_size, len(audios))
    losses = []
    for step in range(1, steps + 1):
        idx = pt.rng.choice(len(audios), size=batch, replace=False)
        loss = pt.step([audios[i] for i in idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return pt, losses


def encoder_checkpoint(cfg: RunConfig, encoder: AudioEncoder, step: int) -> Checkpoint:
    arrays = {f"encoder.{n}": p.data for n, p in encoder.named_parameters()}
    return Checkpoint(arrays, stage="pretrain", step=step, config={"run": cfg.to_text()},
                      meta={"encoder_config": cfg.encoder_config().__dict__})


def load_encoder_weights(model: SpeechLM, ckpt: Checkpoint) -> None:
    arrays = {k[len("encoder."):]: v for k, v in ckpt.params("encoder.").items()}
    if not arrays:
        raise CheckpointError("checkpoint holds no encoder weights")
    load_into(dict(model.encoder.named_parameters()), arrays)
    model.clear_cache()


# -- finetuning ----------------------------------------------------------------------

def build_model(cfg: RunConfig, vocab: TokenVocab, last_layer: bool = False) -> SpeechLM:
    mcfg = cfg.model_config()
    if last_layer:
        mcfg.combiner_mode = "last_layer"
    return SpeechLM(mcfg, vocab)


def make_trainer(cfg: RunConfig, model: SpeechLM, train, valid, history_path=None) -> Trainer:
    return Trainer(model, cfg.train_config(), train, valid, history_path=history_path)
