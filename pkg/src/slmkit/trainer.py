"""Weighted multi-task sampling and the three-stage curriculum.

Stage1_Align trains the downsampler and layer weights on ASR only;
Stage2_Warmup attaches LoRA and keeps ASR only; Stage2_Multitask opens every
task and early-stops on validation loss.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_into
from .encoder import EncoderConfig
from .errors import InvalidStateError
from .model import CurriculumStage, ModelConfig, SpeechLM, apply_stage, collate
from .numcore import OptimizerState, adamw_step, no_grad
from .tasks import TaskSample
from .vocab import TokenVocab, split_pieces

log = logging.getLogger(__name__)

ASR_TASK = "asr"


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3            # full scale: 1e-3 or 5e-3 by encoder
    warmup_steps: int = 300          # full scale: 100 / 50000
    weight_decay: float = 0.01
    batch_size: int = 16             # full-scale effective batch: 768 / 2048
    max_audio_frames: int = 900
    max_label_tokens: int = 600
    patience_epochs: int = 5
    validation_fraction: float = 0.05
    stage1_steps: int = 300
    stage2_warmup_steps: int = 300
    stage2_multitask_steps: int = 4000
    steps_per_epoch: int = 100       # 0: one pass over the stage's training data
    grad_clip: float = 1.0           # global norm; 0 disables
    # per-task sampling weights (tuned on validation; unlisted tasks use the sample weight)
    task_weights: dict = field(default_factory=lambda: {"asr": 1.0, "ic": 2.0, "kws": 1.0, "er": 2.0})
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        positive = ("peak_lr", "warmup_steps", "batch_size", "max_audio_frames", "max_label_tokens",
                    "patience_epochs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if min(self.stage1_steps, self.stage2_warmup_steps, self.stage2_multitask_steps) < 0:
            raise ValueError("stage budgets must be non-negative")
        if any(w < 0 for w in self.task_weights.values()):
            raise ValueError("task weights must be non-negative")


@dataclass
class TaskData:
    samples: list
    weight: float = 1.0


def filter_sample(s: TaskSample, cfg: TrainConfig) -> bool:
    """True to keep; drops audio longer than, or labels longer than, the limits."""
    return s.audio.shape[0] <= cfg.max_audio_frames and len(split_pieces(s.label)) <= cfg.max_label_tokens


def task_probabilities(registry: dict) -> dict:
    mass = {t: d.weight * len(d.samples) for t, d in registry.items()}
    total = sum(mass.values())
    if total <= 0:
        raise InvalidStateError("no task has positive weight and data")
    return {t: m / total for t, m in mass.items()}


def sample_batch(registry: dict, batch_size: int, rng: np.random.Generator) -> list:
    """Draw tasks with probability proportional to weight * size, then a sample uniformly."""
    probs = task_probabilities(registry)
    tasks = list(probs)
    picks = rng.choice(len(tasks), size=batch_size, p=[probs[t] for t in tasks])
    out = []
    for k in picks:
        data = registry[tasks[k]].samples
        out.append(data[int(rng.integers(len(data)))])
    return out


def split_validation(samples: Sequence[TaskSample], fraction: float, rng: np.random.Generator):
    """Hold out ``fraction`` of each task (at least one sample) as validation."""
    by_task: dict = {}
    for s in samples:
        by_task.setdefault(s.task_id, []).append(s)
    train, valid = [], []
    for task in sorted(by_task):
        items = by_task[task]
        order = rng.permutation(len(items))
        n_valid = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
        held = set(order[:n_valid].tolist())
        for i, s in enumerate(items):
            (valid if i in held else train).append(s)
    return train, valid


class EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        """Record an epoch's validation loss; True once patience is exhausted."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class HistoryRecord:
    step: int
    stage: str
    split: str
    loss: float
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        extra = "".join(f", {k}={v:.6f}" for k, v in sorted(self.metrics.items()))
        return f"{self.step}, {self.stage}, {self.split}, {self.loss:.9f}{extra}"


class TrainingDivergedError(InvalidStateError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    enc = EncoderConfig(**d.pop("encoder"))
    return ModelConfig(encoder=enc, **d)


def model_checkpoint(model: SpeechLM, step: int = 0, extra_meta: Optional[dict] = None) -> Checkpoint:
    arrays = {n: p.data for n, p in model.named_parameters()}
    meta = {"model_config": model_config_to_dict(model.config), "vocab": model.vocab.to_lines(),
            "trainable": {n: p.trainable for n, p in model.named_parameters()},
            "dtype": np.dtype(model._dtype).name}
    meta.update(extra_meta or {})
    return Checkpoint(arrays, stage=model.stage.value, step=step, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> SpeechLM:
    cfg = model_config_from_dict(ckpt.meta["model_config"])
    vocab = TokenVocab.from_lines(ckpt.meta["vocab"])
    model = SpeechLM(cfg, vocab, dtype=np.dtype(ckpt.meta.get("dtype", "float64")).type)
    apply_stage(model, CurriculumStage(ckpt.stage))
    load_into(model.parameters(), ckpt.params())
    flags = ckpt.meta.get("trainable")
    if flags:
        for n, p in model.named_parameters():
            p.trainable = bool(flags[n])
    return model


def clip_gradients(params: dict, max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.trainable and p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.trainable and p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Trainer:
    def __init__(self, model: SpeechLM, cfg: TrainConfig, train: Sequence[TaskSample],
                 valid: Optional[Sequence[TaskSample]] = None, history_path: Optional[Path] = None,
                 task_metrics=None):
        self.model = model
        self.cfg = cfg
        kept = [s for s in train if filter_sample(s, cfg)]
        if len(kept) < len(train):
            log.info("length filter dropped %d of %d training samples", len(train) - len(kept), len(train))
        if valid is None:
            kept, valid = split_validation(kept, cfg.validation_fraction, np.random.default_rng([cfg.seed, 1]))
        self.train_samples = kept
        self.valid_samples = list(valid)
        by_task: dict = {}
        for s in kept:
            by_task.setdefault(s.task_id, []).append(s)
        self.registry = {t: TaskData(items, cfg.task_weights.get(t, items[0].weight))
                         for t, items in sorted(by_task.items())}
        if ASR_TASK not in self.registry:
            raise InvalidStateError("the curriculum needs ASR training data")
        self.history_path = Path(history_path) if history_path else None
        self.task_metrics = task_metrics
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.stage_step = 0
        self.opt = self._new_optimizer()
        self.stopper = EarlyStopper(cfg.patience_epochs)
        self.best: Optional[dict] = None
        self.history: list = []
        self.finished = False
        if not any(p.trainable for p in model.encoder.parameters().values()):
            model.cache_stacks(self.train_samples + self.valid_samples)

    @property
    def stage(self) -> CurriculumStage:
        return self.model.stage

    def _new_optimizer(self) -> OptimizerState:
        return OptimizerState(peak_lr=self.cfg.peak_lr, warmup_steps=self.cfg.warmup_steps,
                              weight_decay=self.cfg.weight_decay)

    def stage_budget(self, stage: CurriculumStage) -> int:
        return {CurriculumStage.STAGE1_ALIGN: self.cfg.stage1_steps,
                CurriculumStage.STAGE2_WARMUP: self.cfg.stage2_warmup_steps,
                CurriculumStage.STAGE2_MULTITASK: self.cfg.stage2_multitask_steps}[stage]

    def stage_registry(self, stage: Optional[CurriculumStage] = None) -> dict:
        stage = self.stage if stage is None else stage
        if stage < CurriculumStage.STAGE2_MULTITASK:
            return {ASR_TASK: self.registry[ASR_TASK]}
        return self.registry

    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch > 0:
            return self.cfg.steps_per_epoch
        n = sum(len(d.samples) for d in self.stage_registry().values())
        return max(1, math.ceil(n / self.cfg.batch_size))

    def advance_stage(self, target: Optional[CurriculumStage] = None) -> CurriculumStage:
        current = self.stage
        if current == CurriculumStage.STAGE2_MULTITASK:
            raise InvalidStateError(f"{current.value} is the final stage")
        if target is not None and target <= current:
            raise InvalidStateError(f"cannot move from {current.value} to {target.value}")
        nxt = current.next() if target is None else target
        if nxt != current.next():
            raise InvalidStateError(f"stages advance one at a time; {current.value} -> {nxt.value} skips")
        apply_stage(self.model, nxt)
        self.opt = self._new_optimizer()
        self.stage_step = 0
        log.info("stage transition: %s -> %s", current.value, nxt.value)
        return nxt

    def _record(self, rec: HistoryRecord) -> None:
        self.history.append(rec)
        if self.history_path is not None:
            with open(self.history_path, "a") as f:
                f.write(rec.line() + "\n")

    def train_step(self) -> float:
        batch = collate(sample_batch(self.stage_registry(), self.cfg.batch_size, self.rng), self.model.vocab)
        params = self.model.parameters()
        for p in params.values():
            p.grad = None
        loss = self.model.nll(batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite training loss at step {self.step}", self.state_checkpoint())
        loss.backward()
        for p in params.values():
            if p.trainable and p.grad is None:
                p.grad = np.zeros_like(p.data)
        clip_gradients(params, self.cfg.grad_clip)
        adamw_step(self.opt, params)
        return value

    def validation_loss(self, samples: Optional[Sequence[TaskSample]] = None) -> float:
        if samples is None:
            tasks = set(self.stage_registry())
            samples = [s for s in self.valid_samples if s.task_id in tasks]
        if not samples:
            return math.nan
        total = count = 0.0
        with no_grad():
            for i in range(0, len(samples), self.cfg.batch_size):
                batch = collate(samples[i:i + self.cfg.batch_size], self.model.vocab)
                n = sum(len(t) for t in batch.targets)
                total += float(self.model.nll(batch).data) * n
                count += n
        return total / count

    def _end_epoch(self) -> bool:
        loss = self.validation_loss()
        metrics = self.task_metrics(self.model, self.valid_samples) if self.task_metrics else {}
        self._record(HistoryRecord(self.step, self.stage.value, "valid", loss, metrics))
        if self.stage != CurriculumStage.STAGE2_MULTITASK or not np.isfinite(loss):
            return False
        improved = loss < self.stopper.best
        stop = self.stopper.update(loss)
        if improved:
            self.best = {n: p.data.copy() for n, p in self.model.named_parameters() if p.trainable}
        return stop

    def run(self, max_steps: Optional[int] = None):
        """Train until the curriculum ends (or ``max_steps`` more steps ran).

        Returns (checkpoint of the best-validation model, history records).
        """
        ran = 0
        while not self.finished:
            if max_steps is not None and ran >= max_steps:
                return self.state_checkpoint(), self.history
            if self.stage_step >= self.stage_budget(self.stage):
                if self.stage == CurriculumStage.STAGE2_MULTITASK:
                    self.finished = True
                    break
                self.advance_stage()
                continue
            loss = self.train_step()
            self.step += 1
            self.stage_step += 1
            ran += 1
            if self.step % self.cfg.log_every == 0:
                self._record(HistoryRecord(self.step, self.stage.value, "train", loss))
            if self.stage_step % self.steps_per_epoch() == 0 and self._end_epoch():
                log.info("early stop at step %d (no improvement for %d epochs)", self.step, self.cfg.patience_epochs)
                self.finished = True
        if self.best is not None:
            params = self.model.parameters()
            for n, arr in self.best.items():
                params[n].data = arr.copy()
        return model_checkpoint(self.model, self.step), self.history

    # -- resumable state ---------------------------------------------------------

    def state_checkpoint(self) -> Checkpoint:
        ckpt = model_checkpoint(self.model, self.step)
        for n, m in self.opt.m.items():
            ckpt.arrays[f"__opt_m__.{n}"] = m
            ckpt.arrays[f"__opt_v__.{n}"] = self.opt.v[n]
        for n, arr in (self.best or {}).items():
            ckpt.arrays[f"__best__.{n}"] = arr
        ckpt.rng_state = self.rng.bit_generator.state
        ckpt.config = dataclasses.asdict(self.cfg)
        ckpt.meta.update({
            "stage_step": self.stage_step, "opt_step": self.opt.step, "finished": self.finished,
            "stopper": [self.stopper.best if np.isfinite(self.stopper.best) else None, self.stopper.bad_epochs],
            "history": [dataclasses.asdict(r) for r in self.history],
        })
        return ckpt

    @classmethod
    def resume(cls, ckpt: Checkpoint, train, valid=None, history_path=None, task_metrics=None) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        cfg = TrainConfig(**ckpt.config)
        trainer = cls(model, cfg, train, valid, history_path, task_metrics)
        trainer.step = ckpt.step
        trainer.stage_step = ckpt.meta["stage_step"]
        trainer.finished = ckpt.meta["finished"]
        trainer.opt.step = ckpt.meta["opt_step"]
        for key, arr in ckpt.arrays.items():
            if key.startswith("__opt_m__."):
                trainer.opt.m[key[len("__opt_m__."):]] = arr.copy()
            elif key.startswith("__opt_v__."):
                trainer.opt.v[key[len("__opt_v__."):]] = arr.copy()
        best = {k[len("__best__."):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("__best__.")}
        trainer.best = best or None
        sb, bad = ckpt.meta["stopper"]
        trainer.stopper.best = math.inf if sb is None else sb
        trainer.stopper.bad_epochs = bad
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.history = [HistoryRecord(**r) for r in ckpt.meta["history"]]
        return trainer
