"""The assembled speech LM: encoder -> layer fusion -> downsampler -> text LM."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .downsampler import DownsampleConfig, Downsampler
from .encoder import AudioEncoder, EncoderConfig, LayerCombiner, LayerStack, combine
from .lm import FusedInput, LmConfig, TextLM
from .numcore import Module, Tensor
from .tasks import TaskSample
from .vocab import TokenVocab


class CurriculumStage(enum.Enum):
    STAGE1_ALIGN = "Stage1_Align"
    STAGE2_WARMUP = "Stage2_Warmup"
    STAGE2_MULTITASK = "Stage2_Multitask"

    @property
    def order(self) -> int:
        return list(CurriculumStage).index(self)

    def __lt__(self, other):
        return self.order < other.order

    def __le__(self, other):
        return self.order <= other.order

    def next(self) -> "CurriculumStage":
        members = list(CurriculumStage)
        if self.order + 1 >= len(members):
            raise ValueError(f"{self.value} is the final stage")
        return members[self.order + 1]


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_model: int = 64
    lm_encoder_layers: int = 2
    lm_decoder_layers: int = 2
    lm_heads: int = 2
    lm_ff_dim: int = 128
    max_positions: int = 128
    combiner_mode: str = "weighted"
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    seed: int = 0

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(vocab_size=vocab_size, d_model=self.d_model, encoder_layers=self.lm_encoder_layers,
                        decoder_layers=self.lm_decoder_layers, heads=self.lm_heads, ff_dim=self.lm_ff_dim,
                        max_positions=self.max_positions, seed=self.seed + 1)


@dataclass
class Batch:
    uids: list
    task_ids: list
    audio: np.ndarray
    audio_len: np.ndarray
    prompts: list
    targets: Optional[list] = None


def collate(samples: Sequence[TaskSample], vocab: TokenVocab, with_targets: bool = True) -> Batch:
    T = max(s.audio.shape[0] for s in samples)
    D = samples[0].audio.shape[1]
    audio = np.zeros((len(samples), T, D))
    for i, s in enumerate(samples):
        audio[i, : s.audio.shape[0]] = s.audio
    return Batch(
        uids=[s.uid for s in samples],
        task_ids=[s.task_id for s in samples],
        audio=audio,
        audio_len=np.array([s.audio.shape[0] for s in samples], dtype=np.int64),
        prompts=[vocab.encode(s.prompt) for s in samples],
        targets=[vocab.encode(s.label, add_eos=True) for s in samples] if with_targets else None,
    )


class SpeechLM(Module):
    def __init__(self, config: ModelConfig, vocab: TokenVocab, dtype=np.float64):
        self.config = config
        self._vocab = vocab
        self._dtype = dtype
        self.encoder = AudioEncoder(config.encoder, dtype=dtype)
        self.combiner = LayerCombiner(config.encoder.num_layers, config.combiner_mode, dtype=dtype)
        ds_cfg = DownsampleConfig(in_dim=config.encoder.feature_dim, out_dim=config.d_model,
                                  input_rate_hz=config.encoder.frame_rate_hz)
        self.downsampler = Downsampler(ds_cfg, seed=config.seed + 2, dtype=dtype)
        self.lm = TextLM(config.lm_config(len(vocab)), dtype=dtype)
        self.encoder.set_trainable(False)
        self.stage = CurriculumStage.STAGE1_ALIGN
        self._stack_cache: dict = {}
        apply_stage(self, self.stage)

    @property
    def vocab(self) -> TokenVocab:
        return self._vocab

    # -- encoder stack cache (valid only while the encoder is frozen) ----------

    def cache_stacks(self, samples: Sequence[TaskSample]) -> None:
        if any(p.trainable for p in self.encoder.parameters().values()):
            raise RuntimeError("encoder is trainable; cached stacks would go stale")
        for s in samples:
            if s.uid not in self._stack_cache:
                st = self.encoder.encode(s.audio)
                self._stack_cache[s.uid] = np.stack([h.data[0] for h in st.layers])

    def clear_cache(self) -> None:
        self._stack_cache.clear()

    def layer_stack(self, batch: Batch) -> LayerStack:
        lengths = self.encoder.output_lengths(batch.audio_len)
        if self._stack_cache and all(u in self._stack_cache for u in batch.uids):
            cached = [self._stack_cache[u] for u in batch.uids]
            L, _, D = cached[0].shape
            arr = np.zeros((L, len(cached), int(lengths.max()), D), dtype=self._dtype)
            for i, c in enumerate(cached):
                arr[:, i, : c.shape[1]] = c
            return LayerStack([Tensor(arr[l]) for l in range(L)], lengths)
        return self.encoder.encode(batch.audio, batch.audio_len)

    # -- forward -----------------------------------------------------------------

    def audio_embeddings(self, batch: Batch):
        stack = self.layer_stack(batch)
        feats = combine(stack, self.combiner)
        down = self.downsampler(feats, stack.lengths)
        return down, self.downsampler.config.output_length(stack.lengths)

    def fused(self, batch: Batch) -> FusedInput:
        down, lengths = self.audio_embeddings(batch)
        return self.lm.fuse_batch(down, lengths, batch.prompts)

    def memory(self, batch: Batch):
        fused = self.fused(batch)
        return self.lm.encode(fused), fused.length

    def nll(self, batch: Batch) -> Tensor:
        if batch.targets is None:
            raise ValueError("batch has no targets")
        return self.lm.forward_nll(self.fused(batch), batch.targets)


def trainable_report(model: SpeechLM, stage: Optional[CurriculumStage] = None) -> dict:
    """Expected trainable flag for every parameter name at ``stage``.

    Encoder and base LM weights are always frozen; downsampler and combiner
    weights always train; LoRA factors exist and train from Stage2_Warmup on.
    """
    stage = model.stage if stage is None else stage
    report = {}
    for name, p in model.named_parameters():
        if name.startswith(("downsampler.", "combiner.")):
            report[name] = True
        elif ".lora." in name:
            if stage < CurriculumStage.STAGE2_WARMUP:
                continue
            report[name] = True
        else:
            report[name] = False
    return report


def apply_stage(model: SpeechLM, stage: CurriculumStage, lora_seed: Optional[int] = None) -> None:
    """Attach or drop LoRA as the stage requires, then set trainable flags."""
    if stage >= CurriculumStage.STAGE2_WARMUP:
        if not model.lm.has_lora:
            seed = model.config.seed + 3 if lora_seed is None else lora_seed
            model.lm.attach_lora(model.config.lora_rank, model.config.lora_alpha, seed)
    elif model.lm.has_lora:
        model.lm.detach_lora()
    model.stage = stage
    flags = trainable_report(model, stage)
    for name, p in model.named_parameters():
        p.trainable = flags[name]
