"""Encoder-decoder text LM stand-in with audio-prefix fusion and LoRA hooks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import DecoderBlock, EncoderBlock, LayerNorm, Linear, causal_mask, key_padding_mask
from .lora import LoraAdapter
from .numcore import Module, Parameter, Tensor, concat, embedding, gather_rows, softmax_cross_entropy
from .vocab import SPECIALS

BOS_ID = SPECIALS.index("<bos>")
EOS_ID = SPECIALS.index("<eos>")


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 2
    ff_dim: int = 128
    max_positions: int = 128
    seed: int = 1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if min(self.vocab_size, self.d_model, self.encoder_layers, self.decoder_layers, self.max_positions) < 1:
            raise ValueError("LM sizes must be positive")


@dataclass
class FusedInput:
    """Audio frames followed by prompt embeddings, left-aligned and padded.

    ``sequence`` is [B, S, d_model]; row b holds ``boundary[b]`` audio frames,
    then prompt embeddings up to ``length[b]``.
    """

    sequence: Tensor
    boundary: np.ndarray
    length: np.ndarray


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = 0) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class TextLM(Module):
    """Frozen random encoder-decoder; only attached LoRA factors train."""

    def __init__(self, config: LmConfig, dtype=np.float64):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.tok_emb = Parameter(rng.normal(size=(config.vocab_size, d)).astype(dtype))
        self.enc_pos = Parameter(rng.normal(size=(config.max_positions, d)).astype(dtype))
        self.dec_pos = Parameter(rng.normal(size=(config.max_positions, d)).astype(dtype))
        self.enc_blocks = [EncoderBlock(rng, d, config.heads, config.ff_dim, dtype) for _ in range(config.encoder_layers)]
        self.enc_ln = LayerNorm(d, dtype=dtype)
        self.dec_blocks = [DecoderBlock(rng, d, config.heads, config.ff_dim, dtype) for _ in range(config.decoder_layers)]
        self.dec_ln = LayerNorm(d, dtype=dtype)
        self.lm_head = Linear(rng, d, config.vocab_size, bias=False, dtype=dtype)
        self._dtype = dtype
        self.set_trainable(False)

    # -- LoRA --------------------------------------------------------------------

    def attention_projections(self) -> list:
        """(name, Linear) for the query and value projection of every attention block."""
        out = []
        for i, blk in enumerate(self.enc_blocks):
            out += [(f"enc_blocks.{i}.attn.q", blk.attn.q), (f"enc_blocks.{i}.attn.v", blk.attn.v)]
        for i, blk in enumerate(self.dec_blocks):
            for part in ("self_attn", "cross_attn"):
                attn = getattr(blk, part)
                out += [(f"dec_blocks.{i}.{part}.q", attn.q), (f"dec_blocks.{i}.{part}.v", attn.v)]
        return out

    def attach_lora(self, rank: int, alpha=None, seed: int = 0) -> list:
        rng = np.random.default_rng(seed)
        adapters = []
        for name, lin in self.attention_projections():
            d_out, d_in = lin.weight.shape
            lin.lora = LoraAdapter(f"{name}.weight", d_in, d_out, rank, alpha, rng, self._dtype)
            adapters.append(lin.lora)
        return adapters

    def detach_lora(self) -> None:
        for _, lin in self.attention_projections():
            lin.lora = None

    @property
    def has_lora(self) -> bool:
        return any(lin.lora is not None for _, lin in self.attention_projections())

    # -- forward -----------------------------------------------------------------

    def embed(self, tokens) -> Tensor:
        return embedding(self.tok_emb, np.asarray(tokens, dtype=np.int64))

    def fuse(self, audio_feats, prompt_tokens: Sequence[int]) -> FusedInput:
        """Single-utterance fusion: [audio frames ; prompt embeddings]."""
        feats = audio_feats if isinstance(audio_feats, Tensor) else Tensor(audio_feats)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_model:
            raise ValueError(f"audio features must be [T, {self.config.d_model}], got {feats.shape}")
        return self.fuse_batch(feats.reshape(1, *feats.shape), [feats.shape[0]], [list(prompt_tokens)])

    def fuse_batch(self, audio_feats: Tensor, audio_lengths, prompts: Sequence[Sequence[int]]) -> FusedInput:
        if audio_feats.shape[-1] != self.config.d_model:
            raise ValueError(f"audio channel dim {audio_feats.shape[-1]} != d_model {self.config.d_model}")
        t_max = audio_feats.shape[1]
        audio_lengths = np.asarray(audio_lengths, dtype=np.int64)
        prompt_lengths = np.array([len(p) for p in prompts], dtype=np.int64)
        total = audio_lengths + prompt_lengths
        S = int(total.max())
        if S > self.config.max_positions:
            raise ValueError(f"fused length {S} exceeds max_positions {self.config.max_positions}")
        source = concat([audio_feats, self.embed(pad_ids(prompts, 0))], axis=1)
        s = np.arange(S)[None, :]
        a = audio_lengths[:, None]
        index = np.where(s < a, s, t_max + s - a)
        index = np.where(s < total[:, None], index, 0)
        return FusedInput(gather_rows(source, index), audio_lengths, total)

    def encode(self, fused: FusedInput) -> Tensor:
        S = fused.sequence.shape[1]
        h = fused.sequence + self.enc_pos[:S]
        mask = key_padding_mask(fused.length, S, self._dtype)
        for blk in self.enc_blocks:
            h = blk(h, mask)
        return self.enc_ln(h)

    def decoder_logits(self, memory: Tensor, memory_lengths, dec_in: np.ndarray) -> Tensor:
        dec_in = np.asarray(dec_in, dtype=np.int64)
        T = dec_in.shape[1]
        if T > self.config.max_positions:
            raise ValueError(f"decoder length {T} exceeds max_positions {self.config.max_positions}")
        h = self.embed(dec_in) + self.dec_pos[:T]
        self_mask = causal_mask(T, self._dtype)
        mem_mask = key_padding_mask(memory_lengths, memory.shape[1], self._dtype)
        for blk in self.dec_blocks:
            h = blk(h, memory, self_mask, mem_mask)
        return self.lm_head(self.dec_ln(h))

    def teacher_forcing(self, targets: Sequence[Sequence[int]], end_id: int = EOS_ID):
        """(decoder inputs bos+y[:-1], padded targets, mask)."""
        for y in targets:
            if not y or y[-1] != end_id:
                raise ValueError("targets must be non-empty and end with the end token")
            if len(y) > self.config.max_positions:
                raise ValueError(f"target length {len(y)} exceeds max_positions {self.config.max_positions}")
        tgt = pad_ids(targets, 0)
        dec_in = np.zeros_like(tgt)
        dec_in[:, 0] = BOS_ID
        dec_in[:, 1:] = tgt[:, :-1]
        mask = np.arange(tgt.shape[1])[None, :] < np.array([len(y) for y in targets])[:, None]
        return dec_in, tgt, mask

    def forward_nll(self, fused: FusedInput, targets: Sequence[Sequence[int]]) -> Tensor:
        """Mean per-token NLL of ``targets`` (each ending in eos)."""
        dec_in, tgt, mask = self.teacher_forcing(targets)
        logits = self.decoder_logits(self.encode(fused), fused.length, dec_in)
        return softmax_cross_entropy(logits, tgt, mask)

