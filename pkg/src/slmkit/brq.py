"""Random-projection quantizer targets and masked-prediction pretraining."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import AudioEncoder, LayerStack
from .layers import Linear
from .numcore import Module, OptimizerState, Parameter, adamw_step, softmax_cross_entropy


@dataclass
class MaskSpec:
    span: int = 10
    target_ratio: float = 0.4

    def start_probability(self) -> float:
        """Per-frame span-start probability whose merged coverage hits the target.

        A frame is covered iff one of the ``span`` starts before it fires, so
        coverage = 1 - (1 - p)^span away from the sequence start.
        """
        return 1.0 - (1.0 - self.target_ratio) ** (1.0 / self.span)


def make_mask(T: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < spec.target_ratio < 1.0:
        raise ValueError(f"target_ratio must be in (0, 1), got {spec.target_ratio}")
    if T < 1 or spec.span < 1:
        raise ValueError("T and span must be positive")
    starts = rng.random(T) < spec.start_probability()
    return mask_from_starts(starts, spec.span)


def mask_from_starts(starts: np.ndarray, span: int) -> np.ndarray:
    """Union of ``span``-frame windows beginning at every True position."""
    covered = np.convolve(starts.astype(np.int64), np.ones(span, dtype=np.int64))[: len(starts)]
    return covered > 0


class BrqQuantizer(Module):
    """Frozen random projection plus frozen L2-normalised codebooks."""

    def __init__(self, raw_dim: int, stack: int = 4, num_codebooks: int = 2,
                 codebook_size: int = 64, code_dim: int = 16, seed: int = 0, dtype=np.float64):
        # full scale: 16 codebooks of 8192 entries
        rng = np.random.default_rng(seed)
        self.stack = stack
        fan_in = stack * raw_dim
        self.projection = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, code_dim)).astype(dtype),
                                    trainable=False)
        books = rng.normal(size=(num_codebooks, codebook_size, code_dim))
        books /= np.linalg.norm(books, axis=-1, keepdims=True)
        self.codebooks = Parameter(books.astype(dtype), trainable=False)

    @property
    def num_codebooks(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    def project(self, raw: np.ndarray) -> np.ndarray:
        """Stack, project and L2-normalise; returns [T // stack, code_dim]."""
        raw = np.asarray(raw)
        n = raw.shape[0] // self.stack
        groups = raw[: n * self.stack].reshape(n, self.stack * raw.shape[1])
        z = groups @ self.projection.data
        norm = np.linalg.norm(z, axis=-1, keepdims=True)
        return z / np.maximum(norm, 1e-12)


def quantize_targets(raw, q: BrqQuantizer) -> np.ndarray:
    """Codebook indices [N_cb, floor(T / stack)] for one utterance."""
    raw = np.asarray(raw)
    if raw.shape[0] < q.stack:
        raise ValueError(f"need at least {q.stack} frames, got {raw.shape[0]}")
    z = q.project(raw)
    # unit vectors: nearest in L2 == largest inner product
    return np.argmax(np.einsum("td,cvd->ctv", z, q.codebooks.data), axis=-1)


def target_frame_index(num_frames: int, reduction: int, stack: int) -> np.ndarray:
    """Target index covering each encoder output frame (start of its raw span)."""
    return (np.arange(num_frames) * reduction) // stack


def encoder_frame_mask(raw_mask: np.ndarray, reduction: int) -> np.ndarray:
    """An output frame is masked if any raw frame it covers is masked."""
    raw_mask = np.asarray(raw_mask, dtype=bool)
    n = raw_mask.shape[-1] // reduction
    return raw_mask[..., : n * reduction].reshape(raw_mask.shape[:-1] + (n, reduction)).any(-1)


class BrqHeads(Module):
    """Independent linear classifiers, one per codebook, fused in one matrix."""

    def __init__(self, dim: int, num_codebooks: int, codebook_size: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed + 7)
        self.proj = Linear(rng, dim, num_codebooks * codebook_size, dtype=dtype)
        self.proj.weight.data *= 0.01
        self.num_codebooks = num_codebooks
        self.codebook_size = codebook_size

    def __call__(self, h):
        B, T, _ = h.shape
        return self.proj(h).reshape(B, T, self.num_codebooks, self.codebook_size)


def brq_loss(stack: LayerStack, heads: BrqHeads, targets: np.ndarray, mask: np.ndarray,
             reduction: int = 1, quantizer_stack: int = 4):
    """Masked codebook-prediction loss on the last encoder layer.

    ``targets`` is [B, N_cb, n_targets] (padded with -1); ``mask`` is the raw
    frame mask [B, T_raw]. Mean over masked frames and codebooks.
    """
    h = stack.layers[-1]
    B, T_enc, _ = h.shape
    targets = np.asarray(targets)
    frame_mask = encoder_frame_mask(mask, reduction)[:, :T_enc]
    frame_mask = frame_mask & (np.arange(T_enc)[None, :] < np.asarray(stack.lengths)[:, None])
    tidx = target_frame_index(T_enc, reduction, quantizer_stack)
    n_targets = targets.shape[-1]
    in_range = tidx < n_targets
    per_frame = np.full((B, T_enc, targets.shape[1]), -1, dtype=np.int64)
    per_frame[:, in_range, :] = np.transpose(targets[:, :, tidx[in_range]], (0, 2, 1))
    valid = frame_mask[..., None] & (per_frame >= 0)
    if not valid.any():
        raise ValueError("no masked frames with targets")
    return softmax_cross_entropy(heads(h), np.maximum(per_frame, 0), valid)


class BrqPretrainer:
    """Owns encoder, quantizer, heads and the AdamW state for pretraining."""

    def __init__(self, encoder: AudioEncoder, quantizer: BrqQuantizer, mask_spec: MaskSpec,
                 peak_lr: float = 5e-3, warmup_steps: int = 50, weight_decay: float = 0.01, seed: int = 0):
        self.encoder = encoder
        self.quantizer = quantizer
        self.mask_spec = mask_spec
        dtype = encoder.mask_embedding.data.dtype
        self.heads = BrqHeads(encoder.config.feature_dim, quantizer.num_codebooks,
                              quantizer.codebook_size, seed=seed, dtype=dtype)
        encoder.set_trainable(True)
        self.opt = OptimizerState(peak_lr=peak_lr, warmup_steps=warmup_steps, weight_decay=weight_decay)
        self.rng = np.random.default_rng(seed)

    def parameters(self) -> dict:
        out = {f"encoder.{n}": p for n, p in self.encoder.named_parameters()}
        out.update({f"brq_heads.{n}": p for n, p in self.heads.named_parameters()})
        return out

    def batch_inputs(self, audios: Sequence[np.ndarray]):
        B = len(audios)
        T = max(a.shape[0] for a in audios)
        D = audios[0].shape[1]
        x = np.zeros((B, T, D), dtype=audios[0].dtype)
        lengths = np.array([a.shape[0] for a in audios])
        n_t = T // self.quantizer.stack
        targets = np.full((B, self.quantizer.num_codebooks, n_t), -1, dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        for i, a in enumerate(audios):
            x[i, : a.shape[0]] = a
            t = quantize_targets(a, self.quantizer)
            targets[i, :, : t.shape[1]] = t
            mask[i, : a.shape[0]] = make_mask(a.shape[0], self.mask_spec, self.rng)
        return x, lengths, targets, mask

    def loss(self, x, lengths, targets, mask):
        stack = self.encoder.encode(x, lengths, frame_mask=mask)
        return brq_loss(stack, self.heads, targets, mask, self.encoder.config.temporal_reduction,
                        self.quantizer.stack)

    def step(self, audios: Sequence[np.ndarray], max_retries: int = 10) -> float:
        for _ in range(max_retries):
            x, lengths, targets, mask = self.batch_inputs(audios)
            try:
                loss = self.loss(x, lengths, targets, mask)
                break
            except ValueError:
                continue  # no frame masked in this draw
        else:
            raise ValueError("could not draw a non-empty mask")
        params = self.parameters()
        for p in params.values():
            p.grad = None
        loss.backward()
        for p in params.values():
            if p.trainable and p.grad is None:
                p.grad = np.zeros_like(p.data)
        adamw_step(self.opt, params)
        return float(loss.data)
