import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_corpus, tiny_model_config
from slmkit.downsampler import DownsampleConfig, Downsampler, downsample, plan_strides
from slmkit.encoder import AudioEncoder, EncoderConfig, LayerCombiner, LayerStack, combine
from slmkit.lm import EOS_ID, LmConfig, TextLM
from slmkit.lora import LoraAdapter, lora_forward
from slmkit.model import CurriculumStage, SpeechLM, apply_stage, collate, trainable_report
from slmkit.numcore import Parameter, Tensor, gradient_check


# -- encoder and layer fusion ----------------------------------------------------

def test_encoder_returns_every_layer(rng):
    enc = AudioEncoder(EncoderConfig(num_layers=3, feature_dim=8, raw_dim=4, ff_dim=8, temporal_reduction=2))
    stack = enc.encode(rng.normal(size=(10, 4)))
    assert len(stack) == 3
    assert stack.shape == (1, 5, 8)


def test_encoder_rejects_bad_configs():
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(frame_rate_hz=40)


def test_encoder_rejects_wrong_feature_dim(rng):
    enc = AudioEncoder(EncoderConfig(num_layers=1, feature_dim=8, raw_dim=4, ff_dim=8))
    with pytest.raises(ValueError):
        enc.encode(rng.normal(size=(8, 5)))


def test_padded_batch_matches_single(rng):
    enc = AudioEncoder(EncoderConfig(num_layers=2, feature_dim=8, raw_dim=4, ff_dim=8, temporal_reduction=2))
    a, b = rng.normal(size=(12, 4)), rng.normal(size=(6, 4))
    batch = np.zeros((2, 12, 4))
    batch[0], batch[1, :6] = a, b
    stack = enc.encode(batch, lengths=[12, 6])
    np.testing.assert_allclose(stack.layers[-1].data[1, :3], enc.encode(b).layers[-1].data[0], atol=1e-12)


def test_combiner_starts_at_layer_mean(rng):
    layers = [Tensor(rng.normal(size=(1, 4, 3))) for _ in range(5)]
    out = combine(LayerStack(layers, np.array([4])), LayerCombiner(5))
    np.testing.assert_allclose(out.data, np.mean([h.data for h in layers], axis=0), atol=1e-14)


def test_combiner_weighted_sum(rng):
    layers = [Tensor(rng.normal(size=(1, 2, 3))) for _ in range(3)]
    comb = LayerCombiner(3)
    comb.weights.data[:] = [2.0, 0.0, -1.0]
    expected = (2 * layers[0].data - layers[2].data) / 3
    np.testing.assert_allclose(combine(LayerStack(layers, np.array([2])), comb).data, expected, atol=1e-14)


def test_last_layer_mode_ignores_weights(rng):
    layers = [Tensor(rng.normal(size=(1, 2, 3))) for _ in range(3)]
    comb = LayerCombiner(3, mode="last_layer")
    comb.weights.data[:] = 7.0
    np.testing.assert_array_equal(combine(LayerStack(layers, np.array([2])), comb).data, layers[-1].data)


def test_combiner_weight_count_must_match(rng):
    layers = [Tensor(rng.normal(size=(1, 2, 3))) for _ in range(3)]
    with pytest.raises(ValueError):
        combine(LayerStack(layers, np.array([2])), LayerCombiner(4))


def test_combiner_gradients(rng):
    layers = [Tensor(rng.normal(size=(1, 3, 2))) for _ in range(4)]
    comb = LayerCombiner(4)
    comb.weights.data[:] = rng.normal(size=4)
    target = rng.normal(size=(1, 3, 2))

    def loss():
        out = combine(LayerStack(layers, np.array([3])), comb)
        return ((out - target) * (out - target)).sum()

    assert gradient_check(loss, {"w": comb.weights}).passed


# -- downsampler -----------------------------------------------------------------

def test_stride_plans():
    assert plan_strides(50) == [2, 2]
    assert plan_strides(25) == [2, 1]
    assert plan_strides(12.5) == [1, 1]
    with pytest.raises(ValueError):
        plan_strides(30)
    with pytest.raises(ValueError):
        plan_strides(100)


def test_hundred_frames_at_fifty_hz_become_twenty_five():
    cfg = DownsampleConfig(in_dim=4, out_dim=6)
    assert cfg.output_length(100) == 25
    out = Downsampler(cfg)(np.zeros((100, 4)))
    assert out.shape == (25, 6)


@pytest.mark.parametrize("T", range(1, 41))
def test_output_length_is_ceil_over_quarter(T):
    cfg = DownsampleConfig(in_dim=2, out_dim=2)
    assert cfg.output_length(T) == math.ceil(math.ceil(T / 2) / 2)
    assert Downsampler(cfg)(np.ones((T, 2))).shape[0] == cfg.output_length(T)


def test_config_validation():
    with pytest.raises(ValueError):
        DownsampleConfig(in_dim=2, out_dim=2, kernel_sizes=[3, 4])
    with pytest.raises(ValueError):
        DownsampleConfig(in_dim=2, out_dim=2, strides=[2, 1])
    with pytest.raises(ValueError):
        DownsampleConfig(in_dim=2, out_dim=2, kernel_sizes=[3])


def test_downsample_rejects_mismatched_config(rng):
    params = Downsampler(DownsampleConfig(in_dim=3, out_dim=4))
    with pytest.raises(ValueError):
        downsample(rng.normal(size=(8, 3)), DownsampleConfig(in_dim=3, out_dim=4, input_rate_hz=25), params)
    assert downsample(rng.normal(size=(8, 3)), DownsampleConfig(in_dim=3, out_dim=4), params).shape == (2, 4)


def test_wrong_channel_count_raises(rng):
    with pytest.raises(ValueError):
        Downsampler(DownsampleConfig(in_dim=3, out_dim=4))(rng.normal(size=(8, 2)))


def test_output_frames_are_layer_normalised(rng):
    out = Downsampler(DownsampleConfig(in_dim=3, out_dim=5), seed=3)(rng.normal(size=(16, 3))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(lengths=st.lists(st.integers(1, 20), min_size=2, max_size=4), seed=st.integers(0, 2**31))
def test_padding_never_leaks(lengths, seed):
    r = np.random.default_rng(seed)
    ds = Downsampler(DownsampleConfig(in_dim=3, out_dim=4), seed=1)
    seqs = [r.normal(size=(n, 3)) for n in lengths]
    batch = np.full((len(seqs), max(lengths), 3), 9.0)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s
    out = ds(batch, np.array(lengths)).data
    for i, s in enumerate(seqs):
        single = ds(s).data
        np.testing.assert_allclose(out[i, : len(single)], single, atol=1e-12)
        assert not out[i, len(single):].any()


def test_downsampler_gradients(rng):
    ds = Downsampler(DownsampleConfig(in_dim=2, out_dim=3), seed=2)
    x = rng.normal(size=(2, 9, 2))
    w = rng.normal(size=(2, 3, 3))
    report = gradient_check(lambda: (ds(x, np.array([9, 5])) * w).sum(), ds.parameters())
    assert report.passed, report.worst


# -- LoRA -------------------------------------------------------------------------

def test_lora_rank_must_be_positive():
    with pytest.raises(ValueError):
        LoraAdapter("w", 4, 4, rank=0)


def test_lora_zero_init_is_exact(rng):
    w = Parameter(rng.normal(size=(5, 4)))
    ad = LoraAdapter("w", 4, 5, rank=2, rng=rng)
    x = Tensor(rng.normal(size=(3, 4)))
    base = x.data @ w.data.T
    np.testing.assert_array_equal(lora_forward(w, ad, x).data, base)


def test_lora_merge_equivalence(rng):
    w = Parameter(rng.normal(size=(6, 4)))
    ad = LoraAdapter("w", 4, 6, rank=3, alpha=6.0, rng=rng)
    ad.B.data[:] = rng.normal(size=ad.B.shape)
    x = Tensor(rng.normal(size=(2, 4)))
    np.testing.assert_allclose(lora_forward(w, ad, x).data, x.data @ ad.merged(w.data).T, atol=1e-12)
    assert ad.scale == 2.0
    assert ad.num_parameters() == 3 * 4 + 6 * 3


def test_lora_gradients_skip_frozen_base(rng):
    w = Parameter(rng.normal(size=(4, 3)), trainable=False)
    ad = LoraAdapter("w", 3, 4, rank=2, rng=rng)
    ad.B.data[:] = rng.normal(size=ad.B.shape)
    x = Tensor(rng.normal(size=(2, 3)))
    loss = (lora_forward(w, ad, x) * lora_forward(w, ad, x)).sum()
    loss.backward()
    assert w.grad is None
    assert gradient_check(lambda: (lora_forward(w, ad, x) * lora_forward(w, ad, x)).sum(), {"A": ad.A, "B": ad.B}).passed


def test_attach_lora_targets_query_and_value(vocab):
    lm = TextLM(LmConfig(len(vocab), d_model=8, encoder_layers=1, decoder_layers=2, ff_dim=8))
    adapters = lm.attach_lora(rank=2)
    # one encoder self-attention, two decoder blocks with self and cross attention
    assert len(adapters) == 2 * (1 + 2 * 2)
    assert lm.has_lora
    lm.detach_lora()
    assert not lm.has_lora


# -- text LM ------------------------------------------------------------------------

def test_teacher_forcing_requires_eos(vocab):
    lm = TextLM(LmConfig(len(vocab), d_model=8, ff_dim=8))
    with pytest.raises(ValueError):
        lm.teacher_forcing([[5, 6]])
    with pytest.raises(ValueError):
        lm.teacher_forcing([[]])
    dec_in, tgt, mask = lm.teacher_forcing([[5, EOS_ID], [7, 8, EOS_ID]])
    assert dec_in[1].tolist() == [1, 7, 8]
    assert mask.sum() == 5


def test_fusion_places_audio_before_prompt(vocab, rng):
    lm = TextLM(LmConfig(len(vocab), d_model=4, ff_dim=8))
    audio = Tensor(rng.normal(size=(2, 3, 4)))
    fused = lm.fuse_batch(audio, [3, 1], [[5, 6], [7]])
    assert fused.length.tolist() == [5, 2]
    seq = fused.sequence.data
    np.testing.assert_array_equal(seq[0, :3], audio.data[0])
    np.testing.assert_array_equal(seq[0, 3], lm.tok_emb.data[5])
    np.testing.assert_array_equal(seq[1, 0], audio.data[1, 0])
    np.testing.assert_array_equal(seq[1, 1], lm.tok_emb.data[7])


def test_fusion_respects_max_positions(vocab, rng):
    lm = TextLM(LmConfig(len(vocab), d_model=4, ff_dim=8, max_positions=4))
    with pytest.raises(ValueError):
        lm.fuse_batch(Tensor(rng.normal(size=(1, 3, 4))), [3], [[5, 6]])


def test_untrained_loss_is_near_uniform(vocab, tiny_renderer):
    """A fresh model should be close to a uniform guess over the vocabulary."""
    model = SpeechLM(tiny_model_config(d_model=64, lm_ff_dim=128, lm_encoder_layers=2, lm_decoder_layers=2), vocab)
    samples = tiny_corpus("asr", tiny_renderer, n_train=32)["train"]
    loss = float(model.nll(collate(samples, vocab)).data)
    assert abs(loss - math.log(len(vocab))) <= 0.15 * math.log(len(vocab))


# -- curriculum freeze policy ---------------------------------------------------------

def test_stage_flags(vocab):
    model = SpeechLM(tiny_model_config(), vocab)
    flags = {n: p.trainable for n, p in model.named_parameters()}
    assert not any(".lora." in n for n in flags)
    assert all(flags[n] for n in flags if n.startswith(("downsampler.", "combiner.")))
    assert not any(flags[n] for n in flags if n.startswith(("encoder.", "lm.")))
    apply_stage(model, CurriculumStage.STAGE2_WARMUP)
    flags = {n: p.trainable for n, p in model.named_parameters()}
    lora = [n for n in flags if ".lora." in n]
    assert lora and all(flags[n] for n in lora)
    assert not any(flags[n] for n in flags if n.startswith("lm.") and ".lora." not in n)
    assert flags == trainable_report(model)


def test_stage_order():
    s1, s2, s3 = CurriculumStage
    assert s1 < s2 < s3
    assert s1.next() is s2 and s2.next() is s3
    with pytest.raises(ValueError):
        s3.next()


def test_cached_stacks_match_encoder(vocab, tiny_renderer):
    model = SpeechLM(tiny_model_config(), vocab)
    samples = tiny_corpus("asr", tiny_renderer, n_train=4)["train"]
    batch = collate(samples, vocab)
    direct = float(model.nll(batch).data)
    model.cache_stacks(samples)
    np.testing.assert_allclose(float(model.nll(batch).data), direct, rtol=1e-12)
