import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slmkit.errors import MalformedOutputError
from slmkit.joint import JointPrompt, parse_joint, render_joint_prompt, serialize_joint
from slmkit.metrics import classification_metrics, corpus_wer, edit_distance, wer
from slmkit.tasks import (ALL_WORDS, ER_CLASSES, IC_POOLS, IC_SEPARABLE_NOISE, PROMPTS, AudioConfig, Renderer,
                          ToyTaskSpec, gen_corpus, read_audio, read_manifest, render_audio, write_audio,
                          write_manifest)
from slmkit.vocab import TokenVocab, join_pieces, split_pieces

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=8)


# -- metrics --------------------------------------------------------------------

def test_wer_examples():
    assert wer("a b c", "a b c") == 0
    assert wer("a b c", "") == 1.0
    assert wer("a b c", "a x c") == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        wer("", "a")


@settings(max_examples=200, deadline=None)
@given(ref=words.filter(bool), hyp=words)
def test_wer_edit_bound(ref, hyp):
    assert wer(ref, ref) == 0
    assert 0 <= wer(ref, hyp) <= (len(ref) + len(hyp)) / len(ref)


def test_edit_distance_classic():
    assert edit_distance("kitten", "sitting") == 3


def test_corpus_wer_pools_words():
    assert corpus_wer(["a b", "c d e f"], ["a b", "c"]) == pytest.approx(3 / 6)


def test_classification_metrics():
    m = classification_metrics(["A", "A", "B", "B"], ["A", "B", "A", "B"], ["A", "B"])
    assert m["accuracy"] == 0.5 and m["uar"] == 0.5
    perfect = classification_metrics(["A", "B", "C"], ["A", "B", "C"], ["A", "B", "C"])
    assert perfect == {"accuracy": 1.0, "macro_f1": 1.0, "uar": 1.0}
    never_c = classification_metrics(["A", "C"], ["A", "A"], ["A", "C"])
    assert never_c["uar"] == 0.5
    with pytest.raises(ValueError):
        classification_metrics(["A"], [], ["A"])


# -- vocabulary -----------------------------------------------------------------

def test_pieces_round_trip():
    text = "ASR: paris is the capital of france | KWE: paris, france |"
    assert join_pieces(split_pieces(text)) == text
    assert split_pieces("play_radio") == ["play", "_", "radio"]


def test_vocab_encode_decode():
    v = TokenVocab.from_texts(["hello world", "play_radio"])
    ids = v.encode("play_radio world", add_eos=True)
    assert ids[-1] == v.eos
    assert v.decode(ids) == "play_radio world"
    with pytest.raises(ValueError):
        v.encode("unknown")
    assert TokenVocab.from_lines(v.to_lines()).itos == v.itos


# -- joint grammar -----------------------------------------------------------------

def test_parse_joint_examples():
    assert parse_joint("ASR: paris is the capital of france | KWE: paris, france |") == {
        "ASR": "paris is the capital of france", "KWE": "paris, france"}
    assert parse_joint("ASR: can you shut up for a while | Emotion: angry |") == {
        "ASR": "can you shut up for a while", "Emotion": "angry"}
    assert parse_joint("ASR: time: now | IC: x |")["ASR"] == "time: now"


@pytest.mark.parametrize("text", ["ASR: a | IC: b", "ASR: a | b |", ": a |", "ASR: a | ASR: b |"])
def test_parse_joint_errors(text):
    with pytest.raises(MalformedOutputError) as err:
        parse_joint(text)
    assert err.value.segment


def test_render_joint_prompt():
    text = render_joint_prompt(JointPrompt(["ASR", "KWE"], ["transcribe", "find keywords"]))
    assert text.index("=== Task: ASR ===") < text.index("=== Task: KWE ===")
    directive = JointPrompt(["ASR", "Emotion"], ["x", "y"]).directive()
    assert directive.endswith('"ASR: ... | Emotion: ... |"')
    with pytest.raises(ValueError):
        render_joint_prompt(JointPrompt(["ASR"], ["x"]))


def test_serialize_rejects_reserved_separator():
    with pytest.raises(ValueError):
        serialize_joint({"ASR": "a | b"})


# -- synthetic corpora ---------------------------------------------------------------

def test_render_audio_construction():
    r = Renderer(AudioConfig(raw_dim=6))
    a = render_audio(["paris", "is"], "happy", 0.0, np.random.default_rng(0), r)
    b = render_audio(["paris", "is"], "sad", 0.0, np.random.default_rng(1), r)
    assert a.features.shape == (2 * r.cfg.frames_per_token, 6)
    diff = a.features.mean(0) - b.features.mean(0)
    np.testing.assert_allclose(diff, r.style_offsets["happy"] - r.style_offsets["sad"], atol=1e-12)
    with pytest.raises(ValueError):
        render_audio(["zebra"], "happy", 0.0, np.random.default_rng(0), r)


def test_kws_split_is_seventy_thirty():
    spec = ToyTaskSpec("kws", n_train=100, n_valid=10, n_test=3)
    corpus = gen_corpus(spec, np.random.default_rng(0), Renderer(AudioConfig(raw_dim=4)))
    assert sum(s.label == "yes" for s in corpus["train"]) == 70
    assert sum(s.label == "yes" for s in corpus["valid"]) == 7
    for s in corpus["train"]:
        keyword = s.prompt.split()[-4 if "spoken" in s.prompt else -1]
        assert (keyword in s.transcript.split()) == (s.label == "yes") or keyword not in ALL_WORDS


def test_corpus_is_reproducible_and_disjoint():
    spec = ToyTaskSpec("er", n_train=10, n_valid=3, n_test=3)
    a = gen_corpus(spec, np.random.default_rng(5), Renderer(AudioConfig(raw_dim=4)))
    b = gen_corpus(spec, np.random.default_rng(5), Renderer(AudioConfig(raw_dim=4)))
    for split in a:
        for x, y in zip(a[split], b[split]):
            assert x.uid == y.uid and x.label == y.label
            np.testing.assert_array_equal(x.audio, y.audio)
    uids = [s.uid for split in a.values() for s in split]
    assert len(uids) == len(set(uids))


def test_task_semantics():
    r = Renderer(AudioConfig(raw_dim=4))
    rng = np.random.default_rng(0)
    asr = gen_corpus(ToyTaskSpec("asr", n_train=5, n_valid=1, n_test=1), rng, r)["train"]
    assert all(s.label == s.transcript for s in asr)
    ic = gen_corpus(ToyTaskSpec("ic", n_train=20, n_valid=1, n_test=1), rng, r)["train"]
    assert all(set(s.transcript.split()) <= set(IC_POOLS[s.label]) for s in ic)
    er = gen_corpus(ToyTaskSpec("er", n_train=20, n_valid=1, n_test=1), rng, r)["train"]
    assert all(s.label in ER_CLASSES for s in er)
    assert all(s.prompt in PROMPTS["er"] for s in er)


def test_joint_samples_never_land_in_test():
    spec = ToyTaskSpec("ic", n_train=40, n_valid=4, n_test=20, joint_fraction=0.5)
    corpus = gen_corpus(spec, np.random.default_rng(0), Renderer(AudioConfig(raw_dim=4)))
    assert any(s.joint for s in corpus["train"])
    assert not any(s.joint for s in corpus["test"])
    for s in corpus["train"]:
        if s.joint:
            assert parse_joint(s.label) == {"ASR": s.transcript, "IC": parse_joint(s.label)["IC"]}


@pytest.mark.parametrize("voice_seed", range(3))
def test_intents_are_separable_by_class_means(voice_seed):
    """Nearest-class-mean on time-averaged features, below the noise threshold."""
    r = Renderer(AudioConfig(voice_seed=voice_seed))
    spec = ToyTaskSpec("ic", n_train=200, n_valid=1, n_test=400, noise_sigma=IC_SEPARABLE_NOISE)
    corpus = gen_corpus(spec, np.random.default_rng(voice_seed), r)
    labels = sorted(IC_POOLS)

    def feats(samples):
        return np.array([s.audio.mean(0) for s in samples])

    train = corpus["train"]
    means = np.array([feats([s for s in train if s.label == c]).mean(0) for c in labels])
    test = corpus["test"]
    dist = ((feats(test)[:, None, :] - means[None]) ** 2).sum(-1)
    acc = np.mean([labels[i] == s.label for i, s in zip(dist.argmin(1), test)])
    assert acc >= 0.99


def test_manifest_round_trip(tmp_path):
    spec = ToyTaskSpec("kws", n_train=4, n_valid=1, n_test=1)
    samples = gen_corpus(spec, np.random.default_rng(0), Renderer(AudioConfig(raw_dim=4)))["train"]
    write_manifest(tmp_path / "m.jsonl", samples, tmp_path / "audio")
    back = read_manifest(tmp_path / "m.jsonl")
    for a, b in zip(samples, back):
        assert (a.uid, a.task_id, a.prompt, a.label, a.weight) == (b.uid, b.task_id, b.prompt, b.label, b.weight)
        np.testing.assert_array_equal(a.audio, b.audio)
    import json
    rec = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert {"task_id", "audio_file", "prompt", "label", "weight"} <= set(rec)


def test_audio_file_validation(tmp_path):
    write_audio(tmp_path / "a.f64", np.ones((3, 2)))
    np.testing.assert_array_equal(read_audio(tmp_path / "a.f64"), np.ones((3, 2)))
    (tmp_path / "b.f64").write_bytes((tmp_path / "a.f64").read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_audio(tmp_path / "b.f64")
