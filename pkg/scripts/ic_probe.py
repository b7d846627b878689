"""Class-mean probe: how separable are intent classes in the raw features?

Fits one mean feature vector per intent on a training corpus and classifies
held-out utterances by the nearest mean. Sweeps noise levels and voice seeds.

    python3 scripts/ic_probe.py --noise 0.1 0.3 0.6 --voices 0 1 2
"""

import argparse

import numpy as np

from slmkit.tasks import AudioConfig, Renderer, ToyTaskSpec, gen_corpus


def probe(noise, voice, n_train=256, n_test=256):
    renderer = Renderer(AudioConfig(voice_seed=voice))
    c = gen_corpus(ToyTaskSpec("ic", n_train=n_train, n_valid=1, n_test=n_test, noise_sigma=noise),
                   np.random.default_rng(voice), renderer)
    labels = sorted({s.label for s in c["train"]})
    means = np.stack([np.mean([s.audio.mean(0) for s in c["train"] if s.label == lab], 0) for lab in labels])
    hits = [labels[int(np.argmin(((means - s.audio.mean(0)) ** 2).sum(1)))] == s.label for s in c["test"]]
    return float(np.mean(hits))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--noise", type=float, nargs="+", default=[0.1, 0.3])
    p.add_argument("--voices", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    print("noise, voice, accuracy")
    for noise in args.noise:
        for voice in args.voices:
            print(f"{noise}, {voice}, {probe(noise, voice):.3f}")


if __name__ == "__main__":
    main()
