"""Masked-prediction pretraining loss curve for the audio encoder.

    python3 scripts/brq_curve.py --set brq.peak_lr=0.002 --every 50
"""

import argparse
import time

import numpy as np

from slmkit import pipeline
from slmkit.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--every", type=int, default=50)
    args = p.parse_args()
    cfg = load_config(None, args.set)
    t0 = time.perf_counter()

    def show(step, loss):
        if step % args.every == 0:
            print(f"{step} {loss:.4f} {time.perf_counter() - t0:.1f}s", flush=True)

    _, losses = pipeline.pretrain_encoder(cfg, pipeline.pretraining_audio(cfg), on_step=show)
    tail = float(np.mean(losses[-10:]))
    print(f"initial {losses[0]:.4f}, mean of last 10 {tail:.4f}, ratio {tail / losses[0]:.3f}")


if __name__ == "__main__":
    main()
