"""Fit the ASR task alone and track train-set WER as steps accumulate.

    python3 scripts/asr_overfit.py --steps 2000 --every 250
"""

import argparse
import dataclasses
import time

from slmkit import pipeline
from slmkit.config import load_config
from slmkit.evaluate import evaluate
from slmkit.tasks import build_vocab
from slmkit.trainer import Trainer


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--stage1", type=int, default=300)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--every", type=int, default=250)
    args = p.parse_args()
    cfg = load_config(None, ["data.tasks = asr"] + args.set)
    asr = pipeline.generate_corpora(cfg)["asr"]
    tcfg = dataclasses.replace(cfg.train_config(), stage1_steps=args.stage1,
                               stage2_warmup_steps=args.steps - args.stage1, stage2_multitask_steps=0)
    trainer = Trainer(pipeline.build_model(cfg, build_vocab()), tcfg, asr["train"], asr["valid"])
    t0 = time.perf_counter()
    print("step, seconds, train_wer")
    while not trainer.finished:
        trainer.run(max_steps=min(trainer.step + args.every, args.steps))
        wer = evaluate(trainer.model, trainer.train_samples)[0][2]
        print(f"{trainer.step}, {time.perf_counter() - t0:.1f}, {wer:.4f}", flush=True)


if __name__ == "__main__":
    main()
