"""Train the full curriculum over every task and report held-out metrics.

    python3 scripts/multitask_run.py --set train.stage2_multitask_steps=2000

Prints single-task metrics (free and constrained), joint-decoding metrics,
and wall time. Pass --save PATH to keep the final checkpoint.
"""

import argparse
import time

from slmkit import pipeline
from slmkit.checkpoint import save_checkpoint
from slmkit.config import load_config
from slmkit.evaluate import evaluate, evaluate_joint, format_report
from slmkit.tasks import build_vocab


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--save")
    args = p.parse_args()
    cfg = load_config(args.config, args.set)
    t0 = time.perf_counter()
    corpora = pipeline.generate_corpora(cfg)
    split = {s: [x for c in corpora.values() for x in c[s]] for s in pipeline.SPLITS}
    model = pipeline.build_model(cfg, build_vocab())
    trainer = pipeline.make_trainer(cfg, model, split["train"], split["valid"])
    ckpt, history = trainer.run()
    print(f"trained {trainer.step} steps in {time.perf_counter() - t0:.0f}s")
    for rec in history[-6:]:
        print(rec.line())
    test = split["test"]
    print(format_report(evaluate(model, test, constrained=True, mode=cfg.decode.mode)))
    print(format_report(evaluate(model, test)))
    print(format_report(evaluate_joint(model, [s for s in test if s.task_id in pipeline.JOINT_TASKS],
                                       constrained=True)))
    if args.save:
        save_checkpoint(ckpt, args.save)


if __name__ == "__main__":
    main()
