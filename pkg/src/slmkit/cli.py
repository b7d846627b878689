"""Command line: gen-data, pretrain-brq, train, eval, decode, inspect-checkpoint.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .decoding import build_trie, constrained_decode, greedy_decode
from .errors import CheckpointError
from .evaluate import evaluate, evaluate_joint, format_report
from .model import collate
from .numcore import no_grad
from .tasks import TaskSample, build_vocab, read_audio, read_manifest
from .trainer import Trainer, TrainingDivergedError, model_from_checkpoint

log = logging.getLogger("slmkit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    cfg.save(out_dir / "config.txt")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out or cfg.out_dir)
    corpora = pipeline.write_dataset(cfg, out)
    _echo_config(cfg, out)
    for task, splits in corpora.items():
        for split in pipeline.SPLITS:
            samples = splits[split]
            line = f"{task} {split}: {len(samples)}"
            if task == "kws":
                pos = sum(s.label == "yes" for s in samples)
                line += f" (positives: {pos}, negatives: {len(samples) - pos})"
            print(line)
    print(f"pretraining utterances: {cfg.data.pretrain_utterances}")
    return EXIT_OK


def cmd_pretrain_brq(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out or cfg.out_dir)
    audios = pipeline.load_pretraining_audio(args.data)
    steps = cfg.brq.steps if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    _echo_config(cfg, out)
    with open(out / "brq_loss.txt", "w") as f:
        try:
            pt, losses = pipeline.pretrain_encoder(cfg, audios, steps,
                                                   on_step=lambda s, l: f.write(f"{s} {l:.9f}\n"))
        except pipeline.DivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(pipeline.encoder_checkpoint(cfg, pt.encoder, steps), out / "encoder.ckpt")
    if losses:
        print(f"initial loss: {losses[0]:.6f}")
        print(f"final loss: {losses[-1]:.6f}")
    print(f"wrote {out / 'encoder.ckpt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out or cfg.out_dir)
    tasks = cfg.data.task_list()
    train = pipeline.load_split(args.data, tasks, "train")
    valid = pipeline.load_split(args.data, tasks, "valid")
    vocab = build_vocab()
    for s in train + valid:  # fail early on text the vocabulary cannot express
        vocab.encode(s.prompt)
        vocab.encode(s.label)
    _echo_config(cfg, out)
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger = logging.getLogger("slmkit")
    logger.addHandler(handler)
    if logger.getEffectiveLevel() > logging.INFO:
        logger.setLevel(logging.INFO)
    try:
        if args.resume:
            trainer = Trainer.resume(load_checkpoint(args.resume), train, valid, out / "history.txt")
        else:
            (out / "history.txt").write_text("")
            model = pipeline.build_model(cfg, vocab, last_layer=args.last_layer)
            if args.encoder:
                pipeline.load_encoder_weights(model, load_checkpoint(args.encoder))
            trainer = pipeline.make_trainer(cfg, model, train, valid, out / "history.txt")
        try:
            ckpt, _ = trainer.run(max_steps=args.max_steps)
        except TrainingDivergedError as exc:
            save_checkpoint(exc.checkpoint, out / "diverged.ckpt")
            print(f"error: {exc}; diagnostic checkpoint at {out / 'diverged.ckpt'}", file=sys.stderr)
            return EXIT_NUMERIC
        if trainer.finished:
            save_checkpoint(ckpt, out / "model.ckpt")
            print(f"wrote {out / 'model.ckpt'} (step {trainer.step}, stage {trainer.stage.value})")
        else:
            save_checkpoint(ckpt, out / "state.ckpt")
            print(f"paused at step {trainer.step}; resume with --resume {out / 'state.ckpt'}")
    finally:
        logger.removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    samples = []
    for path in args.manifest:
        samples.extend(read_manifest(path))
    if not samples:
        raise UsageError("manifest is empty")
    if args.joint:
        rows = evaluate_joint(model, samples, constrained=args.constrained, max_len=args.max_len)
    else:
        rows = evaluate(model, samples, constrained=args.constrained, mode=args.mode, max_len=args.max_len)
    print(format_report(rows))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    audio = read_audio(args.audio)
    if args.max_len < 1:
        raise UsageError("--max-len must be >= 1")
    sample = TaskSample("decode", "", audio, args.prompt, "")
    batch = collate([sample], model.vocab, with_targets=False)
    with no_grad():
        fused = model.fused(batch)
    if args.labels:
        labels = [s.strip() for s in args.labels.split(",") if s.strip()]
        print(constrained_decode(model.lm, fused, build_trie(labels, model.vocab), args.mode))
    else:
        print(model.vocab.decode(greedy_decode(model.lm, fused, args.max_len)[0]))
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"stage: {ckpt.stage}")
    print(f"step: {ckpt.step}")
    flags = ckpt.meta.get("trainable", {})
    total = trainable = 0
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        total += arr.size
        flag = flags.get(name)
        trainable += arr.size if flag else 0
        mark = "" if flag is None else (" trainable" if flag else " frozen")
        print(f"{name} {tuple(arr.shape)}{mark}")
    print(f"parameters: {total} (trainable: {trainable})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slmkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="key = value run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", type=Path, help="output directory (default: out_dir from the config)")

    sp = sub.add_parser("gen-data", help="write synthetic manifests and audio")
    with_config(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain-brq", help="masked-prediction pretraining of the audio encoder")
    with_config(sp)
    sp.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    sp.add_argument("--steps", type=int, help="override brq.steps")
    sp.set_defaults(func=cmd_pretrain_brq)

    sp = sub.add_parser("train", help="run the three-stage curriculum")
    with_config(sp)
    sp.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    sp.add_argument("--encoder", type=Path, help="encoder checkpoint from pretrain-brq")
    sp.add_argument("--last-layer", action="store_true", help="use only the last encoder layer")
    sp.add_argument("--resume", type=Path, help="resume from a state checkpoint")
    sp.add_argument("--max-steps", type=int, help="pause after this many steps and write state.ckpt")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-task metrics as 'task, metric, value' lines")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True, action="append")
    sp.add_argument("--constrained", action="store_true", help="restrict classification outputs to labels")
    sp.add_argument("--joint", action="store_true", help="ask for transcript and answer in one pass")
    sp.add_argument("--mode", choices=("greedy_masked", "exhaustive"), default="greedy_masked")
    sp.add_argument("--max-len", type=int, default=64)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("decode", help="decode one audio file")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--audio", type=Path, required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--labels", help="comma-separated label set to constrain the output")
    sp.add_argument("--mode", choices=("greedy_masked", "exhaustive"), default="greedy_masked")
    sp.add_argument("--max-len", type=int, default=48)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata and tensor shapes")
    sp.add_argument("checkpoint", type=Path)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
