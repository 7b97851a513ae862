"""Command-line entry point: ``python -m wsprompt <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .corpus import CorpusError
from .evalharness import GRID, ProtocolError, summarize
from .grad import GradError
from .pipeline import PipelineError, Run
from .pretrain import PretrainError
from .promptgen import MASK_VARIANTS, PromptError

EXPECTED = (ConfigError, CorpusError, CheckpointError, ProtocolError, PromptError, PipelineError, PretrainError,
            GradError, FileNotFoundError)


def _seeds(text: str) -> list[int]:
    try:
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not out or any(s < 0 for s in out):
        raise argparse.ArgumentTypeError(f"seeds must be non-negative integers, got {text!r}")
    return out


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="run configuration (JSON)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                   help="seed for pretraining and single-seed commands (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="log training progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsprompt", description="Synthetic chest X-ray prompt-learning pipeline.")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _globals(p, suppress=True)
        return p

    add("gen-corpus", "generate the synthetic corpus")
    add("pretrain", "pretrain both encoders on decoupled image/sentence batches")
    p = add("prompt-train", "train the prompt generator on the base classes")
    p.add_argument("--mask", choices=MASK_VARIANTS, default="all", help="trainable groups (default all)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (default: config seeds)")
    p = add("eval", "evaluate zero-, few- or full-shot transfer to the unseen classes")
    p.add_argument("--protocol", action="append", metavar="P",
                   help="zero | few:<n> | full; repeatable (default: the whole grid)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (default: config seeds)")
    p.add_argument("--mask", choices=MASK_VARIANTS, default="all")
    p.add_argument("--timing", action="store_true", help="fill the seconds column (breaks byte-identity)")
    p = add("ablate", "train and evaluate every mask variant over the protocol grid")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (default: config seeds)")
    p = add("inspect", "post-hoc analyses of a trained generator")
    g = p.add_mutually_exclusive_group(required=True)
    for flag in ("nearest-words", "context-sim", "footprint", "activation-map"):
        g.add_argument(f"--{flag}", dest="what", action="store_const", const=flag)
    p.add_argument("--mask", choices=MASK_VARIANTS, default="all")
    p.add_argument("--k", type=int, default=30, help="neighbours per context slot")
    p.add_argument("--n-images", type=int, default=8, help="images for the similarity matrix")
    p.add_argument("--index", type=int, default=0, help="unseen-test sample for the activation map")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out:
        cfg.out = args.out
    cfg.validate()
    return cfg


def dispatch(args) -> int:
    cfg = _load_config(args)
    run = Run(cfg)
    cmd = args.command
    if cmd == "gen-corpus":
        path = run.gen_corpus()
        print(f"corpus written to {path} (config {run.hash[:12]})")
    elif cmd == "pretrain":
        info = run.pretrain(args.seed)
        h = info["history"]
        print(f"pretrain: loss {h[0]['loss']:.4f} -> {h[-1]['loss']:.4f}, held-out retrieval top-1 "
              f"{info['retrieval_top1']:.3f}, {info['seconds']:.0f}s; checkpoint {run.pretrain_path}")
    elif cmd == "prompt-train":
        model = run.load_model()
        for s in args.seeds or cfg.seeds:
            h = run.prompt_train(s, args.mask, model)["history"]
            print(f"prompt-train mask={args.mask} seed={s}: loss {h[0]['loss']:.4f} -> {h[-1]['loss']:.4f}, "
                  f"train accuracy {h[-1]['accuracy']:.3f}")
    elif cmd == "eval":
        protocols = tuple(args.protocol) if args.protocol else GRID
        reports, path = run.evaluate(protocols, args.seeds or cfg.seeds, args.mask, with_seconds=args.timing)
        for row in summarize(reports):
            print(f"{row.protocol:>7}: median accuracy {row.accuracy:.4f}, macro AUC {row.auc:.4f}")
        print(f"{len(reports)} reports written to {path}")
    elif cmd == "ablate":
        rows, path = run.ablate(args.seeds or cfg.seeds)
        print(path.read_text(), end="")
        print(f"ablation table written to {path}")
    elif cmd == "inspect":
        for p in run.inspect(args.what, args.seed, args.k, args.n_images, args.index, args.mask):
            print(f"wrote {p}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (2) and --help (0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return dispatch(args)
    except EXPECTED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
