"""Command-line interface.

    intmt generate-data --config run.cfg
    intmt train-fp32    --config run.cfg
    intmt qat           --config run.cfg [--bits 6] [--joint]
    intmt eval          --checkpoint runs/.../model.qatf --mode int
    intmt inspect       runs/.../model.qatf

Exit codes: 0 success, 1 usage, 2 data/config/checkpoint error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys

from . import config as C
from . import pipeline
from .errors import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    ConfigurationError,
    DataError,
    DivergenceError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract wants 1
    def error(self, message):
        raise _UsageError(message)


def _add_config_flags(p, seed=True):
    p.add_argument("--config", metavar="PATH",
                   help="run configuration file (defaults apply if omitted)")
    if seed:
        p.add_argument("--seed", type=int, metavar="N", help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="intmt",
                     description="integer-quantized Transformer training toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("generate-data", help="write synthetic corpora")
    _add_config_flags(g)

    t = sub.add_parser("train-fp32", help="train the float baseline")
    _add_config_flags(t)
    t.add_argument("--resume", metavar="CKPT",
                   help="continue a previous fp32 run from its checkpoint")

    q = sub.add_parser("qat", help="run the six-phase quantization schedule")
    _add_config_flags(q)
    q.add_argument("--bits", type=int, choices=(6, 8, 16),
                   help="integer width (overrides config)")
    q.add_argument("--from-checkpoint", metavar="CKPT", dest="from_checkpoint",
                   help="fp32 starting point (default: <workdir>/fp32/model.qatf)")
    q.add_argument("--joint", action="store_true",
                   help="demonstrate simultaneous weight+threshold training")

    e = sub.add_parser("eval", help="decode and score a test corpus")
    _add_config_flags(e)
    e.add_argument("--checkpoint", metavar="CKPT", required=True)
    e.add_argument("--mode", choices=("fp32", "fake", "int"), required=True)
    e.add_argument("--bits", type=int, choices=(6, 8, 16),
                   help="expected checkpoint width (mismatch is an error)")
    e.add_argument("--beam", type=int, metavar="K", help="beam size")
    e.add_argument("--alpha", type=float, metavar="F", help="length penalty strength")
    e.add_argument("--split", choices=pipeline.SPLITS, default="test")
    e.add_argument("--baseline", metavar="REPORT",
                   help="report.tsv of the fp32 run, enables relative BLEU")
    e.add_argument("--out", metavar="DIR", help="report directory")

    i = sub.add_parser("inspect", help="list checkpoint contents")
    i.add_argument("checkpoint", metavar="CKPT")
    return parser


def _load_cfg(args, **overrides) -> C.RunConfig:
    cfg = C.load_config(args.config) if args.config else C.RunConfig()
    seed = getattr(args, "seed", None)
    return C.with_overrides(cfg, seed=seed, **overrides)


def _dispatch(args) -> int:
    if args.command == "generate-data":
        pipeline.generate_data(_load_cfg(args))
        return EXIT_OK

    if args.command == "train-fp32":
        pipeline.run_train_fp32(_load_cfg(args), resume=args.resume)
        return EXIT_OK

    if args.command == "qat":
        cfg = _load_cfg(args, bits=args.bits)
        source = args.from_checkpoint
        if source is None:
            source = f"{pipeline.fp32_dir(cfg)}/model.qatf"
        pipeline.run_qat(cfg, source, joint=args.joint)
        return EXIT_OK

    if args.command == "eval":
        cfg = C.load_config(args.config) if args.config else None
        pipeline.run_eval(args.checkpoint, args.mode, cfg=cfg, bits=args.bits,
                          beam=args.beam, alpha=args.alpha, seed=args.seed,
                          split=args.split, baseline=args.baseline,
                          out_dir=args.out)
        return EXIT_OK

    if args.command == "inspect":
        print(pipeline.inspect_checkpoint(args.checkpoint))
        return EXIT_OK

    raise _UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigurationError, CheckpointFormatError,
            CheckpointIntegrityError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
