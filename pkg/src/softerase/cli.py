"""Command-line front end.

Verbs: ``generate``, ``train``, ``evaluate``, ``curves``, ``selfcheck``.
Every ``RunConfig`` field is also a flag (``n_test`` -> ``--n-test``); a
``--config`` file supplies defaults and flags override it. The worker count
comes from ``SOFTERASE_WORKERS`` (default 1).

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric or protocol error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, coerce_overrides, load_config, worker_count
from .corpus import SPLITS, generate_synthetic, load_corpus, write_corpus
from .errors import ParameterError, SoftEraseError
from .evaluation import PATH_DATA, PATH_TRAIN, emit_curves, run_evaluation
from .model import accuracy, save_params, train_model
from .numerics import rng_for
from .selfcheck import run_checks

EXIT_USAGE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    for f in fields(RunConfig):
        parser.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE"
        )


def _config(args) -> RunConfig:
    raw = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, **coerce_overrides(raw))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softerase", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic train/dev/test corpora as JSONL")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the toy classifier and write a parameter file")
    p.add_argument("--out", required=True, help="parameter file to write")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="run the full faithfulness / diagnosticity sweep")
    _add_config_flags(p)

    p = sub.add_parser("curves", help="(re)emit per-ratio curve files for a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("selfcheck", help="run the fast invariant suite")
    p.add_argument("--draws", type=int, default=10)
    return parser


def _generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpora = generate_synthetic(cfg.synthetic_spec(), rng_for(cfg.seed, [PATH_DATA]))
    for split in SPLITS:
        write_corpus(corpora[split], out / f"{split}.jsonl")
        print(f"{split}: {len(corpora[split])} records -> {out / f'{split}.jsonl'}")
    return 0


def _train(args) -> int:
    cfg = _config(args)
    if cfg.train_corpus is not None:
        corpus = load_corpus(
            cfg.train_corpus, vocab_size=cfg.vocab_size, num_classes=cfg.num_classes,
            max_len=cfg.max_len,
        )
    else:
        corpus = generate_synthetic(cfg.synthetic_spec(), rng_for(cfg.seed, [PATH_DATA]))["train"]
    result = train_model(
        corpus, cfg.train_config(), rng_for(cfg.seed, [PATH_TRAIN]),
        vocab_size=cfg.vocab_size, num_classes=cfg.num_classes, dim=cfg.dim, max_len=cfg.max_len,
    )
    save_params(result.params, args.out)
    print(
        f"loss {result.loss_history[0]:.4f} -> {result.loss_history[-1]:.4f}, "
        f"train accuracy {accuracy(corpus, result.params):.3f}; wrote {args.out}"
    )
    return 0


def _evaluate(args) -> int:
    cfg = _config(args)
    run_dir = run_evaluation(cfg, workers=worker_count())
    print(f"wrote {run_dir}")
    return 0


def _selfcheck(args) -> int:
    results = run_checks(draws=args.draws)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return _generate(args)
        if args.command == "train":
            return _train(args)
        if args.command == "evaluate":
            return _evaluate(args)
        if args.command == "curves":
            for path in emit_curves(args.run_dir):
                print(f"wrote {path}")
            return 0
        if args.command == "selfcheck":
            return _selfcheck(args)
    except ParameterError as exc:
        print(f"softerase: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SoftEraseError as exc:
        print(f"softerase: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
