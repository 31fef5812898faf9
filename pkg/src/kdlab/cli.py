"""Command-line entry point: ``kdlab run|sweep|dump-logits|accept|make-corpus``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, KDLabError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _cmd_run(args) -> int:
    from .runner import run
    directory, _ = run(args.config, args.out)
    print(directory)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .runner import parse_values, sweep
    directory, _ = sweep(args.config, args.axis, parse_values(args.values), args.out)
    print(directory / "summary.csv")
    return EXIT_OK


def _cmd_dump(args) -> int:
    from .runner import dump_logits, resolve_dataset
    print(dump_logits(args.checkpoint, resolve_dataset(args.data), args.tau, args.out))
    return EXIT_OK


def _cmd_accept(args) -> int:
    from .acceptance import run_acceptance
    report = run_acceptance(quick=args.quick, out_dir=args.out)
    return EXIT_OK if all(r.passed for r in report.results) else EXIT_FAIL


def _cmd_corpus(args) -> int:
    from .datasets import default_data_root, write_digit_corpus
    root = Path(args.root) if args.root else default_data_root() / f"seed{args.seed}-{args.train}-{args.test}"
    paths = write_digit_corpus(root, args.train, args.test, args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="run directory (default: $KDLAB_OUT/<name>)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="sweep one axis of a config")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated, e.g. 0,0.004,0.02")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_sweep)

    d = sub.add_parser("dump-logits", help="write per-sample logits, tempered probabilities and embeddings")
    d.add_argument("checkpoint")
    d.add_argument("data", help="tensor file, IDX corpus directory, or digits[:train|test]")
    d.add_argument("--tau", type=float, default=4.0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_dump)

    a = sub.add_parser("accept", help="run the acceptance suite")
    a.add_argument("--quick", action="store_true", help="one seed, shortened schedules (smoke test only)")
    a.add_argument("--out")
    a.set_defaults(func=_cmd_accept)

    c = sub.add_parser("make-corpus", help="generate the procedural digit corpus as IDX files")
    c.add_argument("--root")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--train", type=int, default=400, help="train images per class")
    c.add_argument("--test", type=int, default=200, help="test images per class")
    c.set_defaults(func=_cmd_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"kdlab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KDLabError as exc:
        print(f"kdlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"kdlab: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
