"""Command-line entry point: ``mhdepth {generate,train,eval,decode,gradcheck}``.

Exit status: 0 on success, 1 on usage or input errors, 2 on numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args):
    from .config import ExperimentConfig
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


def cmd_generate(args) -> int:
    from .harness.dataset import generate_dataset
    from .sampler import derive_seed

    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seeds={"data": args.seed, "test": derive_seed(args.seed, 1)})
    out = Path(args.out)
    n_train = cfg.data.n_train if args.n is None else args.n
    generate_dataset(cfg, n_train, cfg.seeds.data, out / "train")
    if not args.train_only:
        generate_dataset(cfg, cfg.data.n_test, cfg.seeds.test, out / "test")
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness.dataset import load_dataset
    from .harness.train import train

    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seeds={"model": args.seed, "shuffle": args.seed})
    data = Path(args.data)
    train_set = load_dataset(data / "train")
    val_set = load_dataset(data / "test") if (data / "test").exists() and not args.no_val else None

    def progress(row):
        cols = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
        print(cols, flush=True)

    train(cfg, train_set, val_set=val_set, out_dir=args.out, progress=progress,
          validate_every=args.validate_every)
    print(f"checkpoints and train_log.csv in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.dataset import load_dataset
    from .harness.evaluate import evaluate_models, write_reports

    cfg = _load_config(args) if args.config else None
    cfg, models, _ = load_checkpoint(args.checkpoint, cfg)
    ds = load_dataset(args.data)
    reports = evaluate_models(cfg, models, ds, protocols=tuple(args.protocol))
    write_reports(reports, args.out)
    for r in reports.values():
        print(f"{r.protocol:6s} mpjpe={r.mpjpe:.3f} n_mpjpe={r.n_mpjpe:.3f} "
              f"p_mpjpe={r.p_mpjpe:.3f} pck={r.pck:.4f} auc={r.auc:.4f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    from .decoder import DecoderConfig, decode
    from .fixtures import bundled_bimodal_path, read_heatmap

    path = args.heatmap or bundled_bimodal_path()
    h = read_heatmap(path)
    hyps = decode(h, DecoderConfig(n_hypo=args.n_hypo, n_w=args.n_w))
    text = json.dumps(hyps.to_json(), indent=1, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hypotheses.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, main_report

    worst, report = main_report(seed=args.seed or 0)
    print(report)
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment INI file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the relevant seed")
    common.add_argument("--out", default="out", help="output directory")

    parser = _Parser(prog="mhdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write synthetic train/test datasets")
    p.add_argument("--n", type=int, help="training samples (config value by default)")
    p.add_argument("--train-only", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="two-stage adversarial training")
    p.add_argument("--data", required=True, help="directory holding train/ (and optionally test/)")
    p.add_argument("--no-val", action="store_true", help="skip per-epoch validation")
    p.add_argument("--validate-every", type=int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="decode a dataset and write metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (records.bin + index.json)")
    p.add_argument("--protocol", action="append", choices=["single", "conf", "best"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", parents=[common], help="decode one heatmap file to hypotheses JSON")
    p.add_argument("heatmap", nargs="?", help="heatmap fixture (bundled bimodal example by default)")
    p.add_argument("--n-hypo", type=int, default=3)
    p.add_argument("--n-w", type=int, default=15)
    p.set_defaults(func=cmd_decode, out=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .harness.train import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "protocol", None) is None and args.command == "eval":
        args.protocol = ["single", "conf", "best"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
