"""``ssl-sonar`` command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import DATA_ENV, RUNS_ENV, ConfigError, load_config
from .embeddings import EmbeddingError, export_csv, extract_embeddings, save_embeddings
from .report import ReportError
from .sonar_data import (LabeledDataset, SonarDataError, SonarImage, apply_split_manifest, compute_pixel_mean,
                         extract_wild_patches, load_dataset, load_source_images, read_split_manifest,
                         save_dataset, split_dataset)
from .transfer import SPC_GRID, ProbeConfig, TransferError, baseline_raw_svm

logger = logging.getLogger("ssl_sonar")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _data_root(arg: str | None) -> Path:
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"--data not given and {DATA_ENV} is unset")
    p = Path(root)
    if not p.is_dir():
        raise UsageError(f"dataset directory {p} does not exist")
    return p


def _splits(args):
    ds = load_dataset(_data_root(args.data))
    if getattr(args, "split_manifest", None):
        return apply_split_manifest(ds, read_split_manifest(args.split_manifest))
    return split_dataset(ds, (0.70, 0.15, 0.15), args.split_seed)


def _checkpoint(path: str):
    from .pretrain import load_checkpoint
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .experiments import run_pretrain
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.dry_run:
        print(yaml.safe_dump(cfg.resolved(), sort_keys=True), end="")
        return EXIT_OK
    run = run_pretrain(cfg)
    print(run)
    return EXIT_OK


def cmd_embed(args) -> int:
    model = _checkpoint(args.checkpoint)
    if args.split == "all":
        ds = load_dataset(_data_root(args.data))
    else:
        ds = dict(zip(("train", "val", "test"), _splits(args)))[args.split]
    emb = extract_embeddings(model, args.layer, ds, args.batch_size)
    path = save_embeddings(emb, args.out)
    if args.csv:
        export_csv(emb, Path(args.out).with_suffix(".csv"))
    print(f"{path} {emb.shape[0]}x{emb.shape[1]}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiments import run_probe, write_results
    if not args.checkpoint and not args.baseline:
        raise UsageError("give at least one --checkpoint or --baseline raw")
    probe = ProbeConfig(spc_grid=args.spc, repeats=args.repeats, svm_C=args.C, seed_base=args.seed_base,
                        standardize=not args.no_standardize, jobs=args.jobs)
    train, _, test = _splits(args)
    results = []
    for ck in args.checkpoint or ():
        _checkpoint(ck)  # fail early with a usage error on a missing file
        results.extend(run_probe(ck, train, test, probe, args.layers))
    baseline = []
    if args.baseline == "raw":
        baseline = baseline_raw_svm(train, test, probe, compute_pixel_mean(train).pixel_mean)
    out = write_results(args.out, results, baseline)
    for r in results + baseline:
        print(f"{r.model_ref}\t{r.layer_name}\t{r.spc}\t{r.mean_accuracy:.2f} ± {r.std_accuracy:.2f}")
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report
    files = render_report(args.results, args.out, args.spc, _str_list(args.format), _str_list(args.tables))
    for f in files:
        print(f)
    return EXIT_OK


def cmd_wild_patches(args) -> int:
    sources = load_source_images(args.sources)
    patches = extract_wild_patches(sources, (args.size, args.size), args.count, args.seed)
    tagged = LabeledDataset(tuple(SonarImage(im.pixels, "wild", f"wild/{k:06d}.png")
                                  for k, im in enumerate(patches.images)), ("wild",), "all")
    save_dataset(tagged, args.out)
    Path(args.out, "patches.tsv").write_text(
        "".join(f"wild/{k:06d}.png\t{im.source_id}\n" for k, im in enumerate(patches.images)))
    print(f"{len(patches)} patches written to {args.out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .experiments import reproduce
    data = None
    if not args.synthetic:
        data = _data_root(args.data)
    out = args.out or os.path.join(os.environ.get(RUNS_ENV, "runs"), "reproduction")
    print(reproduce(out, data, args.scale, args.jobs, args.synthetic, args.seed, args.spc))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssl-sonar", description="Self-supervised pretraining for sonar images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help=f"class-per-directory dataset root (default ${DATA_ENV})")
        sp.add_argument("--split-seed", type=int, default=0)
        sp.add_argument("--split-manifest")

    sp = sub.add_parser("pretrain", help="train one model from a YAML config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("embed", help="extract embeddings of one layer")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--csv", action="store_true")
    data_args(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("evaluate", help="few-shot linear-SVM transfer probe")
    sp.add_argument("--checkpoint", action="append")
    sp.add_argument("--layers", type=_str_list)
    sp.add_argument("--spc", type=_int_list, default=list(SPC_GRID))
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--C", type=float, default=1.0)
    sp.add_argument("--seed-base", type=int, default=0)
    sp.add_argument("--baseline", choices=("raw",))
    sp.add_argument("--no-standardize", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True)
    data_args(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="figures and tables from result files")
    sp.add_argument("--results", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--spc", type=_int_list, default=[200])
    sp.add_argument("--format", default="png,svg", help="figure formats")
    sp.add_argument("--tables", default="md,csv", help="table formats")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("wild-patches", help="cut unlabeled patches from large images")
    sp.add_argument("--sources", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=63000)
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_wild_patches)

    sp = sub.add_parser("reproduce-paper", help="run the full pretraining and probing grid")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--synthetic", action="store_true", help="use generated stand-in corpora")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--spc", type=_int_list, help="probe grid (default: the full samples-per-class grid)")
    sp.set_defaults(func=cmd_reproduce)
    return p


USAGE_ERRORS = (UsageError, ConfigError, EmbeddingError, SonarDataError, TransferError, ReportError,
                FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
