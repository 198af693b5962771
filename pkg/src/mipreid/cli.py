"""Command line entry point: ``mipreid <gen-data|train|eval|ablate|dump>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from mipreid.checkpoint import load_checkpoint
from mipreid.config import RunConfig, load_run_config
from mipreid.dataset import SynthDataset, SynthSpec, generate_dataset
from mipreid.errors import DimensionMismatchError, MIPError
from mipreid.evaluator import TABLE_HEADER, evaluate_all, write_results
from mipreid.trainer import (
    ABLATION_HEADER,
    DEFAULT_MATRIX,
    ablate,
    dataset_features,
    dump_diagnostics,
    mean_by_config,
    train,
)

EXIT_INVALID = 2
EXIT_CELL_FAILED = 3


def _config(args) -> RunConfig:
    return load_run_config(args.config, args.set)


def _load_data(path, cfg) -> SynthDataset:
    ds = SynthDataset.load(path, channels=cfg.model.channels)
    if ds.images.shape[1:] != (cfg.model.channels, cfg.model.image_height, cfg.model.image_width):
        raise DimensionMismatchError(
            f"dataset images {ds.images.shape[1:]} do not match the model config "
            f"({cfg.model.channels}, {cfg.model.image_height}, {cfg.model.image_width})"
        )
    return ds


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = {"image_height": cfg.model.image_height, "image_width": cfg.model.image_width} | cfg.data
    spec = SynthSpec(**data)
    ds = generate_dataset(spec)
    ds.save(args.out)
    print(f"wrote {len(ds)} images ({len(ds.train_ids)} train / {len(ds.test_ids)} test ids) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data, cfg)
    result = train(cfg.model, cfg.train, ds, args.out)
    print(f"steps={len(result.metrics) - 1}")
    print(f"best_epoch={result.best_epoch}")
    print(f"best_val_map={result.best_val_map:.6f}")
    print(f"seconds={result.seconds:.2f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data, cfg)
    model = load_checkpoint(args.checkpoint)
    feats = dataset_features(model, ds, ds.select(ds.test_ids))
    summaries = evaluate_all(ds, feats, draws=args.draws, seed=cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(summaries, out / "results.csv", out / "results.kv")
    print(TABLE_HEADER)
    for s in summaries:
        print(s.row())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data, cfg)
    configs = tuple(args.configs.split(",")) if args.configs else tuple(cfg.ablation.get("configs", DEFAULT_MATRIX))
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else tuple(cfg.ablation.get("seeds", (0, 1, 2)))
    draws = args.draws if args.draws is not None else int(cfg.ablation.get("draws", 10))
    out = Path(args.out)
    rows = ablate(cfg.model, cfg.train, ds, configs, seeds, out, draws)
    print(ABLATION_HEADER)
    for r in rows:
        print(r.row())
    print("---")
    for name, value in mean_by_config(rows).items():
        print(f"mean_rank1.{name}={value:.6f}")
    if not args.no_figure:
        from mipreid.report import plot_ablation

        print(f"figure={plot_ablation(rows, out / 'ablation.png')}")
    return EXIT_CELL_FAILED if any(r.status != "ok" for r in rows) else 0


def cmd_dump(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data, cfg)
    model = load_checkpoint(args.checkpoint)
    ids = ds.test_ids if args.split == "test" else ds.train_ids
    indices = ds.select(ids)
    if args.limit:
        indices = indices[: args.limit]
    path = dump_diagnostics(model, ds, np.asarray(indices), args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipreid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML file with model/train/data/ablation sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic dataset to disk")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate a checkpoint on the test identities")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--draws", type=int, default=10)

    p = add("ablate", cmd_ablate, "run the ablation matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--configs", help="comma-separated cell names")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--draws", type=int)
    p.add_argument("--no-figure", action="store_true")

    p = add("dump", cmd_dump, "write attention and prompt diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--limit", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (MIPError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
