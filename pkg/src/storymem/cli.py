"""Command-line front end.

Exit codes: 0 success, 1 configuration/validation problem, 2 runtime
failure inside an otherwise valid run, 3 a check (gradient suite) ran
but did not meet its tolerance.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from . import training as R
from .errors import ConfigError, StorymemError
from .fusion import EmbeddingTable
from .model import MemNet, load_params


def _load_config(args) -> H.ExperimentConfig:
    config = H.ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "precision", None) is not None:
        config.precision = args.precision
    return config


def _build_net(config: H.ExperimentConfig):
    config = config.resolved()
    config.validate()
    splits = H.load_experiment_data(config)
    dtype = np.float32 if config.precision == 32 else np.float64
    table = EmbeddingTable(splits[0].vocab, dim=config.model.word_dim,
                           trainable=(config.table_mode == "trainable"),
                           seed=config.model.seed, dtype=dtype)
    first_story = next(iter(splits[0].stories.values()))
    net = MemNet(config.model, table, visual_dim=first_story.visual_dim or 1,
                 dtype=dtype)
    prepared = {
        name: net.prepare(ds.stories, ds.items, config.modality)
        for name, ds in zip(("train", "val", "test"), splits)
    }
    return config, net, table, prepared


def cmd_train(args) -> int:
    config = _load_config(args)
    report = H.run_experiment(config, out_dir=args.out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    config, net, table, prepared = _build_net(_load_config(args))
    params = load_params(args.checkpoint, config.model, table=table,
                         dtype=net.dtype)
    wanted = args.split.split(",") if args.split else ["val", "test"]
    out = {}
    for split in wanted:
        if split not in prepared:
            raise ConfigError(f"unknown split {split!r}")
        loss, acc = R.evaluate(net, params, prepared[split], config.modality)
        out[split] = {"loss": loss, "accuracy": acc}
    text = json.dumps(out, sort_keys=True, indent=2)
    sys.stdout.write(text + "\n")
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = H.ablation_sweep(config, variants, seeds, out_path=args.out)
    sys.stdout.write(H.sweep_table(result))
    return 0


def cmd_gradcheck(args) -> int:
    result = H.run_gradient_suite(seed=args.seed, tolerance=args.tolerance,
                                  seeds_per_case=args.seeds_per_case)
    sys.stdout.write(result.to_text())
    return 0 if result.passed else 3


def cmd_gen_data(args) -> int:
    cfg = D.SyntheticTaskConfig(
        task=args.task,
        n_min=args.n_min,
        n_max=args.n_max,
        vocab_size=args.vocab_size,
        chunk_width=args.chunk_width,
        feature_dim=args.feature_dim,
        train_count=args.train,
        val_count=args.val,
        test_count=args.test,
        seed=args.seed,
    )
    cfg.validate()
    train_ds, val_ds, test_ds = D.generate_synthetic(cfg)
    out = Path(args.out)
    story_dir = out / "stories"
    story_dir.mkdir(parents=True, exist_ok=True)
    D.save_vocab(train_ds.vocab, out / "vocab.txt")
    for ds, name in ((train_ds, "train"), (val_ds, "val"), (test_ds, "test")):
        for story in ds.stories.values():
            D.save_story_features(story, story_dir / f"{story.story_id}.story",
                                  ds.vocab)
        D.save_qa(ds.items, out / f"{name}.qa")
    experiment = H.ExperimentConfig(
        name=f"{args.task}-files",
        source=H.SOURCE_FILES,
        paths={
            "vocab": str(out / "vocab.txt"),
            "stories": str(story_dir),
            "train_qa": str(out / "train.qa"),
            "val_qa": str(out / "val.qa"),
            "test_qa": str(out / "test.qa"),
        },
        seed=args.seed,
    )
    (out / "experiment.json").write_text(
        json.dumps(experiment.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    counts = {name: len(ds.items) for ds, name in
              ((train_ds, "train"), (val_ds, "val"), (test_ds, "test"))}
    sys.stdout.write(f"wrote {args.task} data to {out} {counts}\n")
    return 0


def cmd_export_attention(args) -> int:
    config, net, table, prepared = _build_net(_load_config(args))
    params = load_params(args.checkpoint, config.model, table=table,
                         dtype=net.dtype)
    items = prepared[args.split]
    if args.limit is not None:
        items = items[: args.limit]
    H.export_attention(net, params, items, args.out, mode=config.modality)
    sys.stdout.write(f"wrote attention for {len(items)} items to {args.out}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storymem",
        description="Train and inspect convolutional memory networks "
                    "for story question answering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment end to end")
    p.add_argument("--config", required=True, help="experiment config (json/yaml)")
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--out", default=None, help="directory for report/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None, help="comma list from train,val,test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--out", default=None, help="also write the scores as json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ablation sweep over variants and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default="full,no_rw,no_read,no_query")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default=None, help="write the sweep result json here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seeds-per-case", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate a synthetic task as files")
    p.add_argument("--task", default=D.TASK_NEEDLE,
                   choices=(D.TASK_NEEDLE, D.TASK_CHUNK, D.TASK_QUERY_SENSITIVE))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--n-min", type=int, default=8)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--chunk-width", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-attention", help="dump attention maps as json")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StorymemError as exc:
        kind = 1 if isinstance(exc, ValueError) else 2
        sys.stderr.write(f"error: {exc}\n")
        return kind
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
