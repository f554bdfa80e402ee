#!/usr/bin/env python3
"""
PANet command-line entry point.

    python main.py gen-data  --regime arbitrary --out data/train.ds
    python main.py train     --data data/train.ds --val data/test.ds --out runs/a
    python main.py eval      --data data/test.ds --checkpoint runs/a/checkpoint.ck
    python main.py gradcheck --config tiny
    python main.py ablate    --suite component --out runs/ablation
    python main.py inspect   --data data/test.ds --checkpoint runs/a/checkpoint.ck --out runs/a/inspect

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import csv
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

from ablation import SUITES, median_by_setting, run_ablation
from checkpoint import load_checkpoint
from config import REGIMES, SAMPLERS, SPLITS, Config, RunConfig, resolve_run_config, split_seed
from dataset_store import dataset_digest, dataset_stats, read_dataset, write_dataset
from exceptions import ArtifactIOError, PanetError, UsageError
from gradcheck import run_gradcheck
from introspect import inspect_sample, mean_part_diversity, write_json
from panet_model import PANetModel
from shapegen import MultiViewDataset, build_dataset, restrict_views
from trainer import AdamState, evaluate, fit

logger = logging.getLogger(__name__)


class RunManifest(BaseModel):
    """What a command was asked to do; written before any long computation"""

    command: str
    version: str = Config.VERSION
    seed: int
    config: Dict[str, Any]
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    dataset_digest: Optional[str] = None


def write_manifest(manifest: RunManifest, path: str) -> None:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(manifest.model_dump_json(indent=2))
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write run manifest: {e}")
        raise ArtifactIOError(f"{path}: cannot write run manifest: {e}") from e


def configure_logging() -> None:
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def resolve(args: argparse.Namespace, **overrides: Any) -> RunConfig:
    """Resolved config whose seed comes from --seed, else the config file, else PANET_SEED"""
    run = resolve_run_config(args.config, {"seed": args.seed, **overrides})
    if "seed" not in run.train.model_fields_set:
        run = run.model_copy(update={"train": run.train.model_copy(update={"seed": Config.SEED})})
    return run


def manifest_dir(args: argparse.Namespace) -> str:
    """Where a directory-output command records its manifest when --out is absent"""
    return args.out or os.path.join(Config.RUNS_DIR, args.command)


def load_dataset_for(run: RunConfig, path: str) -> MultiViewDataset:
    dataset = read_dataset(path)
    if dataset.num_classes != run.network.num_classes or dataset.resolution != run.network.resolution:
        raise UsageError(f"{path}: dataset has K={dataset.num_classes}, R={dataset.resolution} but the "
                         f"configuration expects K={run.network.num_classes}, R={run.network.resolution}")
    return dataset


def load_model(run: RunConfig, checkpoint_path: Optional[str], seed: int) -> PANetModel:
    if checkpoint_path:
        checkpoint = load_checkpoint(checkpoint_path, expected=run.network)
        return PANetModel(checkpoint.network, checkpoint.model_params())
    logger.warning("No checkpoint given; using a freshly initialized model")
    return PANetModel(run.network, seed=seed)


def require(value: Optional[str], flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required for this command")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    out = require(args.out, "--out")
    run = resolve(args, regime=args.regime, sampler=args.sampler)
    seed = run.train.seed
    per_class = args.count or (run.data.train_per_class if args.split == "train" else run.data.test_per_class)
    manifest = RunManifest(command="gen-data", seed=seed, config=run.to_flat(), outputs={"dataset": out})
    write_manifest(manifest, f"{out}.manifest.json")

    dataset = build_dataset(run.train.regime, per_class, run.network.num_classes, run.network.resolution,
                            seed=split_seed(seed, args.split), sampler=run.train.sampler,
                            min_views=run.data.min_views, max_views=run.data.max_views, fps_pool=run.data.fps_pool)
    digest = write_dataset(dataset, out)
    write_manifest(manifest.model_copy(update={"dataset_digest": digest}), f"{out}.manifest.json")

    stats = dataset_stats(dataset)
    print(f"✅ Wrote {stats['sample_count']} samples to {out}")
    print(f"   K={stats['num_classes']}  R={stats['resolution']}  regime={run.train.regime}  "
          f"sampler={run.train.sampler}")
    print(f"   per class: {stats['class_counts']}")
    print(f"   views:     {stats['view_histogram']}")
    print(f"   sha256:    {digest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data = require(args.data, "--data")
    out = require(args.out, "--out")
    run = resolve(args, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                  gamma=args.gamma, smoothing=args.smoothing, augment=False if args.no_augment else None)
    seed = run.train.seed
    inputs = {"data": data}
    if args.val:
        inputs["val"] = args.val
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    write_manifest(RunManifest(command="train", seed=seed, config=run.to_flat(), inputs=inputs,
                               outputs={"checkpoint": os.path.join(out, "checkpoint.ck"),
                                        "epoch_log": os.path.join(out, "epoch_log.csv")},
                               dataset_digest=dataset_digest(data)),
                   os.path.join(out, "manifest.json"))

    train = load_dataset_for(run, data)
    val = load_dataset_for(run, args.val) if args.val else None
    state = None
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint, expected=run.network)
        model = PANetModel(checkpoint.network, checkpoint.model_params())
        state = AdamState.from_checkpoint(checkpoint)
    else:
        model = PANetModel(run.network, seed=seed)

    print(f"🚀 Training on {len(train)} samples for {run.train.epochs} epochs "
          f"({model.params.count()} parameters)")
    records = fit(model, train, run.train, out_dir=out, val=val, state=state, workers=args.workers)
    if records:
        last = records[-1]
        print(f"✅ Final epoch {last.epoch}: mean loss {last.mean_loss:.4f}, "
              f"train instance acc {last.train_inst_acc:.3f}")
        if last.val_inst_acc is not None:
            print(f"   validation instance acc {last.val_inst_acc:.3f}, class acc {last.val_class_acc:.3f}")
    print(f"💾 Checkpoint: {os.path.join(out, 'checkpoint.ck')}")
    return 0


def write_confusion_csv(confusion: List[List[int]], path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["true\\pred"] + [str(k) for k in range(len(confusion))])
            for k, row in enumerate(confusion):
                writer.writerow([str(k)] + [str(c) for c in row])
    except OSError as e:
        raise ArtifactIOError(f"{path}: cannot write confusion matrix: {e}") from e


def cmd_eval(args: argparse.Namespace) -> int:
    data = require(args.data, "--data")
    run = resolve(args)
    seed = run.train.seed
    run_dir = manifest_dir(args)
    inputs = {"data": data, **({"checkpoint": args.checkpoint} if args.checkpoint else {})}
    outputs = {"confusion": os.path.join(args.out, "confusion.csv")} if args.out else {}
    write_manifest(RunManifest(command="eval", seed=seed, config=run.to_flat(), inputs=inputs,
                               outputs=outputs, dataset_digest=dataset_digest(data)),
                   os.path.join(run_dir, "manifest.json"))

    dataset = load_dataset_for(run, data)
    if args.views is not None:
        dataset = MultiViewDataset(num_classes=dataset.num_classes, resolution=dataset.resolution,
                                   samples=[restrict_views(s, args.views) for s in dataset.samples])
    model = load_model(run, args.checkpoint, seed)
    metrics = evaluate(model, dataset, args.workers)

    print(f"📊 per_instance_acc={metrics.per_instance_acc:.4f} per_class_acc={metrics.per_class_acc:.4f} "
          f"(n={len(dataset)})")
    if args.out:
        write_confusion_csv(metrics.confusion, os.path.join(args.out, "confusion.csv"))
        write_json(metrics.model_dump(), os.path.join(args.out, "metrics.json"))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = resolve(args)
    run_dir = manifest_dir(args)
    report_path = os.path.join(run_dir, "gradcheck.json")
    write_manifest(RunManifest(command="gradcheck", seed=run.train.seed, config=run.to_flat(),
                               outputs={"report": report_path}),
                   os.path.join(run_dir, "manifest.json"))

    report = run_gradcheck(run.network, seeds=range(args.seeds), coordinates=args.coordinates, views=args.views)
    write_json(report.model_dump(), report_path)
    for failure in report.failures():
        print(f"❌ {failure.name} (seed {failure.seed}): {failure.max_relative_error:.3e}")
    print(f"{'✅' if report.passed else '❌'} {len(report.results)} checks, "
          f"max relative error {report.max_error:.3e}")
    return 0 if report.passed else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    out = require(args.out, "--out")
    run = resolve(args, epochs=args.epochs)
    seeds = list(range(run.train.seed, run.train.seed + args.seeds))
    path = os.path.join(out, f"ablation_{args.suite}.csv")
    write_manifest(RunManifest(command="ablate", seed=run.train.seed, config=run.to_flat(),
                               outputs={"table": path}),
                   os.path.join(out, "manifest.json"))
    rows = run_ablation(args.suite, run, seeds=seeds, workers=args.workers, out_path=path)
    medians = median_by_setting(rows)
    for row in rows:
        if row.seed == "mean":
            print(f"📊 {row.setting:>10}: instance {row.per_instance_acc:.3f} (median {medians[row.setting]:.3f})  "
                  f"class {row.per_class_acc:.3f}")
    print(f"✅ Table written to {path}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    data = require(args.data, "--data")
    out = require(args.out, "--out")
    run = resolve(args)
    seed = run.train.seed
    inputs = {"data": data, **({"checkpoint": args.checkpoint} if args.checkpoint else {})}
    write_manifest(RunManifest(command="inspect", seed=seed, config=run.to_flat(), inputs=inputs,
                               outputs={"dir": out}, dataset_digest=dataset_digest(data)),
                   os.path.join(out, "manifest.json"))

    dataset = load_dataset_for(run, data)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"--sample {args.sample} outside [0, {len(dataset)})")
    model = load_model(run, args.checkpoint, seed)
    summary = inspect_sample(model, dataset.samples[args.sample], out)
    if model.config.parts >= 2:
        summary["dataset_mean_offdiag"] = mean_part_diversity(model, dataset, args.workers)
    write_json(summary, os.path.join(out, "diversity.json"))
    print(f"🔍 Sample {args.sample}: label {summary['label']}, prediction {summary['prediction']}, "
          f"{summary['overlays']} overlays")
    if "dataset_mean_offdiag" in summary:
        print(f"   mean |off-diagonal| part correlation over {len(dataset)} samples: "
              f"{summary['dataset_mean_offdiag']:.4f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def add_common_flags(parser: argparse.ArgumentParser, config: str = "default") -> None:
    parser.add_argument("--config", default=config, help="preset name or flat JSON config file")
    parser.add_argument("--seed", type=int, default=None, help=f"run seed (default {Config.SEED})")
    parser.add_argument("--out", help="output file (gen-data) or directory")
    parser.add_argument("--data", help="dataset file")
    parser.add_argument("--checkpoint", help="checkpoint file")
    parser.add_argument("--workers", type=int, default=Config.WORKERS, help="evaluation threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panet", description="Part-aware multi-view 3D recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic dataset")
    add_common_flags(gen)
    gen.add_argument("--regime", choices=REGIMES)
    gen.add_argument("--sampler", choices=SAMPLERS)
    gen.add_argument("--split", choices=SPLITS, default="train")
    gen.add_argument("--count", type=int, help="objects per class (overrides the split's config value)")

    train = sub.add_parser("train", help="train a model")
    add_common_flags(train)
    train.add_argument("--val", help="validation dataset evaluated after every epoch")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--gamma", type=float)
    train.add_argument("--smoothing", type=float)
    train.add_argument("--no-augment", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common_flags(ev)
    ev.add_argument("--views", type=int, help="keep only the first N views of every sample")

    grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    add_common_flags(grad, config="tiny")
    grad.add_argument("--seeds", type=int, default=5)
    grad.add_argument("--coordinates", type=int, default=50)
    grad.add_argument("--views", type=int, default=2)

    abl = sub.add_parser("ablate", help="run an ablation suite")
    add_common_flags(abl)
    abl.add_argument("--suite", choices=sorted(SUITES), required=True)
    abl.add_argument("--seeds", type=int, default=3)
    abl.add_argument("--epochs", type=int)

    ins = sub.add_parser("inspect", help="attention overlays and part correlation")
    add_common_flags(ins)
    ins.add_argument("--sample", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PanetError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
