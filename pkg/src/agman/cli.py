"""``agman`` command line: train, evaluate, retrieve, export attention, make toy data.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import (
    AttributeSpace,
    DatasetSplit,
    ImageStore,
    ManifestError,
    SamplingError,
    generate_synthetic,
    load_manifest,
    load_triplets,
    sample_triplets,
    write_synthetic,
)
from .evaluation import attention_map, evaluate_map, evaluate_triplets, export_attention, retrieve
from .training import (
    CheckpointError,
    TrainingAborted,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad command-line input; exit code 2."""


# -- config plumbing ----------------------------------------------------------

def _run_config(args, base: RunConfig | None = None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif base is not None:
        cfg = base
    else:
        cfg = RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        cfg = cfg.override(key.strip(), value)
    if args.seed is not None:
        cfg = cfg.override("seed", str(args.seed))
    return cfg


def _space_for(cfg: RunConfig, manifest: Path) -> AttributeSpace:
    if cfg.space is not None:
        return cfg.space
    sidecar = manifest.parent / "space.json"
    if sidecar.exists():
        return AttributeSpace.from_dict(json.loads(sidecar.read_text()))
    raise ConfigError("space", f"missing required value (and no space.json next to {manifest})")


def _checkpoint_and_config(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    stored = load_checkpoint(args.checkpoint)
    cfg = _run_config(args, stored.config)
    if cfg.space is None:
        cfg.space = stored.space
    ckpt = load_checkpoint(args.checkpoint, expect=cfg)
    return ckpt, cfg


def _eval_split(args, cfg: RunConfig, space: AttributeSpace) -> DatasetSplit:
    manifest = args.manifest or cfg.data.eval_manifest
    if manifest is None:
        raise ConfigError("data.eval_manifest", "missing required value (or pass --manifest)")
    split = load_manifest(manifest, space, role="test")
    if not split.query_ids:
        split = split.with_query_partition(cfg.data.query_fraction, cfg.seed)
    return split


def _attribute(space: AttributeSpace, name: str) -> int:
    try:
        return space.index(name)
    except KeyError:
        raise UsageError(f"unknown attribute {name!r}; valid names: {', '.join(space.names)}") from None


def _out_dir(args, default: str | Path) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("--config is required for train")
    cfg = _run_config(args)
    cfg.require("data.train_manifest")
    manifest = Path(cfg.data.train_manifest)
    space = _space_for(cfg, manifest)
    if cfg.space is None:
        cfg.space = space
    cfg.validate()
    split = load_manifest(manifest, space, role="train")
    store = ImageStore(split, cfg.image_size, args.workers)
    ckpt, history = train(split, space, cfg, store=store, workers=args.workers)
    if history:
        ckpt.metrics = {k: history[-1][k] for k in ("L_c", "L_triplet", "total", "w0", "w1")}
    out = _out_dir(args, cfg.output_dir)
    save_checkpoint(ckpt, out)
    write_history(history, out / "history.csv")
    print(out)
    return 0


def cmd_eval_map(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = _eval_split(args, cfg, ckpt.space)
    store = ImageStore(split, cfg.image_size, args.workers)
    report = evaluate_map(ckpt.model, split, ckpt.space, store)
    text = report.to_json()
    (_out_dir(args, args.checkpoint) / "eval_map.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_eval_triplet(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = _eval_split(args, cfg, ckpt.space)
    path = args.triplets or cfg.data.triplets
    if path:
        triplets = load_triplets(path, split, ckpt.space)
    else:
        n = ckpt.space.n
        per_attr = [cfg.data.eval_triplets // n + (a < cfg.data.eval_triplets % n) for a in range(n)]
        triplets = [t for a, k in enumerate(per_attr) if k
                    for t in sample_triplets(split, a, k, seed=cfg.seed * 1_000_003 + a)]
    store = ImageStore(split, cfg.image_size, args.workers)
    report = evaluate_triplets(ckpt.model, triplets, store, cfg.train.margin, cfg.train.triplet_mode)
    text = report.to_json()
    (_out_dir(args, args.checkpoint) / "eval_triplet.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_retrieve(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    a = _attribute(ckpt.space, args.attribute)
    split = _eval_split(args, cfg, ckpt.space)
    if args.query not in split:
        raise UsageError(f"unknown query id {args.query!r}")
    store = ImageStore(split, cfg.image_size, args.workers)
    result = retrieve(ckpt.model, args.query, a, split, args.k, store)
    if result.note:
        print(f"note: {result.note}", file=sys.stderr)
    text = result.to_csv()
    (_out_dir(args, args.checkpoint) / f"ranking_{args.query}_{args.attribute}.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export_attention(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    a = _attribute(ckpt.space, args.attribute)
    split = _eval_split(args, cfg, ckpt.space)
    if args.image not in split:
        raise UsageError(f"unknown image id {args.image!r}")
    image = ImageStore(split, cfg.image_size).get([args.image])[0]
    amap = attention_map(ckpt.model, image, a)
    grid, side = export_attention(amap, _out_dir(args, args.checkpoint), args.image, args.attribute)
    print(grid)
    print(side)
    return 0


def cmd_synth_data(args) -> int:
    if args.space:
        try:
            space = AttributeSpace.parse(args.space)
        except ValueError as exc:
            raise UsageError(f"--space: {exc}") from None
    elif args.config:
        space = _run_config(args).space
        if space is None:
            raise ConfigError("space", "missing required value (or pass --space)")
    else:
        raise UsageError("--space or --config is required")
    if args.per_subclass < 1:
        raise UsageError(f"--per-subclass must be >= 1, got {args.per_subclass}")
    if args.image_size < 16:
        raise UsageError(f"--image-size must be >= 16, got {args.image_size}")
    if not args.out:
        raise UsageError("--out is required for synth-data")
    split = generate_synthetic(space, args.per_subclass, args.image_size, seed=args.seed or 0)
    print(write_synthetic(split, space, args.out))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-map": cmd_eval_map,
    "eval-triplet": cmd_eval_triplet,
    "retrieve": cmd_retrieve,
    "export-attention": cmd_export_attention,
    "synth-data": cmd_synth_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--checkpoint", help="checkpoint directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1, help="image decoding threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5")
    common.add_argument("--manifest", help="evaluation manifest (overrides data.eval_manifest)")

    parser = argparse.ArgumentParser(prog="agman", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    sub.add_parser("eval-map", parents=[common], help="attribute-specific retrieval MAP")
    p = sub.add_parser("eval-triplet", parents=[common], help="triplet relation prediction")
    p.add_argument("--triplets", help="triplet file (JSON lines); sampled from the manifest if absent")
    p = sub.add_parser("retrieve", parents=[common], help="top-k ranking for one query")
    p.add_argument("--query", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--k", type=int, default=10)
    p = sub.add_parser("export-attention", parents=[common], help="write a spatial attention map")
    p.add_argument("--image", required=True)
    p.add_argument("--attribute", required=True)
    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic manifest and images")
    p.add_argument("--space", help="attribute space, e.g. 'collar:4,sleeve:3'")
    p.add_argument("--per-subclass", type=int, default=12)
    p.add_argument("--image-size", type=int, default=64)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("AGMAN_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"agman {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, CheckpointError, ManifestError, SamplingError, ValueError, KeyError,
            OSError) as exc:
        print(f"agman {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
