"""Command-line entry point.

    labelguided gen-data --config C --outdir DATA
    labelguided train    --config C --outdir RUN --mode baseline|stage1|stage2|one-stage
    labelguided eval     --config C --outdir RUN --checkpoint CKPT [--split val]
    labelguided ablate   --config C --outdir REPORT [--jobs N]
    labelguided strip    IN OUT

Exit codes: 0 success, 2 configuration or input error, 3 failure while running.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import numerics as nx
from . import training as T
from .ablation import run_ablation
from .scene import GenerationError, SceneFormatError, generate_scene, load_split, read_manifest, write_dataset

log = logging.getLogger("labelguided")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MODES = ("baseline", "stage1", "stage2", "one-stage")
LOG_FIELDS = ["epoch", "stage", "det1", "det2", "idf", "aux", "total", "mAP@0.25", "mAP@0.5"]
_SPLIT_CODES = {"train": 0, "val": 1}


class UsageError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_resolved(outdir: Path, cfg: cfgmod.RunConfig) -> None:
    _write_json(outdir / "config.resolved.json", cfg.to_dict())


def write_log_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            out = {k: r.get(k, "") for k in LOG_FIELDS[:7]}
            out["mAP@0.25"], out["mAP@0.5"] = r.get("map25", ""), r.get("map50", "")
            w.writerow(out)


def loss_curves(rows) -> dict:
    curves = {}
    for r in rows:
        c = curves.setdefault(r["stage"], {k: [] for k in ("det1", "det2", "idf", "aux", "total")})
        for k in c:
            c[k].append(r[k])
    return curves


def generate_dataset(cfg: cfgmod.RunConfig):
    """Train and val scenes from independent per-scene seed streams."""
    d = cfg.data
    splits = {}
    for split, n in (("train", d.n_train), ("val", d.n_val)):
        code = _SPLIT_CODES[split]
        splits[split] = [generate_scene(d.gen, np.random.SeedSequence([d.seed, code, i]), f"{split}_{i:05d}")
                         for i in range(n)]
    return splits


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(cfg, args) -> int:
    root = Path(args.outdir or cfg.data.root)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise UsageError(f"{root} is not empty; pass --force to overwrite")
        shutil.rmtree(root)
    splits = generate_dataset(cfg)
    write_dataset(root, splits, {"seed": cfg.data.seed, "n_train": cfg.data.n_train, "n_val": cfg.data.n_val})
    _write_resolved(root, cfg)
    log.info("wrote %d train and %d val scenes to %s", len(splits["train"]), len(splits["val"]), root)
    return EXIT_OK


def _upstream(path, ckpt_dir: Path, name: str) -> T.ModelBundle:
    path = Path(path) if path else ckpt_dir / f"{name}.json"
    if not path.exists():
        raise UsageError(f"required {name} checkpoint not found: {path}")
    return T.load_checkpoint(path)


def cmd_train(cfg, args) -> int:
    mode = args.mode
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    outdir = Path(args.outdir)
    ckpt_dir = outdir / "checkpoints"
    stem = mode.replace("-", "_")
    target = ckpt_dir / f"{stem}.json"
    if target.exists() and not args.force:
        raise UsageError(f"{target} already exists; pass --force to overwrite")
    # resolve every prerequisite before any training starts
    upstream = None
    if mode == "stage1":
        upstream = _upstream(args.checkpoint, ckpt_dir, "baseline")
    elif mode == "stage2":
        upstream = _upstream(args.checkpoint, ckpt_dir, "stage1")
        if not upstream.has_auxiliary:
            raise UsageError("stage 2 needs a stage-1 checkpoint with its auxiliary branch; got a stripped one")
    train = load_split(cfg.data.root, "train")
    val = load_split(cfg.data.root, cfg.eval_split)
    rows = []
    t = cfg.train
    if mode == "baseline":
        bundle = T.pretrain_baseline(t, train, cfg.model, val=val, log_rows=rows)
    elif mode == "stage1":
        bundle = T.train_stage1(t, upstream, train, cfg.model, val=val, log_rows=rows)
    elif mode == "stage2":
        bundle = T.train_stage2(t, upstream, train, val=val, log_rows=rows)
    else:
        bundle = T.train_one_stage(t, train, cfg.model, val=val, log_rows=rows)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(target, bundle)
    write_log_csv(outdir / "logs" / f"{stem}.csv", rows)
    metrics = T.evaluate(T.strip_auxiliary(bundle), val, t)
    metrics.update({"mode": mode, "split": cfg.eval_split, "loss_curves": loss_curves(rows),
                    "config_hash": cfg.digest()})
    _write_json(outdir / "metrics.json", metrics)
    _write_json(outdir / f"metrics_{stem}.json", metrics)
    _write_resolved(outdir, cfg)
    log.info("%s: mAP@0.25=%.4f mAP@0.5=%.4f", mode, metrics["mAP@0.25"], metrics["mAP@0.5"])
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    split = args.split or cfg.eval_split
    if split not in read_manifest(cfg.data.root)["splits"]:
        raise UsageError(f"split {split!r} not in the dataset manifest")
    bundle = T.load_checkpoint(args.checkpoint)
    if bundle.has_auxiliary:
        bundle = T.strip_auxiliary(bundle)
    scenes = load_split(cfg.data.root, split)
    metrics = T.evaluate(bundle, scenes, cfg.train)
    metrics.update({"split": split, "checkpoint": Path(args.checkpoint).name})
    outdir = Path(args.outdir)
    _write_json(outdir / "metrics.json", metrics)
    _write_resolved(outdir, cfg)
    log.info("eval on %s: mAP@0.25=%.4f mAP@0.5=%.4f", split, metrics["mAP@0.25"], metrics["mAP@0.5"])
    return EXIT_OK


def cmd_ablate(cfg, args, doc) -> int:
    read_manifest(cfg.data.root)
    outdir = Path(args.outdir)
    _write_resolved(outdir, cfg)
    report = run_ablation(cfg, doc, outdir, jobs=max(1, args.jobs))
    for s in report["summary"]:
        log.info("%-8s %-40s mAP@0.25=%.4f", s["group"], s["label"], s["mean_mAP@0.25"])
    return EXIT_OK


def cmd_strip(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    bundle = T.load_checkpoint(src)
    if not bundle.has_auxiliary and bundle.stage == "stripped":
        log.warning("%s is already stripped; copying it unchanged", src)
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
        return EXIT_OK
    T.save_checkpoint(dst, T.strip_auxiliary(bundle))
    log.info("stripped %s -> %s", src, dst)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", default=[],
                        help="JSON run configuration; repeat to layer fragments left to right")
    common.add_argument("--outdir", help="directory for artifacts")
    common.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="dotted config override, e.g. train.lambda=0.5 (repeatable)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="labelguided", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="run one training protocol")
    tr.add_argument("--mode", required=True, choices=MODES)
    tr.add_argument("--checkpoint", help="upstream checkpoint (default: OUTDIR/checkpoints/...)")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", help="manifest split (default: eval_split)")
    ab = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    ab.add_argument("--jobs", type=int, default=1)
    st = sub.add_parser("strip", help="drop the auxiliary branch from a checkpoint")
    st.add_argument("input")
    st.add_argument("output")
    st.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args):
    overrides = cfgmod.parse_set(args.set)
    if args.seed is not None:
        overrides += [("data.seed", args.seed), ("train.seed", args.seed)]
    return cfgmod.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "strip":
            return cmd_strip(args)
        cfg, doc = _resolve(args)
        if args.command != "gen-data" and not args.outdir:
            raise UsageError(f"{args.command} needs --outdir")
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        return cmd_ablate(cfg, args, doc)
    except (UsageError, cfgmod.ConfigError, SceneFormatError, T.CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (T.TrainingError, GenerationError, nx.ShapeError, FloatingPointError, ArithmeticError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
