"""Declarative ablation grid: expand config groups into cells, run each cell
under its protocol and collect one report row per (cell, seed)."""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import config as cfgmod
from . import training as T
from .scene import load_split

log = logging.getLogger(__name__)

ROW_FIELDS = ["group", "label", "protocol", "seed", "mAP@0.25", "mAP@0.5", "runtime_s",
              "pretrain_s", "config_hash", "overrides"]


@dataclass
class Cell:
    group: str
    label: str
    protocol: str
    overrides: dict


def expand_groups(groups) -> list[Cell]:
    cells = []
    for g in groups:
        base = dict(g.get("base", {}))
        if "cells" in g:
            entries = [(c.get("label") or _label(c.get("set", {})), c.get("set", {})) for c in g["cells"]]
        else:
            axes = g["axes"]
            keys = list(axes)
            entries = []
            for combo in itertools.product(*(axes[k] for k in keys)):
                sets = dict(zip(keys, combo))
                entries.append((_label(sets), sets))
        for label, sets in entries:
            merged = {**base, **sets}
            protocol = merged.pop("protocol", "two_stage")
            if protocol not in cfgmod.PROTOCOLS:
                raise cfgmod.ConfigError(f"group {g['name']!r}: unknown protocol {protocol!r}")
            cells.append(Cell(g["name"], label, protocol, merged))
    return cells


def _label(sets: dict) -> str:
    return ",".join(f"{k}={json.dumps(v)}" for k, v in sets.items()) or "default"


def cell_config(doc: dict, cell: Cell, seed: int) -> cfgmod.RunConfig:
    doc = copy.deepcopy(doc)
    for path, value in cell.overrides.items():
        cfgmod.apply_override(doc, path, value)
    cfgmod.apply_override(doc, "train.seed", seed)
    return cfgmod.from_dict(doc)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_key(cfg: cfgmod.RunConfig) -> str:
    """Everything the baseline depends on, and nothing else."""
    t = cfg.train
    m = cfg.model
    return _hash({"root": str(Path(cfg.data.root).resolve()), "classes": m.num_classes,
                  "channels": m.channels, "n_seeds": m.n_seeds, "k": m.k,
                  "train": [t.epochs_baseline, t.batch_size, t.lr, t.momentum, t.decay_at,
                            t.decay_factor, t.seed]})


class _Data:
    """Per-process cache of loaded splits."""
    splits: dict = {}

    @classmethod
    def get(cls, root, split):
        key = (str(Path(root).resolve()), split)
        if key not in cls.splits:
            cls.splits[key] = T._records(load_split(root, split))
        return cls.splits[key]


def ensure_pretrained(cfg: cfgmod.RunConfig, cache_dir: Path) -> tuple[T.ModelBundle, float]:
    path = cache_dir / f"baseline_{pretrain_key(cfg)}.json"
    meta = path.with_suffix(".time")
    if path.exists() and meta.exists():
        return T.load_checkpoint(path), float(meta.read_text())
    train = _Data.get(cfg.data.root, "train")
    bundle, secs = T.timed(T.pretrain_baseline, cfg.train, train, cfg.model)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    T.save_checkpoint(tmp, bundle)
    tmp.replace(path)
    meta.write_text(repr(secs))
    return bundle, secs


def run_protocol(cfg: cfgmod.RunConfig, protocol: str, baseline: T.ModelBundle | None, *,
                 log_rows=None) -> T.ModelBundle:
    train = _Data.get(cfg.data.root, "train")
    t = cfg.train
    if protocol == "baseline":
        return T.continue_baseline(t, baseline, train, t.epochs_stage1 + t.epochs_stage2, log_rows=log_rows)
    if protocol == "two_stage":
        s1 = T.train_stage1(t, baseline, train, cfg.model, log_rows=log_rows)
        return T.train_stage2(t, s1, train, log_rows=log_rows)
    return T.train_one_stage(t, train, cfg.model, log_rows=log_rows)


def run_cell(doc: dict, cell: Cell, seed: int, cache_dir: str) -> dict:
    cfg = cell_config(doc, cell, seed)
    t0 = time.perf_counter()
    baseline, pre_s = (None, 0.0)
    if cell.protocol != "one_stage":
        baseline, pre_s = ensure_pretrained(cfg, Path(cache_dir))
    bundle = run_protocol(cfg, cell.protocol, baseline)
    metrics = T.evaluate(T.strip_auxiliary(bundle), _Data.get(cfg.data.root, cfg.eval_split), cfg.train)
    runtime = time.perf_counter() - t0
    log.info("ablate %s/%s seed %d: mAP@0.25=%.4f (%.1fs)", cell.group, cell.label, seed,
             metrics["mAP@0.25"], runtime)
    return {"group": cell.group, "label": cell.label, "protocol": cell.protocol, "seed": seed,
            "mAP@0.25": metrics["mAP@0.25"], "mAP@0.5": metrics["mAP@0.5"],
            "runtime_s": round(runtime, 3), "pretrain_s": round(pre_s, 3),
            "config_hash": cfg.digest(), "overrides": cell.overrides}


def _pretrain_only(doc, cell, seed, cache_dir):
    ensure_pretrained(cell_config(doc, cell, seed), Path(cache_dir))


def summarize(rows: list[dict]) -> list[dict]:
    out = {}
    for r in rows:
        key = (r["group"], r["label"])
        out.setdefault(key, {"group": r["group"], "label": r["label"], "protocol": r["protocol"],
                             "seeds": [], "mAP@0.25": [], "mAP@0.5": []})
        out[key]["seeds"].append(r["seed"])
        out[key]["mAP@0.25"].append(r["mAP@0.25"])
        out[key]["mAP@0.5"].append(r["mAP@0.5"])
    summary = []
    for s in out.values():
        n = len(s["seeds"])
        s["mean_mAP@0.25"] = sum(s["mAP@0.25"]) / n
        s["mean_mAP@0.5"] = sum(s["mAP@0.5"]) / n
        summary.append(s)
    return summary


def run_ablation(cfg: cfgmod.RunConfig, doc: dict, outdir, jobs: int = 1) -> dict:
    """Run every (cell, seed); rows come back in grid order whatever ``jobs`` is."""
    cells = expand_groups(cfg.ablate.groups)
    if not cells:
        raise cfgmod.ConfigError("ablate.groups is empty")
    outdir = Path(outdir)
    cache = outdir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    base_doc = copy.deepcopy(doc)
    base_doc.pop("ablate", None)
    tasks = [(c, s) for c in cells for s in cfg.ablate.seeds]
    # validate every cell before any training starts
    for c, s in tasks:
        cell_config(base_doc, c, s)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            seen, warm = set(), []
            for c, s in tasks:
                if c.protocol == "one_stage":
                    continue
                key = pretrain_key(cell_config(base_doc, c, s))
                if key not in seen:
                    seen.add(key)
                    warm.append(pool.submit(_pretrain_only, base_doc, c, s, str(cache)))
            for fut in warm:
                fut.result()
            futures = [pool.submit(run_cell, base_doc, c, s, str(cache)) for c, s in tasks]
            rows = [f.result() for f in futures]
    else:
        rows = [run_cell(base_doc, c, s, str(cache)) for c, s in tasks]
    report = {"config_hash": cfg.digest(), "seeds": list(cfg.ablate.seeds), "rows": rows,
              "summary": summarize(rows)}
    (outdir / "ablation.json").write_text(json.dumps(report, indent=2))
    with open(outdir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "overrides": json.dumps(r["overrides"], sort_keys=True)})
    return report
