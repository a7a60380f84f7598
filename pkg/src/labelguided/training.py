"""Training protocols, inference, auxiliary stripping and checkpoints.

Parameter groups (the first dotted component of a parameter name):

* main branch: ``f`` (backbone) and ``d`` (shared detection head);
* auxiliary branch: ``phi`` (original-cloud encoder, same shape as ``f``),
  ``psi`` (label-object encoder), ``beta`` (annotation descriptor), ``lkm``,
  ``lai_self``, ``lai_cross`` (attention projections), ``idf``
  (identification head) and ``bg`` (background token).

Protocols:

* ``pretrain_baseline``: ``f, d`` on the plain detection loss.
* ``train_stage1``: ``phi`` starts as a copy of the pretrained ``f``; the
  auxiliary branch and ``d`` learn from detection on the fused grid plus the
  identification loss.
* ``train_stage2``: the auxiliary branch is frozen; ``f, d`` learn from
  detection on ``f`` plus ``lambda`` times the distance between ``f`` and the
  fused grid, which is treated as a constant.
* ``train_one_stage``: everything at once from scratch.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .detection import (
    Detections,
    Targets,
    assign_targets,
    aux_loss,
    concat_targets,
    decode_and_nms,
    detection_loss,
    evaluate_map,
    head_forward,
    init_head,
    total_loss,
)
from .encoders import (
    group_neighbors,
    init_annotation_encoder,
    init_label_encoder,
    init_point_encoder,
    point_features,
    scatter_to_seeds,
)
from .lai import AugmentConfig, augment, init_identification_head, label_branch
from .lkm import attend, init_attention
from .scene import Scene, extract_label_points, subsample_indices

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAIN_GROUPS = ("f", "d")
AUX_GROUPS = ("phi", "psi", "beta", "lkm", "lai_self", "lai_cross", "idf", "bg")
VARIANTS = ("lkm", "lkm_lai")

# independent random streams per protocol phase; stage 2 and the plain
# continuation share "finetune" so that lambda = 0 reproduces the control run
_STREAMS = {"init": 1, "baseline": 2, "stage1": 3, "finetune": 4, "one_stage": 5,
            "augment": 6, "eval": 7, "aux_init": 8}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name], *extra]))


@dataclass
class ModelConfig:
    num_classes: int = 3
    channels: int = 32
    n_seeds: int = 64
    k: int = 16
    variant: str = "lkm_lai"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("num_classes", "channels", "n_seeds", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainConfig:
    epochs_baseline: int = 30
    epochs_stage1: int = 30
    epochs_stage2: int = 60
    epochs_one_stage: int = 120
    batch_size: int = 4
    lr: float = 1e-2
    momentum: float = 0.9
    decay_at: float = 2.0 / 3.0
    decay_factor: float = 0.1
    lam: float = 1.0
    seed: int = 0
    eval_seed: int = 12345
    eval_every: int = 0
    objectness_threshold: float = 0.05
    nms_threshold: float = 0.25
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        for name in ("epochs_baseline", "epochs_stage1", "epochs_stage2", "epochs_one_stage", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class ModelBundle:
    params: dict[str, np.ndarray]
    model: ModelConfig
    stage: str = "init"
    frozen: list[str] = field(default_factory=list)
    rng: dict = field(default_factory=dict)

    def groups(self) -> set[str]:
        return {nx.group_of(n) for n in self.params}

    @property
    def has_auxiliary(self) -> bool:
        return any(nx.group_of(n) in AUX_GROUPS for n in self.params)

    def main_params(self) -> dict[str, np.ndarray]:
        return {n: v for n, v in self.params.items() if nx.group_of(n) in MAIN_GROUPS}

    def aux_params(self) -> dict[str, np.ndarray]:
        return {n: v for n, v in self.params.items() if nx.group_of(n) in AUX_GROUPS}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ModelBundle":
        return ModelBundle({n: v.copy() for n, v in self.params.items()}, copy.deepcopy(self.model),
                           self.stage, list(self.frozen), copy.deepcopy(self.rng))


def init_main_params(model: ModelConfig, rng) -> dict[str, np.ndarray]:
    params = init_point_encoder(rng, "f", model.channels)
    params.update(init_head(rng, "d", model.channels, model.num_classes))
    return params


def init_aux_params(model: ModelConfig, rng) -> dict[str, np.ndarray]:
    c = model.channels
    params = init_point_encoder(rng, "phi", c)
    params.update(init_label_encoder(rng, "psi", c))
    params.update(init_attention(rng, "lkm", c))
    params["bg.token"] = rng.uniform(-math.sqrt(1.0 / c), math.sqrt(1.0 / c), size=(1, c))
    if model.variant == "lkm_lai":
        params.update(init_annotation_encoder(rng, "beta", model.num_classes, c))
        params.update(init_attention(rng, "lai_self", c))
        params.update(init_attention(rng, "lai_cross", c))
        params.update(init_identification_head(rng, "idf", c))
    return params


def init_bundle(model: ModelConfig, seed: int, auxiliary: bool = True) -> ModelBundle:
    params = init_main_params(model, stream(seed, "init"))
    if auxiliary:
        params.update(init_aux_params(model, stream(seed, "aux_init")))
        for name in list(params):
            if nx.group_of(name) == "f":
                params["phi" + name[1:]] = params[name].copy()
    return ModelBundle(params, model)


# -- data ----------------------------------------------------------------------

@dataclass
class SceneRecord:
    """A scene with everything that does not change across epochs."""
    scene: Scene
    real_boxes: np.ndarray
    label_clouds: list

    @classmethod
    def of(cls, scene: Scene) -> "SceneRecord":
        return cls(scene, scene.annotations.real().boxes(), extract_label_points(scene))


@dataclass
class Batch:
    records: list[SceneRecord]
    grouped: np.ndarray
    seeds: np.ndarray
    targets: Targets
    n_seeds: int
    k: int


def make_batch(records: list[SceneRecord], model: ModelConfig, rngs) -> Batch:
    grouped, seeds, targets = [], [], []
    for rec, rng in zip(records, rngs):
        idx = subsample_indices(len(rec.scene.cloud), model.n_seeds, rng)
        g, s = group_neighbors(rec.scene.cloud.points, idx, model.k)
        grouped.append(g)
        seeds.append(s)
        targets.append(assign_targets(s, rec.scene.annotations))
    return Batch(records, np.concatenate(grouped), np.concatenate(seeds), concat_targets(targets),
                 model.n_seeds, model.k)


# -- forward passes ------------------------------------------------------------

def main_features(tape: nx.Tape, batch: Batch) -> nx.Tensor:
    return point_features(tape, "f", batch.grouped, batch.k)


def fused_features(tape: nx.Tape, batch: Batch, model: ModelConfig, aug_cfg: AugmentConfig,
                   size_stats, aug_rng) -> tuple[nx.Tensor, nx.Tensor | None, np.ndarray | None]:
    """The label-enhanced grid for a batch, plus identification probabilities and flags."""
    phi = point_features(tape, "phi", batch.grouped, batch.k)
    bg = tape.param("bg.token")
    use_lai = model.variant == "lkm_lai"
    grids, probs, flags = [], [], []
    n = batch.n_seeds
    for b, rec in enumerate(batch.records):
        anns = rec.scene.annotations.real()
        if use_lai:
            anns = augment(anns, aug_cfg, rec.scene.bounds, size_stats, aug_rng)
        out = label_branch(tape, rec.label_clouds, anns, model.num_classes, use_lai)
        seeds = batch.seeds[b * n:(b + 1) * n]
        grids.append(scatter_to_seeds(out.object_tokens, rec.real_boxes, seeds, bg).tokens)
        if out.probs is not None:
            probs.append(out.probs)
            flags.append(out.flags)
    c = model.channels
    bsz = len(batch.records)
    tokens = nx.reshape(nx.concat(grids, axis=0), (bsz, n, c))
    keys = nx.reshape(phi, (bsz, n, c))
    g, _ = attend(tape, "lkm", tokens, keys)
    g = nx.reshape(g, (bsz * n, c))
    if not probs:
        return g, None, None
    return g, nx.concat(probs, axis=0), np.concatenate(flags)


def size_stats_from(scenes: list[Scene], num_classes: int):
    """Per-class mean size and relative spread observed in the training split."""
    stats = []
    for c in range(num_classes):
        sizes = np.array([a.size for s in scenes for a in s.annotations if a.is_real and a.cls == c])
        if len(sizes) == 0:
            stats.append((np.ones(3), 0.0))
            continue
        mean = sizes.mean(axis=0)
        spread = float(np.max(np.abs(sizes / mean - 1.0)))
        stats.append((mean, spread))
    return stats


# -- losses per protocol ----------------------------------------------------------

@dataclass
class StepContext:
    model: ModelConfig
    cfg: TrainConfig
    size_stats: list
    aug_rng: np.random.Generator


def loss_baseline(tape, batch, ctx: StepContext):
    pred = head_forward(tape, "d", main_features(tape, batch), batch.seeds)
    return total_loss(det2=detection_loss(pred, batch.targets))


def loss_stage1(tape, batch, ctx: StepContext):
    g, probs, flags = fused_features(tape, batch, ctx.model, ctx.cfg.augment, ctx.size_stats, ctx.aug_rng)
    det1 = detection_loss(head_forward(tape, "d", g, batch.seeds), batch.targets)
    idf = None if probs is None else nx.binary_cross_entropy(probs, flags)
    return total_loss(det1=det1, idf=idf)


def loss_stage2(tape, batch, ctx: StepContext):
    f = main_features(tape, batch)
    det2 = detection_loss(head_forward(tape, "d", f, batch.seeds), batch.targets)
    if ctx.cfg.lam == 0:
        return total_loss(det2=det2, lam=0.0)
    g, _, _ = fused_features(tape, batch, ctx.model, ctx.cfg.augment, ctx.size_stats, ctx.aug_rng)
    return total_loss(det2=det2, aux=aux_loss(f, g), lam=ctx.cfg.lam)


def loss_one_stage(tape, batch, ctx: StepContext):
    f = main_features(tape, batch)
    det2 = detection_loss(head_forward(tape, "d", f, batch.seeds), batch.targets)
    g, probs, flags = fused_features(tape, batch, ctx.model, ctx.cfg.augment, ctx.size_stats, ctx.aug_rng)
    det1 = detection_loss(head_forward(tape, "d", g, batch.seeds), batch.targets)
    idf = None if probs is None else nx.binary_cross_entropy(probs, flags)
    return total_loss(det1=det1, det2=det2, idf=idf, aux=aux_loss(f, g), lam=ctx.cfg.lam)


# -- the loop ------------------------------------------------------------------------

def lr_at(cfg: TrainConfig, epoch: int, epochs: int) -> float:
    return cfg.lr * (cfg.decay_factor if epoch >= math.floor(cfg.decay_at * epochs) else 1.0)


def run_phase(bundle: ModelBundle, records: list[SceneRecord], cfg: TrainConfig, *, stage: str,
              stream_name: str, epochs: int, groups, loss_fn: Callable, size_stats=None,
              val_records: list[SceneRecord] | None = None, log_rows: list | None = None) -> ModelBundle:
    if not records:
        raise TrainingError(f"{stage}: training split is empty")
    groups = tuple(groups)
    data_rng = stream(cfg.seed, stream_name)
    ctx = StepContext(bundle.model, cfg, size_stats or [], stream(cfg.seed, "augment", _STREAMS[stream_name]))
    opt = nx.SGD(cfg.lr, cfg.momentum)
    params = bundle.params
    for epoch in range(epochs):
        opt.lr = lr_at(cfg, epoch, epochs)
        order = data_rng.permutation(len(records))
        sums = {"det1": 0.0, "det2": 0.0, "idf": 0.0, "aux": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            chosen = [records[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chosen, bundle.model, [data_rng] * len(chosen))
            tape = nx.Tape(params)
            loss, bd = loss_fn(tape, batch, ctx)
            if not math.isfinite(bd.total):
                raise TrainingError(f"{stage}: non-finite loss at epoch {epoch + 1}, step {steps + 1}")
            grads = tape.backward(loss)
            opt.step(params, grads, groups)
            for key in sums:
                sums[key] += getattr(bd, key)
            steps += 1
        row = {"epoch": epoch + 1, "stage": stage}
        row.update({k: v / steps for k, v in sums.items()})
        row["map25"] = row["map50"] = ""
        last = epoch == epochs - 1
        if val_records and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            m = evaluate(bundle, val_records, cfg)
            row["map25"], row["map50"] = m["mAP@0.25"], m["mAP@0.5"]
        log.info("%s epoch %d/%d total=%.4f", stage, epoch + 1, epochs, row["total"])
        if log_rows is not None:
            log_rows.append(row)
    bundle.rng = {"seed": cfg.seed, "stream": stream_name, "state": data_rng.bit_generator.state}
    return bundle


def _records(scenes) -> list[SceneRecord]:
    return [s if isinstance(s, SceneRecord) else SceneRecord.of(s) for s in scenes]


def pretrain_baseline(cfg: TrainConfig, scenes, model: ModelConfig, *, val=None, log_rows=None) -> ModelBundle:
    """Train the plain detector ``(f, d)`` from scratch."""
    bundle = init_bundle(model, cfg.seed, auxiliary=False)
    run_phase(bundle, _records(scenes), cfg, stage="baseline", stream_name="baseline",
              epochs=cfg.epochs_baseline, groups=MAIN_GROUPS, loss_fn=loss_baseline,
              val_records=_records(val) if val else None, log_rows=log_rows)
    bundle.stage = "baseline"
    return bundle


def continue_baseline(cfg: TrainConfig, baseline: ModelBundle, scenes, epochs: int, *, val=None,
                      log_rows=None) -> ModelBundle:
    """Keep training the plain detector; the equal-epoch control for stage 2."""
    bundle = ModelBundle({n: v.copy() for n, v in baseline.main_params().items()},
                         copy.deepcopy(baseline.model), "baseline")
    run_phase(bundle, _records(scenes), cfg, stage="baseline_cont", stream_name="finetune",
              epochs=epochs, groups=MAIN_GROUPS, loss_fn=loss_baseline,
              val_records=_records(val) if val else None, log_rows=log_rows)
    return bundle


def train_stage1(cfg: TrainConfig, baseline: ModelBundle, scenes, model: ModelConfig | None = None, *,
                 val=None, log_rows=None, groups=None, size_stats=None) -> ModelBundle:
    """Fit the auxiliary branch and the shared head with ``phi`` seeded from ``f``.

    ``size_stats`` replaces the per-class size statistics that fake
    instances are drawn from; by default they come from the training split.
    """
    model = model or baseline.model
    main = baseline.main_params()
    if not main:
        raise CheckpointError("baseline checkpoint has no main-branch parameters")
    expected = init_main_params(model, np.random.default_rng(0))
    for name, value in expected.items():
        if name not in main or main[name].shape != value.shape:
            raise CheckpointError(f"baseline checkpoint does not match the model config at {name}")
    params = {n: v.copy() for n, v in main.items()}
    params.update(init_aux_params(model, stream(cfg.seed, "aux_init")))
    for name in main:
        if nx.group_of(name) == "f":
            params["phi" + name[1:]] = main[name].copy()
    bundle = ModelBundle(params, copy.deepcopy(model), "stage1", frozen=["f"])
    records = _records(scenes)
    groups = tuple(g for g in AUX_GROUPS if g in bundle.groups()) + ("d",) if groups is None else groups
    if size_stats is None:
        size_stats = size_stats_from([r.scene for r in records], model.num_classes)
    run_phase(bundle, records, cfg, stage="stage1", stream_name="stage1", epochs=cfg.epochs_stage1,
              groups=groups, loss_fn=loss_stage1, size_stats=size_stats,
              log_rows=log_rows)
    return bundle


def train_stage2(cfg: TrainConfig, stage1: ModelBundle, scenes, *, val=None, log_rows=None) -> ModelBundle:
    """Freeze the auxiliary branch; fit ``f, d`` with the auxiliary distance."""
    if not stage1.has_auxiliary:
        raise CheckpointError("auxiliary branch missing: stage 2 needs a stage-1 checkpoint")
    bundle = stage1.copy()
    bundle.frozen = sorted(g for g in bundle.groups() if g in AUX_GROUPS)
    records = _records(scenes)
    run_phase(bundle, records, cfg, stage="stage2", stream_name="finetune", epochs=cfg.epochs_stage2,
              groups=MAIN_GROUPS, loss_fn=loss_stage2,
              size_stats=size_stats_from([r.scene for r in records], bundle.model.num_classes),
              val_records=_records(val) if val else None, log_rows=log_rows)
    bundle.stage = "stage2"
    return bundle


def train_one_stage(cfg: TrainConfig, scenes, model: ModelConfig, *, val=None, log_rows=None) -> ModelBundle:
    """All groups jointly under the full objective, from a fresh initialisation."""
    bundle = init_bundle(model, cfg.seed, auxiliary=True)
    records = _records(scenes)
    run_phase(bundle, records, cfg, stage="one_stage", stream_name="one_stage", epochs=cfg.epochs_one_stage,
              groups=sorted(bundle.groups()), loss_fn=loss_one_stage,
              size_stats=size_stats_from([r.scene for r in records], model.num_classes),
              val_records=_records(val) if val else None, log_rows=log_rows)
    bundle.stage = "one_stage"
    return bundle


# -- inference ---------------------------------------------------------------------

def strip_auxiliary(bundle: ModelBundle) -> ModelBundle:
    """Copy of the bundle holding only ``f`` and ``d``."""
    return ModelBundle({n: v.copy() for n, v in bundle.main_params().items()}, copy.deepcopy(bundle.model),
                       "stripped", [], copy.deepcopy(bundle.rng))


def eval_batch(scenes, model: ModelConfig, eval_seed: int) -> Batch:
    records = _records(scenes)
    rngs = [stream(eval_seed, "eval", i) for i in range(len(records))]
    return make_batch(records, model, rngs)


def predict(params, batch: Batch):
    """Main-branch predictions for a batch; returns ``(RawPredictions, tape)``."""
    tape = nx.Tape(params)
    pred = head_forward(tape, "d", main_features(tape, batch), batch.seeds)
    return pred, tape


def detect(bundle: ModelBundle, scenes, cfg: TrainConfig, batch: Batch | None = None) -> list[Detections]:
    batch = batch or eval_batch(scenes, bundle.model, cfg.eval_seed)
    pred, _ = predict(bundle.params, batch)
    n = batch.n_seeds
    out = []
    for b in range(len(batch.records)):
        sl = slice(b * n, (b + 1) * n)
        part = type(pred)(
            nx.constant(pred.objectness.value[sl]), nx.constant(pred.center.value[sl]),
            nx.constant(pred.log_size.value[sl]), nx.constant(pred.class_logits.value[sl]),
            pred.seed_positions[sl])
        out.append(decode_and_nms(part, cfg.objectness_threshold, cfg.nms_threshold))
    return out


def evaluate(bundle: ModelBundle, scenes, cfg: TrainConfig) -> dict:
    records = _records(scenes)
    dets = detect(bundle, records, cfg)
    return evaluate_map(dets, [r.scene.annotations for r in records], bundle.model.num_classes)


# -- checkpoints -----------------------------------------------------------------------

def bundle_to_dict(bundle: ModelBundle) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "stage": bundle.stage,
        "frozen": list(bundle.frozen),
        "model": asdict(bundle.model),
        "rng": bundle.rng,
        "params": {n: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for n, v in sorted(bundle.params.items())},
    }


def bundle_from_dict(doc: dict) -> ModelBundle:
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {version}")
    try:
        params = {n: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
                  for n, p in doc["params"].items()}
        return ModelBundle(params, ModelConfig(**doc["model"]), doc["stage"], list(doc["frozen"]), doc["rng"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def save_checkpoint(path, bundle: ModelBundle) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(bundle)))


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint (line {exc.lineno}: {exc.msg})") from None
    return bundle_from_dict(doc)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
