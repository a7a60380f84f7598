"""Acceptance gate.  Each test prints one PASS/FAIL line for its criterion."""
import json
import time
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import pytest

from labelguided import config as cfgmod
from labelguided import numerics as nx
from labelguided import training as T
from labelguided.cli import generate_dataset, main
from labelguided.detection import (
    Detections,
    assign_targets,
    aux_loss,
    average_precision,
    detection_loss,
    head_forward,
    init_head,
    nms,
)
from labelguided.encoders import (
    SeedRepresentation,
    encode_annotations,
    encode_label_objects,
    init_annotation_encoder,
    init_label_encoder,
    init_point_encoder,
    point_features,
)
from labelguided.lai import (
    AugmentConfig,
    annotation_self_attention,
    dither_centers,
    identification_loss,
    identification_probs,
    init_identification_head,
    lai_cross_attention,
)
from labelguided.lkm import init_attention, lkm_fuse
from labelguided.scene import Annotation, AnnotationSet, GenConfig, PointCloud, generate_scene, iou3d, points_in_box

from conftest import report
from gradcheck import check
from test_detection import _ap_oracle, _nms_oracle
from test_lkm import attention_oracle
from test_scene import brute_inside

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"
DEFAULT = ROOT / "configs" / "default.json"
ABLATE = ROOT / "configs" / "ablate.json"


# -- 1. gradient suite ---------------------------------------------------------------

def _grad_instances(rng):
    """(name, loss_fn, params) triples covering every differentiable operation."""
    out = []
    for _ in range(12):
        c = int(rng.integers(3, 7))
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 5))

        p = init_point_encoder(rng, "f", c)
        grouped = rng.normal(size=(n * k, 3))
        w = rng.normal(size=(n, c))
        out.append(("point encoder", lambda t, g=grouped, k=k, w=w: nx.total(nx.mul(point_features(t, "f", g, k), w)), p))

        p = init_label_encoder(rng, "psi", c)
        clouds = [(0, PointCloud(rng.normal(size=(int(rng.integers(1, 8)), 3)))), (1, PointCloud(np.zeros((0, 3))))]
        w = rng.normal(size=(2, c))
        out.append(("label encoder", lambda t, cl=clouds, w=w: nx.total(nx.mul(encode_label_objects(t, "psi", cl), w)), p))

        p = init_annotation_encoder(rng, "beta", 3, c)
        anns = AnnotationSet([Annotation(rng.uniform(0, 3, 3), rng.uniform(0.2, 2, 3), int(rng.integers(3)))
                              for _ in range(n)])
        w = rng.normal(size=(n, c))
        out.append(("annotation encoder",
                    lambda t, a=anns, w=w: nx.total(nx.mul(encode_annotations(t, "beta", a, 3).embeddings, w)), p))

        p = init_attention(rng, "lkm", c)
        p["q_in"], p["kv_in"] = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        w = rng.normal(size=(n, c))
        out.append(("label-knowledge attention", lambda t, w=w, n=n: nx.total(nx.mul(lkm_fuse(
            t, "lkm", t.param("q_in"), SeedRepresentation(t.param("kv_in"), np.zeros((n, 3)))).features, w)), p))

        p = init_attention(rng, "lai_self", c)
        p["emb"] = rng.normal(size=(n, c))
        w = rng.normal(size=(n, c))
        out.append(("annotation self-attention",
                    lambda t, w=w: nx.total(nx.mul(annotation_self_attention(t, "lai_self", t.param("emb")), w)), p))

        p = init_attention(rng, "lai_cross", c)
        m = int(rng.integers(1, 5))
        p["qa"], p["lab"] = rng.normal(size=(n, c)), rng.normal(size=(m, c))
        w = rng.normal(size=(n, c))
        out.append(("annotation cross-attention", lambda t, w=w: nx.total(nx.mul(
            lai_cross_attention(t, "lai_cross", t.param("qa"), t.param("lab")), w)), p))

        p = init_identification_head(rng, "idf", c)
        p["e"] = rng.normal(size=(n, c))
        flags = rng.integers(0, 2, size=(n, 1)).astype(float)
        out.append(("identification BCE",
                    lambda t, fl=flags: identification_loss(identification_probs(t, "idf", t.param("e")), fl), p))

        p = init_head(rng, "d", c, 3)
        gt = AnnotationSet([Annotation(rng.uniform(0, 2, 3), rng.uniform(0.8, 1.5, 3), int(rng.integers(3)))
                            for _ in range(2)])
        seeds = np.concatenate([gt.boxes()[:, :3] + rng.normal(0, 0.05, (2, 3)), rng.uniform(0, 2, (n, 3))])
        p["feat"] = rng.normal(size=(len(seeds), c))
        tg = assign_targets(seeds, gt)
        out.append(("detection loss", lambda t, s=seeds, tg=tg: detection_loss(
            head_forward(t, "d", t.param("feat"), s), tg), p))

        p = {"f": rng.normal(size=(n, c))}
        g = rng.normal(size=(n, c))
        out.append(("auxiliary distance", lambda t, g=g: aux_loss(t.param("f"), nx.constant(g)), p))
    return out


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    instances = _grad_instances(np.random.default_rng(2024))
    worst = {}
    for name, fn, params in instances:
        err = check(fn, params, tol=1e-5)
        worst[name] = max(worst.get(name, 0.0), err)
    secs = time.perf_counter() - t0
    ok = len(instances) >= 100 and max(worst.values()) <= 1e-5 and secs < 120
    report(1, ok, f"{len(instances)} instances over {len(worst)} operations, worst relative error "
                  f"{max(worst.values()):.2e} (tolerance 1e-5), {secs:.1f}s (limit 120s)")
    assert ok


# -- 2. removability --------------------------------------------------------------------

class GuardedParams(Mapping):
    """Parameter map that refuses any read outside the main branch."""

    def __init__(self, params):
        self._p = params
        self.reads = set()

    def __getitem__(self, name):
        if nx.group_of(name) not in T.MAIN_GROUPS:
            raise AssertionError(f"auxiliary parameter {name} read during inference")
        self.reads.add(name)
        return self._p[name]

    def __iter__(self):
        return iter(self._p)

    def __len__(self):
        return len(self._p)


def test_criterion_2_removability():
    t0 = time.perf_counter()
    gen = GenConfig()
    model = T.ModelConfig(channels=16, n_seeds=32, k=8)
    cfg = T.TrainConfig(epochs_one_stage=1)
    full = T.train_one_stage(cfg, [generate_scene(gen, i) for i in range(8)], model)
    stripped = T.strip_auxiliary(full)
    scenes = [generate_scene(gen, 5000 + i) for i in range(50)]
    identical = 0
    touched = set()
    for i, scene in enumerate(scenes):
        batch = T.eval_batch([scene], model, i)
        a, _ = T.predict(full.params, batch)
        guard = GuardedParams(stripped.params)
        b, tape = T.predict(guard, batch)
        touched |= {n for n in tape.accessed if nx.group_of(n) not in T.MAIN_GROUPS}
        fields = ("objectness", "center", "log_size", "class_logits")
        if all(getattr(a, f).value.tobytes() == getattr(b, f).value.tobytes() for f in fields):
            identical += 1
    same_dets = [d.items for d in T.detect(full, scenes, cfg)] == [d.items for d in T.detect(stripped, scenes, cfg)]
    secs = time.perf_counter() - t0
    ok = identical == 50 and not touched and same_dets and not stripped.has_auxiliary and secs < 60
    report(2, ok, f"{identical}/50 scenes bit-identical, {len(touched)} auxiliary reads, "
                  f"{stripped.parameter_count()} of {full.parameter_count()} parameters kept, {secs:.1f}s (limit 60s)")
    assert ok


# -- 3. gradient routing ---------------------------------------------------------------

def test_criterion_3_gradient_routing():
    gen = GenConfig()
    model = T.ModelConfig(channels=8, n_seeds=16, k=8)
    rng = np.random.default_rng(3)
    clean = 0
    for trial in range(20):
        scenes = [generate_scene(gen, 100 * trial + i) for i in range(2)]
        bundle = T.init_bundle(model, trial, auxiliary=True)
        batch = T.make_batch(T._records(scenes), model, [rng] * 2)
        tape = nx.Tape(bundle.params)
        f = T.main_features(tape, batch)
        g, _, _ = T.fused_features(tape, batch, model, AugmentConfig(), T.size_stats_from(scenes, 3), rng)
        lam = float(rng.uniform(0.1, 2.0))
        grads = tape.backward(nx.mul(aux_loss(f, g), lam))
        others_zero = all(not np.any(v) for n, v in grads.items() if nx.group_of(n) != "f")
        backbone_moves = any(np.any(v) for n, v in grads.items() if nx.group_of(n) == "f")
        clean += others_zero and backbone_moves
    ok = clean == 20
    report(3, ok, f"{clean}/20 batches: head and auxiliary gradients exactly zero, backbone gradient nonzero")
    assert ok


# -- 4. augmentation bounds -----------------------------------------------------------

def test_criterion_4_dither_bounds():
    rng = np.random.default_rng(4)
    n = 100_000
    anns = AnnotationSet([Annotation(c, s, int(k)) for c, s, k in
                          zip(rng.uniform(-5, 5, (n, 3)), rng.uniform(0.1, 3, (n, 3)), rng.integers(0, 3, n))])
    boxes = anns.boxes()
    out = dither_centers(anns, AugmentConfig(scale_factor=0.1), rng).boxes()
    shift = np.abs(out[:, :3] - boxes[:, :3])
    within = bool(np.all(shift <= 0.1 * boxes[:, 3:]))
    sizes_kept = out[:, 3:].tobytes() == boxes[:, 3:].tobytes()
    zero = dither_centers(anns, AugmentConfig(scale_factor=0.0), rng).boxes().tobytes() == boxes.tobytes()
    ok = within and sizes_kept and zero
    ratio = float(np.max(shift / boxes[:, 3:]))
    report(4, ok, f"{n} annotations, max |shift|/size = {ratio:.6f} (bound 0.1), "
                  f"B=0 bitwise identity {'holds' if zero else 'broken'}")
    assert ok


# -- 5. oracle equivalence ----------------------------------------------------------

def _analytic_iou(a, b):
    inter = 1.0
    for t in range(3):
        lo = max(a[t] - a[t + 3] / 2, b[t] - b[t + 3] / 2)
        hi = min(a[t] + a[t + 3] / 2, b[t] + b[t + 3] / 2)
        inter *= max(0.0, hi - lo)
    return inter / (a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter)


def test_criterion_5_oracles():
    rng = np.random.default_rng(5)
    att = 0.0
    for _ in range(50):
        c, n = int(rng.integers(2, 8)), int(rng.integers(1, 10))
        p = init_attention(rng, "lkm", c)
        q, kv = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        got = lkm_fuse(nx.Tape(p), "lkm", nx.constant(q), SeedRepresentation(nx.constant(kv), np.zeros((n, 3))))
        proj = {r: (q if r == "q" else kv) @ p[f"lkm.{r}.W"] + p[f"lkm.{r}.b"] for r in "qkv"}
        want, _ = attention_oracle(proj["q"].tolist(), proj["k"].tolist(), proj["v"].tolist())
        att = max(att, float(np.max(np.abs(got.features.value - want))))
    pib = True
    for _ in range(50):
        cloud = PointCloud(rng.uniform(-2, 2, (500, 3)))
        box = Annotation(rng.uniform(-1, 1, 3), rng.uniform(0.2, 2, 3), 0)
        want = [i for i, pt in enumerate(cloud.points) if brute_inside(pt, box)]
        inside = points_in_box(cloud, box).points
        pib &= inside.tobytes() == cloud.points[want].tobytes()
    iou = 0.0
    for _ in range(500):
        a = np.concatenate([rng.uniform(0, 2, 3), rng.uniform(0.2, 1.5, 3)])
        b = np.concatenate([rng.uniform(0, 2, 3), rng.uniform(0.2, 1.5, 3)])
        got = iou3d(Annotation(a[:3], a[3:], 0), Annotation(b[:3], b[3:], 0))
        iou = max(iou, abs(got - _analytic_iou(a, b)))
    ap = 0.0
    for _ in range(500):
        tp = rng.integers(0, 2, size=int(rng.integers(0, 11))).astype(float)
        n_gt = max(int(tp.sum()), 1) + int(rng.integers(0, 3))
        ap = max(ap, abs(average_precision(tp, n_gt) - _ap_oracle(tp.astype(bool).tolist(), n_gt)))
    nms_ok = True
    for _ in range(100):
        n = int(rng.integers(0, 15))
        boxes = np.concatenate([rng.uniform(0, 2, (n, 3)), rng.uniform(0.3, 1, (n, 3))], axis=1)
        scores = rng.uniform(size=n)
        nms_ok &= nms(boxes, scores, 0.25).tolist() == _nms_oracle(boxes.tolist(), scores.tolist(), 0.25)
    ok = att <= 1e-12 and pib and iou <= 1e-12 and ap <= 1e-9 and nms_ok
    report(5, ok, f"attention {att:.1e} (<=1e-12), point-in-box {'exact' if pib else 'MISMATCH'}, "
                  f"IoU {iou:.1e} (<=1e-12), AP {ap:.1e} (<=1e-9), NMS {'exact' if nms_ok else 'MISMATCH'}")
    assert ok


# -- 6. desk-scale improvement ----------------------------------------------------

@pytest.mark.slow
def test_criterion_6_desk_scale_improvement():
    t0 = time.perf_counter()
    cfg, _ = cfgmod.load(DEFAULT)
    splits = generate_dataset(cfg)
    train, val = T._records(splits["train"]), T._records(splits["val"])
    assert len(train) == 200 and len(val) == 50 and cfg.model.num_classes == 3
    assert cfg.model.n_seeds == 64 and cfg.model.channels == 32
    t = cfg.train
    epochs_lg = t.epochs_stage1 + t.epochs_stage2
    deltas, lines = [], []
    for seed in range(5):
        ts = cfgmod.from_dict(cfgmod.deep_merge(cfg.to_dict(), {"train": {"seed": seed}})).train
        base = T.pretrain_baseline(ts, train, cfg.model)
        control = T.continue_baseline(ts, base, train, epochs_lg)
        s2 = T.train_stage2(ts, T.train_stage1(ts, base, train, cfg.model), train)
        m_base = T.evaluate(control, val, ts)["mAP@0.25"]
        m_lg = T.evaluate(T.strip_auxiliary(s2), val, ts)["mAP@0.25"]
        deltas.append(m_lg - m_base)
        lines.append(f"seed {seed}: baseline {m_base:.4f}, two-stage {m_lg:.4f}")
        print(lines[-1], flush=True)
    secs = time.perf_counter() - t0
    wins = sum(d >= 0 for d in deltas)
    mean = float(np.mean(deltas))
    ok = wins >= 4 and mean > 0
    report(6, ok, f"two-stage >= baseline on {wins}/5 seeds (need 4), mean improvement {mean:+.4f} "
                  f"(need > 0), {t.epochs_baseline}+{epochs_lg} epochs each, {secs / 60:.1f} min; "
                  + "; ".join(lines))
    assert ok


# -- 7. ablation harness --------------------------------------------------------------

def test_criterion_7_ablation_structure(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--config", str(SMOKE)]) == 0
    rc = main(["ablate", "--config", str(SMOKE), "--config", str(ABLATE), "--set", "ablate.seeds=[0]",
               "--outdir", "ablate"])
    report_doc = json.loads((tmp_path / "ablate" / "ablation.json").read_text())
    rows = report_doc["rows"]
    labels = {(r["group"], r["label"]) for r in rows}
    want = {("table3", "baseline"), ("table3", "+LKM"), ("table3", "+LKM+LAI"),
            ("table4", "one-stage"), ("table4", "two-stage")}
    want |= {("size_fake", f"train.augment.enable_size_aug={a},train.augment.enable_fake={b}")
             for a in ("false", "true") for b in ("false", "true")}
    want |= {("scale", f"train.augment.scale_factor={s}") for s in ("0.0", "0.1", "0.2", "0.3")}
    want |= {("lambda", f"train.lambda={v}") for v in ("0.1", "0.5", "1.0", "2.0")}
    complete = labels == want and len(rows) == len(want)
    metrics = all(isinstance(r["mAP@0.25"], float) and isinstance(r["mAP@0.5"], float)
                  and r["config_hash"] and r["runtime_s"] >= 0 for r in rows)
    csv_rows = (tmp_path / "ablate" / "ablation.csv").read_text().strip().count("\n")
    ok = rc == 0 and complete and metrics and csv_rows == len(rows)
    t3 = {r["label"]: r["mAP@0.25"] for r in rows if r["group"] == "table3"}
    report(7, ok, f"{len(rows)} rows covering {len(want)} cells (table3, table4, size-aug x fake, "
                  f"scale 0/0.1/0.2/0.3, lambda sweep); table3 smoke ordering (not gated): "
                  + ", ".join(f"{k} {v:.3f}" for k, v in t3.items()))
    assert ok


# -- 8. identification ---------------------------------------------------------------

def test_criterion_8_identification():
    gen = GenConfig()
    model = T.ModelConfig(channels=16, n_seeds=32, k=8)
    cfg = T.TrainConfig(epochs_baseline=1, epochs_stage1=15, batch_size=4, seed=8)
    train = [generate_scene(gen, i) for i in range(40)]
    held = [generate_scene(gen, 9000 + i) for i in range(30)]
    stats = [(np.asarray(c.mean_size) * 3.0, c.spread) for c in gen.classes]
    base = T.pretrain_baseline(cfg, train, model)
    s1 = T.train_stage1(cfg, base, train, model, size_stats=stats)
    batch = T.make_batch(T._records(held), model, [np.random.default_rng(0)] * len(held))
    tape = nx.Tape(s1.params)
    _, probs, flags = T.fused_features(tape, batch, model, cfg.augment, stats, np.random.default_rng(1))
    pred = probs.value[:, 0] >= 0.5
    acc = float(np.mean(pred == (flags > 0.5)))
    ok = acc >= 0.9
    report(8, ok, f"held-out real/fake accuracy {acc:.3f} over {len(flags)} annotations "
                  f"({int(flags.sum())} real), threshold 0.90")
    assert ok


# -- 9. determinism -----------------------------------------------------------------

def _pipeline(workdir: Path, monkeypatch):
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    cfg = ["--config", str(SMOKE)]
    assert main(["gen-data", *cfg]) == 0
    for mode in ("baseline", "stage1", "stage2"):
        assert main(["train", *cfg, "--outdir", "run", "--mode", mode]) == 0
    assert main(["eval", *cfg, "--outdir", "eval", "--checkpoint", "run/checkpoints/stage2.json"]) == 0
    return {str(p.relative_to(workdir)): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, monkeypatch):
    a = _pipeline(tmp_path / "a", monkeypatch)
    b = _pipeline(tmp_path / "b", monkeypatch)
    checked = [k for k in a if k.endswith(".json") or k.endswith(".csv")]
    differing = [k for k in checked if a[k] != b.get(k)]
    ckpts = [k for k in checked if "checkpoints" in k]
    metrics = [k for k in checked if "metrics" in k]
    ok = a.keys() == b.keys() and not differing and len(ckpts) == 3 and len(metrics) >= 2
    report(9, ok, f"{len(checked)} artifacts compared ({len(ckpts)} checkpoints, {len(metrics)} metrics files), "
                  f"{len(differing)} differ")
    assert ok
