"""Point clouds, axis-aligned box annotations, synthetic scenes and scene files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels


class SceneFormatError(ValueError):
    """Malformed or invalid scene/dataset file."""


class GenerationError(RuntimeError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.features is None) != (other.features is None):
            return False
        same_feat = self.features is None or np.array_equal(self.features, other.features)
        return np.array_equal(self.points, other.points) and same_feat


@dataclass(frozen=True)
class Annotation:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    cls: int
    is_real: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size need three components")
        if not all(s > 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        if int(self.cls) != self.cls or self.cls < 0:
            raise ValueError(f"invalid class index {self.cls}")

    @property
    def box(self) -> np.ndarray:
        return np.array(self.center + self.size)


class AnnotationSet(Sequence[Annotation]):
    """Immutable ordered collection of annotations with array views."""

    def __init__(self, items=()):
        self.items = tuple(items)

    @property
    def N(self) -> int:
        return len(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return AnnotationSet(self.items[i])
        return self.items[i]

    def __iter__(self) -> Iterator[Annotation]:
        return iter(self.items)

    def __eq__(self, other):
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return self.items == other.items

    def __repr__(self):
        return f"AnnotationSet(N={self.N})"

    def real(self) -> "AnnotationSet":
        return AnnotationSet(a for a in self.items if a.is_real)

    def boxes(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, 6))
        return np.array([a.center + a.size for a in self.items], dtype=np.float64)

    def classes(self) -> np.ndarray:
        return np.array([a.cls for a in self.items], dtype=np.int64)

    def flags(self) -> np.ndarray:
        return np.array([1.0 if a.is_real else 0.0 for a in self.items])


@dataclass
class Scene:
    cloud: PointCloud
    annotations: AnnotationSet
    scene_id: str = "scene"
    bounds: tuple = (0.0, 0.0, 0.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        lo, hi = np.array(self.bounds[:3]), np.array(self.bounds[3:])
        for i, a in enumerate(self.annotations):
            if not a.is_real:
                continue
            c, h = np.array(a.center), np.array(a.size) / 2
            if np.any(c + h < lo) or np.any(c - h > hi):
                raise ValueError(f"{self.scene_id}: annotation {i} lies outside the scene bounds")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.bounds == other.bounds
                and self.cloud == other.cloud and self.annotations == other.annotations)


# -- geometry ----------------------------------------------------------------

def points_in_box(cloud: PointCloud, box: Annotation) -> PointCloud:
    """Points inside the box, faces included, in their original order."""
    mask = kernels.points_in_box_mask(cloud.points, box.center, box.size)
    feats = None if cloud.features is None else cloud.features[mask]
    return PointCloud(cloud.points[mask], feats)


def extract_label_points(scene: Scene) -> list[tuple[int, PointCloud]]:
    """Label cloud of every real annotation.

    Shared points are kept once per containing box.  Empty clouds are kept;
    callers detect them with ``len(cloud) == 0``.
    """
    return [(i, points_in_box(scene.cloud, a))
            for i, a in enumerate(scene.annotations) if a.is_real]


def subsample_indices(n: int, n_out: int, rng: np.random.Generator) -> np.ndarray:
    if n_out < 1:
        raise ValueError("subsample size must be at least 1")
    if n == 0:
        raise ValueError("cannot subsample an empty cloud")
    if n >= n_out:
        return rng.permutation(n)[:n_out]
    extra = rng.integers(0, n, size=n_out - n)
    return np.concatenate([rng.permutation(n), extra])


def subsample(cloud: PointCloud, n_out: int, seed) -> PointCloud:
    """Uniform draw without replacement; pads with replacement when short."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = subsample_indices(len(cloud), n_out, rng)
    feats = None if cloud.features is None else cloud.features[idx]
    return PointCloud(cloud.points[idx], feats)


def iou3d(a: Annotation, b: Annotation) -> float:
    return float(kernels.iou_matrix(a.box[None], b.box[None])[0, 0])


# -- synthetic scenes --------------------------------------------------------

@dataclass
class ClassSpec:
    name: str
    mean_size: tuple[float, float, float]
    spread: float = 0.15

    def __post_init__(self):
        self.mean_size = tuple(float(v) for v in self.mean_size)


def _default_classes():
    return [
        ClassSpec("crate", (0.5, 0.5, 0.5)),
        ClassSpec("chair", (0.6, 0.6, 1.0)),
        ClassSpec("table", (1.6, 0.9, 0.75)),
    ]


@dataclass
class GenConfig:
    classes: list[ClassSpec] = field(default_factory=_default_classes)
    objects_per_scene: tuple[int, int] = (2, 5)
    bounds: tuple = (0.0, 0.0, 0.0, 6.0, 6.0, 2.5)
    points_per_object: tuple[int, int] = (60, 100)
    background_points: int = 150
    noise_sigma: float = 0.01
    min_gap: float = 0.1

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        self.objects_per_scene = tuple(int(v) for v in self.objects_per_scene)
        self.points_per_object = tuple(int(v) for v in self.points_per_object)
        self.bounds = tuple(float(v) for v in self.bounds)
        if not self.classes:
            raise ValueError("at least one class is required")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        lo, hi = self.points_per_object
        if lo < 1 or hi < lo:
            raise ValueError(f"bad points_per_object {self.points_per_object}")
        if self.background_points < 0 or self.noise_sigma < 0:
            raise ValueError("background_points and noise_sigma must be non-negative")
        b = self.bounds
        if len(b) != 6 or not all(b[i + 3] > b[i] for i in range(3)):
            raise ValueError(f"bad bounds {self.bounds}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def size_stats(self) -> list[tuple[np.ndarray, float]]:
        """Per class ``(mean size, relative spread)``; fakes are drawn from these."""
        return [(np.array(c.mean_size), c.spread) for c in self.classes]


# fraction of each dimension left between the sampled surface and the true face
_INSET = 0.075


def _surface_points(center, size, count, rng):
    inner = np.asarray(size) * (1.0 - 2 * _INSET)
    l, w, h = inner
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(count, 3)) * inner
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(count), axis] = sign * inner[axis]
    return np.asarray(center) + u


def sample_box_size(spec: ClassSpec, rng) -> np.ndarray:
    return np.array(spec.mean_size) * (1.0 + rng.uniform(-spec.spread, spec.spread, size=3))


def generate_scene(cfg: GenConfig, seed, scene_id: str | None = None) -> Scene:
    """Random non-overlapping boxes resting on the floor, plus clutter."""
    rng = np.random.default_rng(seed)
    lo = np.array(cfg.bounds[:3])
    hi = np.array(cfg.bounds[3:])
    n_obj = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
    boxes: list[Annotation] = []
    for _ in range(n_obj):
        for _attempt in range(1000):
            cls = int(rng.integers(cfg.num_classes))
            size = sample_box_size(cfg.classes[cls], rng)
            if np.any(size >= hi - lo):
                continue
            xy = rng.uniform(lo[:2] + size[:2] / 2, hi[:2] - size[:2] / 2)
            center = np.array([xy[0], xy[1], lo[2] + size[2] / 2])
            grown = Annotation(center, size + cfg.min_gap, cls)
            if all(iou3d(grown, b) == 0.0 for b in boxes):
                boxes.append(Annotation(center, size, cls))
                break
        else:
            raise GenerationError(f"could not place object {len(boxes) + 1} of {n_obj} without overlap")
    parts = []
    for box in boxes:
        count = int(rng.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
        parts.append(_surface_points(box.center, box.size, count, rng))
    if parts and cfg.noise_sigma > 0:
        obj = np.concatenate(parts)
        obj = obj + rng.normal(0.0, cfg.noise_sigma, size=obj.shape)
        parts = [obj]
    if cfg.background_points:
        parts.append(rng.uniform(lo, hi, size=(cfg.background_points, 3)))
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    points = points[rng.permutation(len(points))]
    sid = scene_id if scene_id is not None else f"scene_{seed}"
    return Scene(PointCloud(points), AnnotationSet(boxes), sid, cfg.bounds)


# -- files ---------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "bounds": list(scene.bounds),
        "points": scene.cloud.points.tolist(),
        "annotations": [
            {"center": list(a.center), "size": list(a.size), "class": a.cls, "is_real": a.is_real}
            for a in scene.annotations
        ],
    }


def scene_from_dict(doc, where: str = "<scene>") -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{where}: top level must be an object")
    for key in ("scene_id", "bounds", "points", "annotations"):
        if key not in doc:
            raise SceneFormatError(f'{where}: missing "{key}" key')
    try:
        points = np.array(doc["points"], dtype=np.float64).reshape(-1, 3)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f'{where}: field "points": {exc}') from None
    bounds = doc["bounds"]
    if not isinstance(bounds, list) or len(bounds) != 6:
        raise SceneFormatError(f'{where}: field "bounds" must list 6 numbers')
    anns = []
    for i, a in enumerate(doc["annotations"]):
        try:
            anns.append(Annotation(a["center"], a["size"], a["class"], bool(a.get("is_real", True))))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{where}: annotation {i}: {exc}") from None
    try:
        return Scene(PointCloud(points), AnnotationSet(anns), str(doc["scene_id"]), tuple(bounds))
    except ValueError as exc:
        raise SceneFormatError(f"{where}: {exc}") from None


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc, str(path))


def write_dataset(root, splits: dict[str, list[Scene]], meta: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, "meta": meta or {}}
    for split, scenes in splits.items():
        manifest["splits"][split] = []
        for sc in scenes:
            save_scene(sc, root / f"{sc.scene_id}.json")
            manifest["splits"][split].append(sc.scene_id)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise SceneFormatError(f"{path}: manifest not found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if "splits" not in manifest:
        raise SceneFormatError(f'{path}: missing "splits" key')
    return manifest


def load_split(root, split: str) -> list[Scene]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise SceneFormatError(f"split {split!r} not in manifest (have {sorted(manifest['splits'])})")
    return [load_scene(Path(root) / f"{sid}.json") for sid in manifest["splits"][split]]
