"""Run configuration: one JSON document covering data, model, training and
ablation settings, plus dotted-path overrides from the command line."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .lai import AugmentConfig
from .scene import GenConfig
from .training import ModelConfig, TrainConfig

PROTOCOLS = ("baseline", "two_stage", "one_stage")

# accepted spellings in config files that differ from the field names
_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if isinstance(self.gen, dict):
            self.gen = _build(GenConfig, self.gen, "data.gen")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("scene counts must be non-negative")


@dataclass
class AblateConfig:
    """Declarative grid.

    ``groups`` is a list of ``{"name", "base", "cells" | "axes"}``.  ``cells``
    lists ``{"label", "set"}`` entries; ``axes`` maps dotted paths to value
    lists and expands to their product.  ``set`` / ``base`` hold dotted
    overrides plus the reserved key ``protocol``.
    """
    seeds: list = field(default_factory=lambda: [0])
    groups: list = field(default_factory=list)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("ablate.seeds must not be empty")
        for g in self.groups:
            if "name" not in g:
                raise ValueError("every ablation group needs a name")
            if ("cells" in g) == ("axes" in g):
                raise ValueError(f"group {g['name']!r} needs exactly one of 'cells' or 'axes'")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_split: str = "val"
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def __post_init__(self):
        if self.model.num_classes != self.data.gen.num_classes:
            raise ValueError(f"model.num_classes={self.model.num_classes} but the generator "
                             f"defines {self.data.gen.num_classes} classes")

    def to_dict(self) -> dict:
        doc = asdict(self)
        train = doc["train"]
        train["lambda"] = train.pop("lam")
        return json.loads(json.dumps(doc))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        name = _ALIASES.get(key, key)
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "ablate": AblateConfig}


def from_dict(doc: dict) -> RunConfig:
    doc = copy.deepcopy(doc)
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if key == "train" and isinstance(value, dict) and isinstance(value.get("augment"), dict):
                value["augment"] = _build(AugmentConfig, value["augment"], "train.augment")
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "eval_split":
            kwargs[key] = str(value)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_value(text: str):
    """JSON scalars and lists where possible, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, path: str, value) -> None:
    """Set ``a.b.c`` inside nested dicts, creating levels as needed."""
    parts = path.split(".")
    if not all(parts):
        raise ConfigError(f"bad override path {path!r}")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {path!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_set(items) -> list[tuple[str, object]]:
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects PATH=VALUE, got {item!r}")
        path, text = item.split("=", 1)
        out.append((path.strip(), parse_value(text)))
    return out


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_doc(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return doc


def load(paths=None, overrides=()) -> tuple[RunConfig, dict]:
    """Merge config files left to right, apply overrides, validate.

    Returns the validated config and the merged document it came from.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    doc = {}
    for path in paths or ():
        doc = deep_merge(doc, read_doc(path))
    for key, value in overrides:
        apply_override(doc, key, value)
    return from_dict(doc), doc
