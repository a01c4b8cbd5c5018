"""End-to-end recipe: gen -> extract -> pseudo-label -> train1 -> train2 -> evaluate.

Each step's key hashes its own config section together with the content
hashes of the artifacts it reads. A step is skipped when the manifest holds
the same key and every recorded output still hashes to the recorded value.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .evaluator import format_table, write_scores_csv
from .foundation_features import make_backend
from .neural_field import FieldConfig
from .scene_io import load_scene, save_scene
from .semantic_fusion import FusionConfig
from .synthetic_scenes import ToySceneSpec, default_toy_spec, generate_toy_scene
from .trainer import TrainConfig, train_stage1, train_stage2
from .workflow import (
    FEATURE_DIR,
    dense_features,
    evaluate_views,
    load_scene_features,
    read_pseudo_labels,
    save_scene_features,
    scene_features,
    write_pseudo_labels,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STEPS = ("gen", "extract", "pseudo-label", "train1", "train2", "evaluate")
_FUSION_KEYS = {f for f in FusionConfig.__dataclass_fields__} - {"semantic_dim", "base_feature_dim", "prior_dim"}


@dataclass
class PipelineConfig:
    output: str = "runs/toy"
    seed: int = 0
    # exactly one of scene_path (an existing scene directory) and scene_spec
    scene_path: str | None = None
    scene_spec: dict | None = None
    backend: dict = dc_field(default_factory=lambda: {"name": "stub", "patch_size": 2})
    metric: str = "euclidean"
    field: dict = dc_field(default_factory=dict)
    fusion: dict = dc_field(default_factory=dict)
    stage1: dict = dc_field(default_factory=dict)
    stage2: dict = dc_field(default_factory=dict)
    eval_samples: int | None = None

    def __post_init__(self):
        if self.scene_path is not None and self.scene_spec is not None:
            raise ValueError("give either scene_path or scene_spec, not both")
        unknown = set(self.fusion) - _FUSION_KEYS
        if unknown:
            raise ValueError(f"unknown fusion keys: {sorted(unknown)}")
        # fail early on malformed sections
        self.field_config()
        self.train_config(1)
        self.train_config(2)
        self.toy_spec()

    def field_config(self) -> FieldConfig:
        return FieldConfig(**self.field)

    def train_config(self, stage: int) -> TrainConfig:
        section = self.stage1 if stage == 1 else self.stage2
        return TrainConfig.from_dict({**section, "stage": stage, "rng_seed": self.seed})

    def toy_spec(self) -> ToySceneSpec | None:
        if self.scene_path is not None:
            return None
        spec = ToySceneSpec.from_dict(self.scene_spec) if self.scene_spec else default_toy_spec()
        return replace(spec, rng_seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        return cls.from_dict(yaml.safe_load(path.read_text()) or {})


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_hashes(root: Path, patterns: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for pattern in patterns:
        for p in sorted(root.glob(pattern)):
            if p.is_file():
                out[str(p.relative_to(root))] = file_hash(p)
    return out


def _key(*parts: Any) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StepOutcome:
    name: str
    ran: bool
    seconds: float


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.output)
        self.scene_dir = Path(config.scene_path) if config.scene_path else self.root / "scene"
        self.manifest_path = self.root / MANIFEST
        self.manifest: dict = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    # outputs of each step, as (directory, glob patterns) relative hashes
    def _outputs(self, step: str) -> tuple[Path, tuple[str, ...]]:
        return {
            "gen": (self.scene_dir, ("images/*.png", "labels/*.png", "*.json")),
            "extract": (self.scene_dir, (f"{FEATURE_DIR}/*.feat",)),
            "pseudo-label": (self.scene_dir, ("labels_pseudo/*",)),
            "train1": (self.root / "train1", ("stage1.ckpt",)),
            "train2": (self.root / "train2", ("stage2.ckpt",)),
            "evaluate": (self.root / "eval", ("scores.csv",)),
        }[step]

    def _hashes(self, step: str) -> dict[str, str]:
        root, patterns = self._outputs(step)
        return tree_hashes(root, patterns) if root.exists() else {}

    def _current(self, step: str, key: str) -> bool:
        entry = self.manifest.get(step)
        if not entry or entry.get("key") != key or not entry.get("outputs"):
            return False
        return self._hashes(step) == entry["outputs"]

    def _record(self, step: str, key: str):
        self.manifest[step] = {"key": key, "outputs": self._hashes(step)}
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))
        tmp.replace(self.manifest_path)

    def _step_keys(self) -> dict[str, Callable[[], str]]:
        c = self.config
        out = lambda s: self.manifest.get(s, {}).get("outputs", {})  # noqa: E731
        return {
            "gen": lambda: _key("gen", c.scene_path, asdict(c.toy_spec()) if c.toy_spec() else None),
            "extract": lambda: _key("extract", c.backend, out("gen")),
            "pseudo-label": lambda: _key("pseudo", c.metric, out("gen"), out("extract")),
            "train1": lambda: _key("train1", c.field, c.train_config(1).to_dict(), out("gen")),
            "train2": lambda: _key(
                "train2", c.fusion, c.train_config(2).to_dict(), out("train1"), out("pseudo-label"), out("extract")
            ),
            "evaluate": lambda: _key("evaluate", c.eval_samples, out("train2"), out("gen"), out("extract")),
        }

    def run(self, until: str | None = None) -> list[StepOutcome]:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config.save(self.root / "config.yaml")
        keys = self._step_keys()
        outcomes = []
        for step in STEPS:
            key = keys[step]()
            t0 = time.perf_counter()
            if self._current(step, key):
                log.info("step %s: up to date", step)
                outcomes.append(StepOutcome(step, False, 0.0))
            else:
                log.info("step %s: running", step)
                getattr(self, "_" + step.replace("-", "_"))()
                self._record(step, key)
                outcomes.append(StepOutcome(step, True, time.perf_counter() - t0))
            if step == until:
                break
        return outcomes

    # steps

    def _gen(self):
        spec = self.config.toy_spec()
        if spec is None:
            load_scene(self.scene_dir)  # validates the existing scene
            return
        save_scene(generate_toy_scene(spec), self.scene_dir)

    def _backend(self):
        opts = dict(self.config.backend)
        return make_backend(opts.pop("name"), **opts)

    def _extract(self):
        scene = load_scene(self.scene_dir)
        save_scene_features(self.scene_dir, scene, scene_features(scene, self._backend()))

    def _pseudo_label(self):
        scene = load_scene(self.scene_dir)
        write_pseudo_labels(self.scene_dir, scene, load_scene_features(self.scene_dir, scene), self.config.metric)

    def _train1(self):
        scene = load_scene(self.scene_dir)
        train_stage1(scene, self.config.train_config(1), self.config.field_config(), out_dir=self.root / "train1")

    def _train2(self):
        scene = load_scene(self.scene_dir)
        feats = dense_features(load_scene_features(self.scene_dir, scene))
        train_stage2(
            scene,
            self.root / "train1" / "stage1.ckpt",
            read_pseudo_labels(self.scene_dir, scene),
            feats,
            self.config.train_config(2),
            self.config.fusion,
            out_dir=self.root / "train2",
        )

    def _evaluate(self):
        scene = load_scene(self.scene_dir)
        feats = dense_features(load_scene_features(self.scene_dir, scene))
        out = self.root / "eval"
        scores, total = evaluate_views(
            self.root / "train2" / "stage2.ckpt", scene, feats, n_samples=self.config.eval_samples, dump_dir=out / "pred"
        )
        write_scores_csv(out / "scores.csv", scores, total, scene.class_names)
        log.info("evaluation\n%s", format_table(scores, total))


def run_pipeline(config: PipelineConfig, until: str | None = None) -> list[StepOutcome]:
    return Pipeline(config).run(until)
