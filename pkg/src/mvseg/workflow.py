"""Scene-level steps shared by the CLI and the pipeline runner."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint
from .evaluator import ConfusionMatrix, ViewScore, accumulate, miou
from .foundation_features import (
    FeatureBackend,
    FeatureMap,
    dense_lookup,
    extract_features,
    read_feature_file,
    write_feature_file,
)
from .model import render_view_chunks
from .pseudo_labeler import (
    ClassCentroids,
    PseudoLabelMap,
    assign_pseudo_labels,
    compute_centroids,
    load_pseudo_labels,
    save_pseudo_labels,
    write_centroid_report,
)
from .scene_io import Scene, Split, view_rays
from .trainer import load_field, load_head

log = logging.getLogger(__name__)

FEATURE_DIR = "features"


def scene_features(scene: Scene, backend: FeatureBackend, cache_dir: str | Path | None = None) -> list[FeatureMap]:
    return [extract_features(v.image, backend, cache_dir) for v in scene.views]


def save_scene_features(scene_dir: str | Path, scene: Scene, fmaps: Sequence[FeatureMap]) -> list[Path]:
    out = Path(scene_dir) / FEATURE_DIR
    return [write_feature_file(out / f"{v.name}.feat", f) for v, f in zip(scene.views, fmaps)]


def load_scene_features(scene_dir: str | Path, scene: Scene) -> list[FeatureMap]:
    root = Path(scene_dir) / FEATURE_DIR
    fmaps = []
    for v in scene.views:
        path = root / f"{v.name}.feat"
        if not path.exists():
            raise FileNotFoundError(f"missing feature file {path}; run extract-features first")
        fmap = read_feature_file(path)
        if fmap.source_size != v.image.shape[:2]:
            raise ValueError(f"{path}: features were extracted from a {fmap.source_size} image")
        fmaps.append(fmap)
    return fmaps


def write_pseudo_labels(scene_dir: str | Path, scene: Scene, fmaps: Sequence[FeatureMap], metric: str = "euclidean"):
    centroids, maps = scene_pseudo_labels(scene, fmaps, metric)
    for vid, plm in maps.items():
        save_pseudo_labels(scene_dir, scene.views[vid].name, plm)
    write_centroid_report(scene_dir, centroids, fmaps[0].backend_id)
    return centroids, maps


def read_pseudo_labels(scene_dir: str | Path, scene: Scene) -> dict[int, np.ndarray]:
    return {v: load_pseudo_labels(scene_dir, scene.views[v].name) for v in scene.indices(Split.TEST)}


def dense_features(fmaps: Sequence[FeatureMap]) -> dict[int, np.ndarray]:
    return {i: dense_lookup(f) for i, f in enumerate(fmaps)}


def scene_centroids(scene: Scene, fmaps: Sequence[FeatureMap], metric: str = "euclidean") -> ClassCentroids:
    scene.require_labeled()
    ids = scene.indices(Split.TRAIN_LABELED)
    return compute_centroids([fmaps[i] for i in ids], [scene.views[i].label_map for i in ids], scene.class_count, metric)


def scene_pseudo_labels(
    scene: Scene, fmaps: Sequence[FeatureMap], metric: str = "euclidean"
) -> tuple[ClassCentroids, dict[int, PseudoLabelMap]]:
    """Centroids from labeled training views; pseudo-labels for every test view."""
    centroids = scene_centroids(scene, fmaps, metric)
    maps = {i: assign_pseudo_labels(fmaps[i], centroids, i) for i in scene.indices(Split.TEST)}
    return centroids, maps


def predict_view(field, head, scene: Scene, view_id: int, features: np.ndarray, n_samples: int, chunk: int = 2048):
    """Rendered colour (H, W, 3) and argmax label map (H, W) for one view."""
    cam = scene.views[view_id].camera
    rays = view_rays(scene, view_id)
    feats = features.reshape(-1, features.shape[-1])
    colour, seg = render_view_chunks(field, rays, n_samples, head, feats, chunk)
    labels = seg.argmax(-1).astype(np.uint8).reshape(cam.height, cam.width)
    return colour.reshape(cam.height, cam.width, 3), labels


def evaluate_views(
    checkpoint: str | Path,
    scene: Scene,
    pixel_features: dict[int, np.ndarray],
    views: Sequence[int] | None = None,
    n_samples: int | None = None,
    dump_dir: str | Path | None = None,
) -> tuple[list[ViewScore], ConfusionMatrix]:
    """Render each view's labels with a stage-2 checkpoint and score them."""
    torch.manual_seed(0)
    ckpt = load_checkpoint(checkpoint)
    field, head = load_field(ckpt), load_head(ckpt)
    field.eval()
    head.eval()
    n_samples = n_samples or int(ckpt.meta.get("train", {}).get("samples_per_ray", 64))
    views = scene.indices(Split.TEST) if views is None else list(views)
    total = ConfusionMatrix(scene.class_count)
    scores = []
    for v in views:
        gt = scene.views[v].label_map
        if gt is None:
            raise ValueError(f"view {scene.views[v].name} has no ground-truth label map")
        _, pred = predict_view(field, head, scene, v, pixel_features[v], n_samples)
        cm = accumulate(ConfusionMatrix(scene.class_count), gt, pred)
        m, ious = miou(cm)
        scores.append(ViewScore(scene.views[v].name, m, ious, cm.total))
        total = total.merge(cm)
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            Image.fromarray(pred, mode="L").save(Path(dump_dir) / f"{scene.views[v].name}_pred.png")
    return scores, total


def view_distance_order(scene: Scene, anchors: Sequence[int], candidates: Sequence[int]) -> list[int]:
    """Candidates sorted by camera-centre distance to the nearest anchor, farthest first."""
    centres = np.array([v.camera.centre for v in scene.views])
    dist = {c: min(np.linalg.norm(centres[c] - centres[a]) for a in anchors) for c in candidates}
    return sorted(candidates, key=lambda c: (-dist[c], c))
