"""Nearest-class-centroid pseudo-labels in foundation-feature space."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image

from .foundation_features import FeatureMap, dense_lookup
from .scene_io import IGNORE_LABEL

log = logging.getLogger(__name__)

Metric = Literal["euclidean", "cosine"]
PSEUDO_DIR = "labels_pseudo"


@dataclass(frozen=True)
class ClassCentroids:
    centroids: np.ndarray  # (L, D) float64; NaN rows for invalid classes
    counts: np.ndarray  # (L,) int64
    metric: Metric = "euclidean"

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    @property
    def class_count(self) -> int:
        return len(self.counts)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: str | Path):
        np.savez(path, centroids=self.centroids, counts=self.counts, metric=np.array(self.metric))

    @classmethod
    def load(cls, path: str | Path) -> "ClassCentroids":
        with np.load(path) as z:
            return cls(z["centroids"], z["counts"], str(z["metric"]))


@dataclass(frozen=True)
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) uint8
    margins: np.ndarray  # (H, W) float32, runner-up distance minus best distance
    view_id: int | None = None


def compute_centroids(
    feature_maps: Sequence[FeatureMap],
    label_maps: Sequence[np.ndarray],
    class_count: int,
    metric: Metric = "euclidean",
) -> ClassCentroids:
    """Mean feature of every labeled pixel per class, pooled over all views.

    Features are read at each labeled pixel's centre by bilinear lookup.
    Classes without labeled pixels are kept but flagged invalid (NaN row).
    """
    if metric not in ("euclidean", "cosine"):
        raise ValueError(f"unknown metric {metric!r}")
    if len(feature_maps) != len(label_maps):
        raise ValueError("need one label map per feature map")
    if not feature_maps:
        raise ValueError("no labeled views")
    dim = feature_maps[0].dim
    sums = np.zeros((class_count, dim), dtype=np.float64)
    counts = np.zeros(class_count, dtype=np.int64)
    for fmap, labels in zip(feature_maps, label_maps):
        labels = np.asarray(labels)
        if labels.shape != fmap.source_size:
            raise ValueError(f"label map {labels.shape} does not match feature source size {fmap.source_size}")
        if fmap.dim != dim:
            raise ValueError("feature maps disagree on dimension")
        feats = dense_lookup(fmap).astype(np.float64)
        mask = labels != IGNORE_LABEL
        lab = labels[mask].astype(np.int64)
        if lab.size and lab.max() >= class_count:
            raise ValueError("label out of range")
        np.add.at(sums, lab, feats[mask])
        counts += np.bincount(lab, minlength=class_count)
    if counts.sum() == 0:
        raise ValueError("no labeled pixels to build centroids from")
    centroids = np.full_like(sums, np.nan)
    ok = counts > 0
    centroids[ok] = sums[ok] / counts[ok, None]
    missing = np.nonzero(~ok)[0].tolist()
    if missing:
        log.warning("classes %s have no labeled pixels; excluded from pseudo-labeling", missing)
    return ClassCentroids(centroids, counts, metric)


def centroid_distances(features: np.ndarray, centroids: ClassCentroids) -> np.ndarray:
    """Distances (..., L) from features (..., D); invalid classes get +inf."""
    f = np.asarray(features, dtype=np.float64)
    c = centroids.centroids
    out = np.full(f.shape[:-1] + (centroids.class_count,), np.inf)
    for k in np.nonzero(centroids.valid)[0]:
        if centroids.metric == "euclidean":
            out[..., k] = np.sqrt(((f - c[k]) ** 2).sum(-1))
        else:
            denom = np.linalg.norm(f, axis=-1) * np.linalg.norm(c[k])
            cos = (f @ c[k]) / np.where(denom > 0, denom, 1.0)
            out[..., k] = 1.0 - cos
    return out


def assign_pseudo_labels(fmap: FeatureMap, centroids: ClassCentroids, view_id: int | None = None) -> PseudoLabelMap:
    """Label every pixel with its nearest valid centroid (lowest index wins ties)."""
    if not centroids.valid.any():
        raise ValueError("no valid class centroids")
    if fmap.dim != centroids.dim:
        raise ValueError(f"feature dim {fmap.dim} != centroid dim {centroids.dim}")
    dist = centroid_distances(dense_lookup(fmap), centroids)
    labels = np.argmin(dist, axis=-1)
    best = np.take_along_axis(dist, labels[..., None], -1)[..., 0]
    if centroids.valid.sum() > 1:
        second = np.partition(dist, 1, axis=-1)[..., 1]
        margins = second - best
    else:
        margins = np.zeros_like(best)
    return PseudoLabelMap(labels.astype(np.uint8), margins.astype(np.float32), view_id)


def save_pseudo_labels(scene_dir: str | Path, view_name: str, plm: PseudoLabelMap) -> None:
    out = Path(scene_dir) / PSEUDO_DIR
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(plm.labels, mode="L").save(out / f"{view_name}.png")
    np.save(out / f"margins_{view_name}.npy", plm.margins)


def load_pseudo_labels(scene_dir: str | Path, view_name: str) -> np.ndarray:
    path = Path(scene_dir) / PSEUDO_DIR / f"{view_name}.png"
    if not path.exists():
        raise FileNotFoundError(f"missing pseudo-label map {path}; run the pseudo-label step first")
    return np.asarray(Image.open(path))


def write_centroid_report(scene_dir: str | Path, centroids: ClassCentroids, backend_id: str) -> None:
    out = Path(scene_dir) / PSEUDO_DIR
    out.mkdir(parents=True, exist_ok=True)
    centroids.save(out / "centroids.npz")
    report = {
        "backend_id": backend_id,
        "metric": centroids.metric,
        "counts": centroids.counts.tolist(),
        "invalid_classes": np.nonzero(~centroids.valid)[0].tolist(),
    }
    (out / "centroids.json").write_text(json.dumps(report, indent=1))
