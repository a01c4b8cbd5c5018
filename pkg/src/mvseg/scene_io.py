"""Posed multi-view scenes with sparse label maps.

On-disk layout of a scene directory::

    images/NNN.png    8-bit RGB
    labels/NNN.png    8-bit class indices, 255 = ignore (only for labeled views)
    poses.json        per-view intrinsics + 4x4 row-major camera-to-world
    split.json        view name -> "train-labeled" | "train-unlabeled" | "test"
    meta.json         class_count, class_names, near, far

Cameras look down -z in their own frame, +x right, +y up (image y grows
downward). Continuous pixel coordinates put the centre of pixel (row i,
column j) at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IGNORE_LABEL = 255
DEFAULT_LABELED_FRACTION = 0.02


class SceneError(ValueError):
    """Raised for malformed scene directories or invalid scene contents."""


class Split(str, enum.Enum):
    TRAIN_LABELED = "train-labeled"
    TRAIN_UNLABELED = "train-unlabeled"
    TEST = "test"


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    focal: float
    principal_point: tuple[float, float]
    pose: np.ndarray  # 4x4 camera-to-world

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise SceneError(f"pose must be 4x4, got {pose.shape}")
        rot = pose[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) >= 1e-5:
            raise SceneError("rotation block of pose is not orthonormal")
        if not self.focal > 0:
            raise SceneError(f"focal must be positive, got {self.focal}")
        px, py = self.principal_point
        if not (0 <= px < self.width and 0 <= py < self.height):
            raise SceneError(f"principal point {self.principal_point} outside image")
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "principal_point", (float(px), float(py)))

    @property
    def centre(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (n, 3) -> continuous pixel coordinates (n, 2)."""
        points = np.atleast_2d(points)
        cam = (points - self.centre) @ self.rotation  # R^T (p - t)
        depth = -cam[:, 2]
        x = self.principal_point[0] + self.focal * cam[:, 0] / depth
        y = self.principal_point[1] - self.focal * cam[:, 1] / depth
        return np.stack([x, y], axis=-1)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "focal": self.focal,
            "principal_point": list(self.principal_point),
            "c2w": self.pose.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            focal=float(d["focal"]),
            principal_point=tuple(d["principal_point"]),
            pose=np.asarray(d["c2w"], dtype=np.float64).reshape(4, 4),
        )


def look_at_pose(eye: Sequence[float], target: Sequence[float], up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


@dataclass(frozen=True)
class View:
    name: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    camera: CameraModel
    label_map: np.ndarray | None = None  # H x W uint8, IGNORE_LABEL = unlabeled pixel


@dataclass(frozen=True)
class Scene:
    views: tuple[View, ...]
    class_count: int
    split: tuple[Split, ...]
    near: float
    far: float
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "split", tuple(Split(s) for s in self.split))
        if len(self.split) != len(self.views):
            raise SceneError("split must tag every view")
        if not 0 <= self.near < self.far:
            raise SceneError(f"need 0 <= near < far, got {self.near}, {self.far}")
        for v in self.views:
            h, w = v.image.shape[:2]
            if (h, w) != (v.camera.height, v.camera.width):
                raise SceneError(f"view {v.name}: image size does not match camera")
            if v.label_map is not None:
                if v.label_map.shape != (h, w):
                    raise SceneError(f"view {v.name}: label map size {v.label_map.shape} != image size {(h, w)}")
                bad = (v.label_map != IGNORE_LABEL) & (v.label_map >= self.class_count)
                if bad.any():
                    raise SceneError(f"view {v.name}: label out of range (class_count={self.class_count})")

    def __len__(self):
        return len(self.views)

    def indices(self, *tags: Split | str) -> list[int]:
        tags = {Split(t) for t in tags}
        return [i for i, s in enumerate(self.split) if s in tags]

    def require_labeled(self):
        if not self.indices(Split.TRAIN_LABELED):
            raise SceneError("scene has no train-labeled view")


def assign_split(
    n_views: int,
    labeled_fraction: float = DEFAULT_LABELED_FRACTION,
    test_every: int = 2,
) -> list[Split]:
    """Default split: every `test_every`-th view (offset 1) is a test view; a
    `labeled_fraction` of the training views (at least one) carries labels."""
    tags = [Split.TEST if (i % test_every == 1) else Split.TRAIN_UNLABELED for i in range(n_views)]
    train = [i for i, t in enumerate(tags) if t is Split.TRAIN_UNLABELED]
    n_labeled = max(1, int(round(labeled_fraction * len(train))))
    pick = np.linspace(0, len(train) - 1, n_labeled).round().astype(int)
    for i in pick:
        tags[train[i]] = Split.TRAIN_LABELED
    return tags


# ---------------------------------------------------------------------------
# Disk format


def _view_names(path: Path) -> list[str]:
    return sorted(p.stem for p in (path / "images").glob("*.png"))


def save_scene(scene: Scene, path: str | Path) -> Path:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    labels_dir = path / "labels"
    poses, split = {}, {}
    for view, tag in zip(scene.views, scene.split):
        rgb = np.round(np.clip(view.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(path / "images" / f"{view.name}.png")
        if view.label_map is not None:
            labels_dir.mkdir(exist_ok=True)
            Image.fromarray(view.label_map.astype(np.uint8), mode="L").save(labels_dir / f"{view.name}.png")
        poses[view.name] = view.camera.to_dict()
        split[view.name] = tag.value
    (path / "poses.json").write_text(json.dumps(poses, indent=1))
    (path / "split.json").write_text(json.dumps(split, indent=1))
    meta = {
        "class_count": scene.class_count,
        "class_names": list(scene.class_names),
        "near": scene.near,
        "far": scene.far,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    return path


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    for required in ("images", "poses.json", "split.json", "meta.json"):
        if not (path / required).exists():
            raise SceneError(f"{path}: missing {required}")
    meta = json.loads((path / "meta.json").read_text())
    poses = json.loads((path / "poses.json").read_text())
    split = json.loads((path / "split.json").read_text())
    class_count = int(meta["class_count"])

    views, tags = [], []
    for name in _view_names(path):
        if name not in poses:
            raise SceneError(f"view {name}: image has no pose entry in poses.json")
        if name not in split:
            raise SceneError(f"view {name}: not listed in split.json")
        image = np.asarray(Image.open(path / "images" / f"{name}.png").convert("RGB"))
        label_file = path / "labels" / f"{name}.png"
        label_map = None
        if label_file.exists():
            label_map = np.asarray(Image.open(label_file))
            if label_map.ndim != 2:
                raise SceneError(f"view {name}: label map must be single channel")
            if label_map.shape != image.shape[:2]:
                raise SceneError(f"view {name}: label map size {label_map.shape} != image size {image.shape[:2]}")
            if ((label_map != IGNORE_LABEL) & (label_map >= class_count)).any():
                raise SceneError(f"view {name}: label out of range (class_count={class_count})")
        views.append(
            View(
                name=name,
                image=image.astype(np.float32) / 255.0,
                camera=CameraModel.from_dict(poses[name]),
                label_map=label_map,
            )
        )
        tags.append(split[name])
    if not views:
        raise SceneError(f"{path}: no images found")
    return Scene(
        views=tuple(views),
        class_count=class_count,
        split=tuple(tags),
        near=float(meta["near"]),
        far=float(meta["far"]),
        class_names=tuple(meta.get("class_names", ())),
    )


# ---------------------------------------------------------------------------
# Rays


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[float, float]
    view_id: int


@dataclass
class RayBundle:
    """Struct-of-arrays batch of rays; indexing yields a single `Ray`."""

    origins: np.ndarray  # (n, 3)
    directions: np.ndarray  # (n, 3) unit
    near: float
    far: float
    pixels: np.ndarray  # (n, 2) continuous (x, y)
    view_ids: np.ndarray  # (n,)

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i: int) -> Ray:
        return Ray(
            origin=self.origins[i],
            direction=self.directions[i],
            near=self.near,
            far=self.far,
            pixel=(float(self.pixels[i, 0]), float(self.pixels[i, 1])),
            view_id=int(self.view_ids[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer pixel indices of each ray's pixel."""
        cols = np.floor(self.pixels[:, 0]).astype(np.int64)
        rows = np.floor(self.pixels[:, 1]).astype(np.int64)
        return rows, cols

    @classmethod
    def concatenate(cls, bundles: Iterable["RayBundle"]) -> "RayBundle":
        bundles = list(bundles)
        return cls(
            origins=np.concatenate([b.origins for b in bundles]),
            directions=np.concatenate([b.directions for b in bundles]),
            near=bundles[0].near,
            far=bundles[0].far,
            pixels=np.concatenate([b.pixels for b in bundles]),
            view_ids=np.concatenate([b.view_ids for b in bundles]),
        )


def generate_rays(
    camera: CameraModel,
    pixels: np.ndarray | Sequence[tuple[float, float]],
    near: float,
    far: float,
    view_id: int = 0,
) -> RayBundle:
    """Back-project continuous pixel coordinates through the pinhole model."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if not 0 <= near < far:
        raise SceneError(f"need 0 <= near < far, got {near}, {far}")
    x, y = pixels[:, 0], pixels[:, 1]
    if ((x < 0) | (x > camera.width) | (y < 0) | (y > camera.height)).any():
        raise SceneError("pixel coordinates outside image bounds")
    px, py = camera.principal_point
    dirs_cam = np.stack([(x - px) / camera.focal, -(y - py) / camera.focal, -np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return RayBundle(
        origins=np.broadcast_to(camera.centre, dirs.shape).copy(),
        directions=dirs,
        near=float(near),
        far=float(far),
        pixels=pixels,
        view_ids=np.full(len(pixels), view_id, dtype=np.int64),
    )


def pixel_centres(width: int, height: int) -> np.ndarray:
    """All pixel centres of an image in row-major order, shape (H*W, 2)."""
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def view_rays(scene: Scene, view_id: int) -> RayBundle:
    cam = scene.views[view_id].camera
    return generate_rays(cam, pixel_centres(cam.width, cam.height), scene.near, scene.far, view_id)


def sample_ray_batch(
    scene: Scene,
    count: int,
    pool: Iterable[Split | str] | None = None,
    rng_seed: int | np.random.Generator = 0,
) -> RayBundle:
    """Uniform draws over all (view, pixel) pairs of the views in `pool`.

    `pool=None` means every view. Passing a Generator instead of a seed lets a
    training loop keep drawing from one stream.
    """
    view_ids = list(range(len(scene))) if pool is None else scene.indices(*pool)
    if not view_ids:
        raise SceneError(f"ray pool {list(pool)} selects no views")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    sizes = np.array([scene.views[v].camera.width * scene.views[v].camera.height for v in view_ids])
    flat = rng.integers(0, sizes.sum(), size=count)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    which = np.searchsorted(offsets, flat, side="right") - 1
    bundles = []
    for k in np.unique(which):
        vid = view_ids[k]
        cam = scene.views[vid].camera
        local = flat[which == k] - offsets[k]
        pix = np.stack([local % cam.width + 0.5, local // cam.width + 0.5], axis=-1)
        bundles.append((np.nonzero(which == k)[0], generate_rays(cam, pix, scene.near, scene.far, vid)))
    if not bundles:
        return RayBundle(np.zeros((0, 3)), np.zeros((0, 3)), scene.near, scene.far, np.zeros((0, 2)), np.zeros(0, np.int64))
    # restore draw order so the batch depends only on the seed
    order = np.concatenate([idx for idx, _ in bundles])
    merged = RayBundle.concatenate(b for _, b in bundles)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return RayBundle(
        origins=merged.origins[inv],
        directions=merged.directions[inv],
        near=merged.near,
        far=merged.far,
        pixels=merged.pixels[inv],
        view_ids=merged.view_ids[inv],
    )


def gather_pixels(scene: Scene, rays: RayBundle) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth colours (n, 3) and labels (n,) for each ray's pixel.

    Rays from views without a label map get IGNORE_LABEL.
    """
    rows, cols = rays.rows_cols
    colours = np.empty((len(rays), 3), dtype=np.float32)
    labels = np.full(len(rays), IGNORE_LABEL, dtype=np.int64)
    for vid in np.unique(rays.view_ids):
        m = rays.view_ids == vid
        view = scene.views[vid]
        colours[m] = view.image[rows[m], cols[m]]
        if view.label_map is not None:
            labels[m] = view.label_map[rows[m], cols[m]]
    return colours, labels
