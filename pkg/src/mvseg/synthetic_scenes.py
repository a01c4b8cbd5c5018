"""Procedural toy scenes: textured primitives ray-cast from a camera ring.

Rendering is exact (one ray per pixel centre, nearest hit wins, no shading),
so colours and labels are reproducible by a field that gets the geometry right.
Colour is a function of the surface point only, never of the viewing ray.
Pixels whose ray hits nothing are black with IGNORE_LABEL.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from .scene_io import IGNORE_LABEL, CameraModel, Scene, Split, View, generate_rays, look_at_pose, pixel_centres

PLANE_THICKNESS = 0.1


@dataclass(frozen=True)
class Primitive:
    shape: Literal["sphere", "box", "plane"]
    position: tuple[float, float, float]
    # sphere: radius; box: half extents (scalar or 3-vector); plane: half side of the square
    size: float | tuple[float, float, float]
    albedo: tuple[float, float, float]
    class_index: int
    # "flat": albedo everywhere
    # "azimuth": albedo facing +x, blending to albedo_alt facing -x
    # "checker": albedo / albedo_alt squares of side texture_scale in the xy plane
    texture: Literal["flat", "azimuth", "checker"] = "flat"
    albedo_alt: tuple[float, float, float] | None = None
    texture_scale: float = 1.0

    def surface_colour(self, points: np.ndarray) -> np.ndarray:
        """Albedo at surface points (n, 3) as (n, 3) float64."""
        base = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), points.shape).copy()
        if self.texture == "flat":
            return base
        alt = np.asarray(self.albedo_alt if self.albedo_alt is not None else self.albedo, dtype=np.float64)
        rel = points - np.asarray(self.position, dtype=np.float64)
        if self.texture == "azimuth":
            t = 0.5 * (1.0 - np.cos(np.arctan2(rel[:, 1], rel[:, 0])))
        elif self.texture == "checker":
            cells = np.floor(rel[:, 0] / self.texture_scale) + np.floor(rel[:, 1] / self.texture_scale)
            t = np.mod(cells, 2.0)
        else:
            raise ValueError(f"unknown texture {self.texture!r}")
        return (1.0 - t[:, None]) * base + t[:, None] * alt

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned solid occupied by a box or plane primitive."""
        c = np.asarray(self.position, dtype=np.float64)
        if self.shape == "box":
            half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            return c - half, c + half
        if self.shape == "plane":
            # a thin slab whose top face is the plane z = position.z
            s = float(self.size)
            return (
                np.array([c[0] - s, c[1] - s, c[2] - PLANE_THICKNESS]),
                np.array([c[0] + s, c[1] + s, c[2]]),
            )
        raise ValueError(f"{self.shape} has no box bounds")


@dataclass(frozen=True)
class CameraRing:
    radius: float
    height: float
    count: int
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phase: float = 0.0  # radians
    jitter: float = 0.0  # std of random angular offset per camera, radians


@dataclass(frozen=True)
class ToySceneSpec:
    primitives: tuple[Primitive, ...]
    camera_ring: CameraRing
    width: int = 64
    height: int = 64
    fov_degrees: float = 50.0
    near: float = 0.5
    far: float = 12.0
    labeled_views: tuple[int, ...] = (0,)
    test_views: tuple[int, ...] | None = None  # None: every odd view
    class_names: tuple[str, ...] = ()
    rng_seed: int = 0

    @property
    def class_count(self) -> int:
        return max(p.class_index for p in self.primitives) + 1

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_degrees) / 2)

    def validate(self):
        if not self.primitives:
            raise ValueError("toy scene needs at least one primitive")
        used = sorted({p.class_index for p in self.primitives})
        if used != list(range(len(used))):
            raise ValueError(f"class indices must be contiguous from 0, got {used}")
        if self.camera_ring.count < 1:
            raise ValueError("camera ring needs at least one camera")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySceneSpec":
        d = dict(d)
        prims = []
        for p in d.pop("primitives"):
            size = p["size"]
            prims.append(
                Primitive(
                    shape=p["shape"],
                    position=tuple(p["position"]),
                    size=tuple(size) if isinstance(size, (list, tuple)) else float(size),
                    albedo=tuple(p["albedo"]),
                    class_index=int(p["class_index"]),
                    texture=p.get("texture", "flat"),
                    albedo_alt=tuple(p["albedo_alt"]) if p.get("albedo_alt") is not None else None,
                    texture_scale=float(p.get("texture_scale", 1.0)),
                )
            )
        ring = d.pop("camera_ring")
        ring = CameraRing(**{**ring, "look_at": tuple(ring.get("look_at", (0.0, 0.0, 0.0)))})
        for key in ("labeled_views", "test_views", "class_names"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(primitives=tuple(prims), camera_ring=ring, **d)


def default_toy_spec(**overrides) -> ToySceneSpec:
    """Red sphere (class 1) on a grey ground plane (class 0), 16-camera ring."""
    base = dict(
        primitives=(
            Primitive("plane", (0.0, 0.0, 0.0), 3.0, (0.5, 0.5, 0.5), 0),
            Primitive("sphere", (0.0, 0.0, 0.8), 0.8, (0.9, 0.15, 0.1), 1),
        ),
        camera_ring=CameraRing(radius=4.0, height=2.5, count=16, look_at=(0.0, 0.0, 0.4)),
        width=48,
        height=48,
        fov_degrees=45.0,
        near=1.0,
        far=9.0,
        labeled_views=(0, 2),
        class_names=("ground", "sphere"),
    )
    base.update(overrides)
    return ToySceneSpec(**base)


def ring_cameras(spec: ToySceneSpec) -> list[CameraModel]:
    ring = spec.camera_ring
    rng = np.random.default_rng(spec.rng_seed)
    offsets = rng.normal(0.0, ring.jitter, size=ring.count) if ring.jitter > 0 else np.zeros(ring.count)
    cams = []
    for k in range(ring.count):
        theta = ring.phase + 2 * math.pi * k / ring.count + offsets[k]
        eye = (ring.radius * math.cos(theta), ring.radius * math.sin(theta), ring.height)
        cams.append(
            CameraModel(
                width=spec.width,
                height=spec.height,
                focal=spec.focal,
                principal_point=(spec.width / 2, spec.height / 2),
                pose=look_at_pose(eye, ring.look_at),
            )
        )
    return cams


def _sphere_hits(origins, dirs, centre, radius):
    oc = origins - centre
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 >= 0, t0, t1)
    return np.where((disc >= 0) & (t >= 0), t, np.inf)


def _box_hits(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t = np.where(tmin >= 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t >= 0), t, np.inf)


def cast_rays(primitives: Sequence[Primitive], origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit ray cast. Returns (depth, primitive index or -1)."""
    hits = np.empty((len(primitives), len(origins)))
    for k, p in enumerate(primitives):
        if p.shape == "sphere":
            hits[k] = _sphere_hits(origins, dirs, np.asarray(p.position, dtype=np.float64), float(p.size))
        else:
            hits[k] = _box_hits(origins, dirs, *p.box_bounds())
    idx = np.argmin(hits, axis=0)  # first minimum -> earliest primitive on exact ties
    depth = hits[idx, np.arange(len(origins))]
    idx = np.where(np.isfinite(depth), idx, -1)
    return depth, idx


def render_view(spec: ToySceneSpec, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Exact albedo image (H, W, 3) float32 and label map (H, W) uint8."""
    rays = generate_rays(camera, pixel_centres(camera.width, camera.height), spec.near, spec.far)
    depth, idx = cast_rays(spec.primitives, rays.origins, rays.directions)
    seen = depth[np.isfinite(depth)]
    if seen.size and (seen.min() < spec.near or seen.max() > spec.far):
        raise ValueError(
            f"visible geometry spans depths [{seen.min():.3f}, {seen.max():.3f}], outside [near, far]"
        )
    colours = np.zeros((len(idx), 3))
    hit_points = rays.origins + np.where(np.isfinite(depth), depth, 0.0)[:, None] * rays.directions
    for k, prim in enumerate(spec.primitives):
        mine = idx == k
        if mine.any():
            colours[mine] = prim.surface_colour(hit_points[mine])
    classes = np.array([p.class_index for p in spec.primitives] + [IGNORE_LABEL], dtype=np.uint8)
    image = colours.reshape(camera.height, camera.width, 3)
    labels = classes[idx].reshape(camera.height, camera.width)
    # quantise through 8 bits so a saved/loaded scene equals the generated one
    image = (np.round(image * 255.0) / 255.0).astype(np.float32)
    return image, labels


def generate_toy_scene(spec: ToySceneSpec) -> Scene:
    spec.validate()
    cams = ring_cameras(spec)
    n = len(cams)
    test = set(spec.test_views) if spec.test_views is not None else {i for i in range(n) if i % 2 == 1}
    labeled = set(spec.labeled_views)
    if labeled & test:
        raise ValueError(f"views {sorted(labeled & test)} are both labeled and test")
    if any(not 0 <= i < n for i in labeled | test):
        raise ValueError("split references a view outside the camera ring")
    views, split = [], []
    for i, cam in enumerate(cams):
        image, labels = render_view(spec, cam)
        if i in test:
            tag = Split.TEST
        elif i in labeled:
            tag = Split.TRAIN_LABELED
        else:
            tag = Split.TRAIN_UNLABELED
        # unlabeled training views carry no label map
        views.append(View(f"{i:03d}", image, cam, None if tag is Split.TRAIN_UNLABELED else labels))
        split.append(tag)
    names = spec.class_names or tuple(f"class{c}" for c in range(spec.class_count))
    return Scene(tuple(views), spec.class_count, tuple(split), spec.near, spec.far, names)


def ground_truth_density(spec: ToySceneSpec, point) -> bool | np.ndarray:
    """Point-in-primitive test; points on a surface count as inside."""
    pts = np.asarray(point, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    inside = np.zeros(len(flat), dtype=bool)
    for p in spec.primitives:
        if p.shape == "sphere":
            d = np.linalg.norm(flat - np.asarray(p.position), axis=-1)
            inside |= d <= float(p.size)
        else:
            lo, hi = p.box_bounds()
            inside |= np.all((flat >= lo) & (flat <= hi), axis=-1)
    if pts.ndim == 1:
        return bool(inside[0])
    return inside.reshape(pts.shape[:-1])
