"""Dense per-image foundation features with a pluggable encoder backend.

Two backends ship:

* ``stub``: patch colour moments plus a fixed random "texture hash"
  projection, D = 32. Deterministic, dependency-free, used in tests.
* ``sam``: the Segment Anything image encoder (D = 256). Needs the
  ``segment_anything`` package and an encoder weights file.

Grid cell (u, v) is centred at image coordinates
((u + 0.5) * W / w_f, (v + 0.5) * H / h_f).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CACHE_ENV = "MVSEG_FEATURE_CACHE"
SAM_WEIGHTS_ENV = "MVSEG_SAM_CHECKPOINT"
_CACHE_MAGIC = b"MVSEGFT1"


class BackendUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    grid: np.ndarray  # (h_f, w_f, D) float32
    source_size: tuple[int, int]  # (H, W)
    backend_id: str

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if grid.ndim != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
            raise ValueError(f"feature grid must be (h_f, w_f, D), got {grid.shape}")
        if not np.isfinite(grid).all():
            raise ValueError("feature grid has non-finite entries")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "source_size", (int(self.source_size[0]), int(self.source_size[1])))

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.backend_id.encode())
        h.update(struct.pack("<5q", *self.grid.shape, *self.source_size))
        h.update(self.grid.tobytes())
        return h.hexdigest()


class FeatureBackend:
    name: str = "base"
    feature_dim: int = 0
    requires_cache = False

    @property
    def backend_id(self) -> str:
        return self.name

    def extract(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class StubBackend(FeatureBackend):
    """Per-patch colour moments + a fixed nonlinear projection of patch
    statistics. Each cell depends only on the pixels of its own patch."""

    name = "stub"
    feature_dim = 32
    _hash_seed = 0x5EED

    def __init__(self, patch_size: int = 16):
        if patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        self.patch_size = patch_size
        rng = np.random.default_rng(self._hash_seed)
        self._proj = rng.normal(0.0, 1.5, size=(13, self.feature_dim - 6))

    @property
    def backend_id(self) -> str:
        return f"stub-p{self.patch_size}"

    def extract(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        H, W = img.shape[:2]
        hf = max(1, round(H / self.patch_size))
        wf = max(1, round(W / self.patch_size))
        rows = np.floor(np.arange(hf + 1) * H / hf).astype(int)
        cols = np.floor(np.arange(wf + 1) * W / wf).astype(int)
        grid = np.empty((hf, wf, self.feature_dim), dtype=np.float64)
        for v in range(hf):
            for u in range(wf):
                patch = img[rows[v] : rows[v + 1], cols[u] : cols[u + 1]]
                flat = patch.reshape(-1, 3)
                mean, var = flat.mean(0), flat.var(0)
                dx = np.abs(np.diff(patch, axis=1)).reshape(-1, 3).mean(0) if patch.shape[1] > 1 else np.zeros(3)
                dy = np.abs(np.diff(patch, axis=0)).reshape(-1, 3).mean(0) if patch.shape[0] > 1 else np.zeros(3)
                stats = np.concatenate([mean, np.sqrt(var), dx, dy, [1.0]])
                grid[v, u] = np.concatenate([mean, var, np.tanh(stats @ self._proj)])
        return grid.astype(np.float32)


class SamBackend(FeatureBackend):
    """Segment Anything image encoder. Weights are read from `checkpoint` or
    the MVSEG_SAM_CHECKPOINT environment variable."""

    name = "sam"
    feature_dim = 256
    requires_cache = True

    def __init__(self, variant: str = "vit_b", checkpoint: str | Path | None = None, device: str = "cpu"):
        self.variant = variant
        self.checkpoint = checkpoint or os.environ.get(SAM_WEIGHTS_ENV)
        self.device = device
        self._encoder = None

    @property
    def backend_id(self) -> str:
        return f"sam-{self.variant}-1024"

    def _load(self):
        if self._encoder is not None:
            return self._encoder
        hint = "use the stub backend (--backend stub) instead"
        try:
            from segment_anything import sam_model_registry
        except ImportError as e:
            raise BackendUnavailable(f"segment_anything is not installed; {hint}") from e
        if not self.checkpoint or not Path(self.checkpoint).is_file():
            raise BackendUnavailable(
                f"SAM encoder weights not found (set {SAM_WEIGHTS_ENV} or pass a checkpoint path); {hint}"
            )
        sam = sam_model_registry[self.variant](checkpoint=str(self.checkpoint))
        self._encoder = sam.to(self.device).eval()
        return self._encoder

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch

        sam = self._load()
        from segment_anything.utils.transforms import ResizeLongestSide

        H, W = image.shape[:2]
        size = sam.image_encoder.img_size
        resized = ResizeLongestSide(size).apply_image(np.round(np.asarray(image) * 255).astype(np.uint8))
        x = torch.as_tensor(resized, device=self.device).permute(2, 0, 1)[None].float()
        with torch.no_grad():
            feats = sam.image_encoder(sam.preprocess(x))[0]  # (256, 64, 64) on the padded square
        stride = size // feats.shape[-1]
        hv = -(-resized.shape[0] // stride)
        wv = -(-resized.shape[1] // stride)
        return feats[:, :hv, :wv].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def make_backend(name: str, **kwargs) -> FeatureBackend:
    if name == "stub":
        return StubBackend(**kwargs)
    if name == "sam":
        return SamBackend(**kwargs)
    raise ValueError(f"unknown feature backend {name!r}")


# ---------------------------------------------------------------------------
# Cache


def resolve_cache_dir(cache_dir: str | Path | None, backend: FeatureBackend) -> Path | None:
    if cache_dir is not None:
        return Path(cache_dir)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    if backend.requires_cache:
        return Path.home() / ".cache" / "mvseg" / "features"
    return None


def image_key(image: np.ndarray, backend: FeatureBackend) -> str:
    img = np.ascontiguousarray(image, dtype=np.float32)
    h = hashlib.sha256(backend.backend_id.encode())
    h.update(struct.pack("<3q", *img.shape))
    h.update(img.tobytes())
    return h.hexdigest()


def write_feature_file(path: str | Path, fmap: FeatureMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hf, wf, d = fmap.grid.shape
    header = json.dumps(
        {"backend_id": fmap.backend_id, "D": d, "h_f": hf, "w_f": wf, "H": fmap.source_size[0], "W": fmap.source_size[1]},
        sort_keys=True,
    ).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(fmap.grid.astype("<f4").tobytes())
    tmp.replace(path)
    return path


def read_feature_file(path: str | Path) -> FeatureMap:
    data = Path(path).read_bytes()
    if data[:8] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    grid = np.frombuffer(data, dtype="<f4", offset=12 + hlen).reshape(header["h_f"], header["w_f"], header["D"])
    return FeatureMap(grid.copy(), (header["H"], header["W"]), header["backend_id"])


def extract_features(
    image: np.ndarray,
    backend: FeatureBackend,
    cache_dir: str | Path | None = None,
) -> FeatureMap:
    """Run `backend` on an H x W x 3 image in [0, 1], reusing the disk cache
    when one is configured."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    cache = resolve_cache_dir(cache_dir, backend)
    cache_file = cache / f"{image_key(image, backend)}.feat" if cache is not None else None
    if cache_file is not None and cache_file.exists():
        return read_feature_file(cache_file)
    grid = backend.extract(image)
    if grid.shape[2] != backend.feature_dim:
        raise ValueError(f"backend {backend.backend_id} produced D={grid.shape[2]}, expected {backend.feature_dim}")
    fmap = FeatureMap(grid, image.shape[:2], backend.backend_id)
    if cache_file is not None:
        write_feature_file(cache_file, fmap)
    return fmap


# ---------------------------------------------------------------------------
# Lookup


def lookup(fmap: FeatureMap, x, y) -> np.ndarray:
    """Bilinear feature lookup at continuous image coordinates.

    Scalars give a D-vector; arrays give (..., D). Coordinates past the
    outermost cell centres are clamped to the border cells.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    H, W = fmap.source_size
    if (x < 0).any() or (x > W).any() or (y < 0).any() or (y > H).any():
        raise ValueError(f"lookup coordinates outside image of size {(H, W)}")
    hf, wf, _ = fmap.grid.shape
    gu = np.clip(x * wf / W - 0.5, 0.0, wf - 1)
    gv = np.clip(y * hf / H - 0.5, 0.0, hf - 1)
    u0 = np.minimum(np.floor(gu).astype(int), wf - 1)
    v0 = np.minimum(np.floor(gv).astype(int), hf - 1)
    u1 = np.minimum(u0 + 1, wf - 1)
    v1 = np.minimum(v0 + 1, hf - 1)
    fu = (gu - u0)[..., None]
    fv = (gv - v0)[..., None]
    g = fmap.grid.astype(np.float64)
    top = g[v0, u0] * (1 - fu) + g[v0, u1] * fu
    bottom = g[v1, u0] * (1 - fu) + g[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


def dense_lookup(fmap: FeatureMap) -> np.ndarray:
    """Features at every pixel centre, shape (H, W, D) float32."""
    H, W = fmap.source_size
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    return lookup(fmap, xs, ys).astype(np.float32)
