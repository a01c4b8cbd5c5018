"""Two-stage optimisation.

Stage 1 fits density and colour to every view's RGB. Stage 2 freezes the
field and trains only the fusion head with a weighted cross-entropy over
labeled training rays (weight 1) and pseudo-labeled test rays (weight 0.001).
Both losses are means over the batch.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import render_rays
from .neural_field import FieldConfig, NeuralField, freeze_colour, freeze_density
from .scene_io import IGNORE_LABEL, RayBundle, Scene, SceneError, Split, gather_pixels, sample_ray_batch
from .semantic_fusion import FusionConfig, SemanticFusionHead

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 20000
    ray_batch_size: int = 1024
    samples_per_ray: int = 64
    learning_rate: float = 5e-4
    final_learning_rate: float = 5e-5
    lambda_train: float = 1.0
    lambda_pseudo: float = 0.001
    pseudo_mix_fraction: float = 0.5
    stratified: bool = True
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_every: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.lambda_train < 0 or self.lambda_pseudo < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.pseudo_mix_fraction <= 1.0:
            raise ValueError("pseudo_mix_fraction must lie in [0, 1]")
        if self.iterations < 0 or self.ray_batch_size < 1 or self.samples_per_ray < 1:
            raise ValueError("iterations >= 0, batch size and samples per ray >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def learning_rate_at(self, iteration: int) -> float:
        if self.iterations <= 0:
            return self.learning_rate
        frac = min(iteration / self.iterations, 1.0)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


@dataclass
class LossRecord:
    iteration: int
    loss_rgb: float = float("nan")
    loss_sem_train: float = float("nan")
    loss_sem_pseudo: float = float("nan")
    psnr: float = float("nan")
    wall_clock: float = 0.0


class LossLog:
    """Append-only CSV of LossRecords."""

    columns = [f.name for f in fields(LossRecord)]

    def __init__(self, path: str | Path | None, resume: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: list[LossRecord] = []
        if self.path is not None and self.path.exists() and not resume:
            self.path.unlink()
        if self.path is not None and self.path.exists():
            with open(self.path, newline="") as f:
                for row in csv.DictReader(f):
                    self.records.append(LossRecord(int(row["iteration"]), *(float(row[c]) for c in self.columns[1:])))

    @property
    def last_iteration(self) -> int:
        return self.records[-1].iteration if self.records else -1

    def append(self, rec: LossRecord):
        if rec.iteration <= self.last_iteration:
            raise ValueError(f"loss record {rec.iteration} is not after {self.last_iteration}")
        values = [getattr(rec, c) for c in self.columns[1:]]
        if not all(math.isfinite(v) or math.isnan(v) for v in values):
            raise ValueError(f"non-finite loss record {rec}")
        self.records.append(rec)
        if self.path is None:
            return
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(self.columns)
            w.writerow([rec.iteration] + [f"{v:.8g}" for v in values])


# ---------------------------------------------------------------------------
# Losses


def loss_rgb(rendered: torch.Tensor, ground_truth: torch.Tensor) -> torch.Tensor:
    """Squared L2 colour error per ray, averaged over the batch."""
    if rendered.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(ground_truth.shape)}")
    return ((rendered - ground_truth) ** 2).sum(dim=-1).mean()


def loss_semantic(
    seg_probs: torch.Tensor,
    targets: torch.Tensor,
    weights: torch.Tensor | float = 1.0,
    stats: dict | None = None,
) -> torch.Tensor:
    """Weighted categorical cross-entropy, -mean_r(lambda_r * log p_r[target_r]).

    Target probabilities are floored at 1e-12; `stats["clamped"]` counts how
    often that happened.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    weights = torch.as_tensor(weights, dtype=seg_probs.dtype).expand(targets.shape)
    p = seg_probs.gather(-1, targets[..., None]).squeeze(-1)
    clamped = int((p < PROB_FLOOR).sum())
    if clamped:
        log.warning("%d target probabilities clamped at %g", clamped, PROB_FLOOR)
        if stats is not None:
            stats["clamped"] = stats.get("clamped", 0) + clamped
    return -(weights * torch.log(p.clamp_min(PROB_FLOOR))).mean()


def psnr(mse: float) -> float:
    return -10.0 * math.log10(max(mse, 1e-12))


# ---------------------------------------------------------------------------
# Checkpoints


def field_checkpoint(field: NeuralField, meta: dict, head: SemanticFusionHead | None = None, optimizer=None) -> Checkpoint:
    tensors = {f"field.{k}": v for k, v in field.state_dict().items()}
    configs = {"field": field.config.to_dict()}
    if head is not None:
        tensors.update({f"fusion.{k}": v for k, v in head.state_dict().items()})
        configs["fusion"] = head.config.to_dict()
    if optimizer is not None:
        for i, st in optimizer.state_dict()["state"].items():
            for key, val in st.items():
                tensors[f"optim.{i}.{key}"] = torch.as_tensor(val)
    return Checkpoint(configs=configs, tensors=tensors, meta=meta)


def load_field(ckpt: Checkpoint | str | Path, expect: FieldConfig | None = None) -> NeuralField:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt, {"field": expect.to_dict()} if expect else None)
    elif expect is not None and ckpt.configs["field"] != expect.to_dict():
        raise ValueError("checkpoint field config does not match")
    field = NeuralField(FieldConfig(**ckpt.configs["field"]))
    field.load_state_dict(ckpt.namespace("field"))
    return field


def load_head(ckpt: Checkpoint | str | Path) -> SemanticFusionHead:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if "fusion" not in ckpt.configs:
        raise ValueError("checkpoint holds no fusion head (stage-1 checkpoint?)")
    head = SemanticFusionHead(FusionConfig(**ckpt.configs["fusion"]))
    head.load_state_dict(ckpt.namespace("fusion"))
    return head


def _restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint):
    state = optimizer.state_dict()
    stored = ckpt.namespace("optim")
    for name, val in stored.items():
        i, key = name.split(".", 1)
        state["state"].setdefault(int(i), {})[key] = val
    optimizer.load_state_dict(state)


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def _iteration_rng(seed: int, iteration: int) -> tuple[np.random.Generator, torch.Generator]:
    # per-iteration streams make a resumed run draw the same batches
    return np.random.default_rng([seed, iteration]), torch.Generator().manual_seed(seed * 1_000_003 + iteration)


def _dump_batch(out_dir: Path | None, iteration: int, rays: RayBundle) -> str:
    if out_dir is None:
        return "(no output directory for diagnostics)"
    path = out_dir / f"nonfinite_batch_{iteration:07d}.npz"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(path, origins=rays.origins, directions=rays.directions, pixels=rays.pixels, view_ids=rays.view_ids)
    return str(path)


# ---------------------------------------------------------------------------
# Stage 1


@dataclass
class StageResult:
    field: NeuralField
    head: SemanticFusionHead | None
    log: LossLog
    checkpoint_path: Path | None


def train_stage1(
    scene: Scene,
    config: TrainConfig,
    field_config: FieldConfig = FieldConfig(),
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    callback: Callable[[int, NeuralField], None] | None = None,
) -> StageResult:
    """Fit the field to the RGB of every view."""
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    if len(scene) < 2:
        raise SceneError("stage 1 needs at least two views")
    out_dir = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(config.rng_seed)
    field = NeuralField(field_config)
    optimizer = torch.optim.Adam(field.parameters(), lr=config.learning_rate)
    losses = LossLog(out_dir / "losses_stage1.csv" if out_dir else None, resume=resume is not None)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, {"field": field_config.to_dict()})
        field.load_state_dict(ckpt.namespace("field"))
        _restore_optimizer(optimizer, ckpt)
        start = int(ckpt.meta["iteration"])
    t0 = time.perf_counter()
    ckpt_path = None

    def save(iteration):
        nonlocal ckpt_path
        if out_dir is None:
            return
        meta = {"stage": 1, "iteration": iteration, "train": config.to_dict()}
        ckpt_path = save_checkpoint(out_dir / "stage1.ckpt", field_checkpoint(field, meta, optimizer=optimizer))
        if config.checkpoint_every and iteration % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage1_{iteration:07d}.ckpt", field_checkpoint(field, meta, optimizer=optimizer))

    for it in range(start, config.iterations):
        rng, gen = _iteration_rng(config.rng_seed, it)
        rays = sample_ray_batch(scene, config.ray_batch_size, None, rng)
        gt, _ = gather_pixels(scene, rays)
        _set_lr(optimizer, config.learning_rate_at(it))
        out = render_rays(field, rays, config.samples_per_ray, stratified=config.stratified, generator=gen)
        loss = loss_rgb(out.colour, torch.as_tensor(gt, dtype=out.colour.dtype))
        if not torch.isfinite(loss):
            where = _dump_batch(out_dir, it, rays)
            raise FloatingPointError(f"non-finite stage-1 loss at iteration {it}; batch dumped to {where}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        done = it + 1
        if done % config.log_every == 0 or done == config.iterations:
            mse = float(((out.colour.detach() - torch.as_tensor(gt)) ** 2).mean())
            losses.append(LossRecord(done, loss_rgb=float(loss.detach()), psnr=psnr(mse), wall_clock=time.perf_counter() - t0))
            log.info("stage1 it %d loss %.5f psnr %.2f", done, float(loss.detach()), psnr(mse))
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save(done)
        if callback is not None:
            callback(done, field)
    save(max(start, config.iterations))
    return StageResult(field, None, losses, ckpt_path)


# ---------------------------------------------------------------------------
# Stage 2


def build_head(field: NeuralField, class_count: int, prior_dim: int, overrides: Mapping | None = None) -> SemanticFusionHead:
    cfg = FusionConfig(
        semantic_dim=class_count,
        base_feature_dim=field.config.base_feature_dim,
        prior_dim=prior_dim,
        **dict(overrides or {}),
    )
    return SemanticFusionHead(cfg)


def _gather_labels(rays: RayBundle, label_maps: Mapping[int, np.ndarray], what: str) -> np.ndarray:
    rows, cols = rays.rows_cols
    out = np.empty(len(rays), dtype=np.int64)
    for vid in np.unique(rays.view_ids):
        if int(vid) not in label_maps:
            raise KeyError(f"no {what} for view {int(vid)}")
        m = rays.view_ids == vid
        out[m] = label_maps[int(vid)][rows[m], cols[m]]
    return out


def _gather_features(rays: RayBundle, pixel_features: Mapping[int, np.ndarray]) -> np.ndarray:
    rows, cols = rays.rows_cols
    dim = next(iter(pixel_features.values())).shape[-1]
    out = np.empty((len(rays), dim), dtype=np.float32)
    for vid in np.unique(rays.view_ids):
        m = rays.view_ids == vid
        out[m] = pixel_features[int(vid)][rows[m], cols[m]]
    return out


def stage2_batch(
    scene: Scene,
    config: TrainConfig,
    pseudo_labels: Mapping[int, np.ndarray],
    rng: np.random.Generator,
) -> tuple[RayBundle, np.ndarray, np.ndarray, np.ndarray]:
    """Mixed batch: rays, targets, per-ray loss weights, is-pseudo mask.

    Pixels with the ignore label are dropped.
    """
    train_views = scene.indices(Split.TRAIN_LABELED)
    test_views = scene.indices(Split.TEST)
    n_pseudo = int(round(config.ray_batch_size * config.pseudo_mix_fraction)) if test_views else 0
    n_train = config.ray_batch_size - n_pseudo
    parts = []
    if n_train:
        rays = sample_ray_batch(scene, n_train, [Split.TRAIN_LABELED], rng)
        labels = _gather_labels(rays, {v: scene.views[v].label_map for v in train_views}, "label map")
        parts.append((rays, labels, np.full(len(rays), config.lambda_train), np.zeros(len(rays), bool)))
    if n_pseudo:
        rays = sample_ray_batch(scene, n_pseudo, [Split.TEST], rng)
        labels = _gather_labels(rays, pseudo_labels, "pseudo-label map")
        parts.append((rays, labels, np.full(len(rays), config.lambda_pseudo), np.ones(len(rays), bool)))
    rays = RayBundle.concatenate(p[0] for p in parts)
    labels = np.concatenate([p[1] for p in parts])
    lam = np.concatenate([p[2] for p in parts])
    pseudo = np.concatenate([p[3] for p in parts])
    keep = labels != IGNORE_LABEL
    sub = RayBundle(rays.origins[keep], rays.directions[keep], rays.near, rays.far, rays.pixels[keep], rays.view_ids[keep])
    return sub, labels[keep], lam[keep], pseudo[keep]


def stage2_loss(
    field: NeuralField,
    head: SemanticFusionHead,
    rays: RayBundle,
    targets: np.ndarray,
    lam: np.ndarray,
    features: np.ndarray,
    n_samples: int,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    stats: dict | None = None,
):
    out = render_rays(field, rays, n_samples, head, features, stratified, generator)
    loss = loss_semantic(out.seg, torch.as_tensor(targets), torch.as_tensor(lam, dtype=out.seg.dtype), stats)
    return loss, out


def train_stage2(
    scene: Scene,
    stage1_checkpoint: str | Path | Checkpoint,
    pseudo_labels: Mapping[int, np.ndarray],
    pixel_features: Mapping[int, np.ndarray],
    config: TrainConfig,
    fusion_overrides: Mapping | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> StageResult:
    """Train the fusion head on top of the frozen stage-1 field.

    `pseudo_labels` maps every test view id to an (H, W) label map and
    `pixel_features` maps every view id to dense (H, W, D) features.
    """
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    scene.require_labeled()
    missing = [v for v in scene.indices(Split.TEST) if v not in pseudo_labels]
    if missing and config.pseudo_mix_fraction > 0:
        raise SceneError(f"missing pseudo-labels for test views {missing}")
    out_dir = Path(out_dir) if out_dir is not None else None

    field = load_field(stage1_checkpoint)
    freeze_density(field)
    freeze_colour(field)
    prior_dim = next(iter(pixel_features.values())).shape[-1]
    torch.manual_seed(config.rng_seed)
    head = build_head(field, scene.class_count, prior_dim, fusion_overrides)
    optimizer = torch.optim.Adam([p for p in head.parameters() if p.requires_grad], lr=config.learning_rate)
    losses = LossLog(out_dir / "losses_stage2.csv" if out_dir else None, resume=resume is not None)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, {"field": field.config.to_dict(), "fusion": head.config.to_dict()})
        head.load_state_dict(ckpt.namespace("fusion"))
        _restore_optimizer(optimizer, ckpt)
        start = int(ckpt.meta["iteration"])
    t0 = time.perf_counter()
    stats: dict = {}
    ckpt_path = None

    def save(iteration):
        nonlocal ckpt_path
        if out_dir is None:
            return
        meta = {"stage": 2, "iteration": iteration, "train": config.to_dict()}
        ckpt = field_checkpoint(field, meta, head=head, optimizer=optimizer)
        ckpt_path = save_checkpoint(out_dir / "stage2.ckpt", ckpt)
        if config.checkpoint_every and iteration % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage2_{iteration:07d}.ckpt", ckpt)

    for it in range(start, config.iterations):
        rng, gen = _iteration_rng(config.rng_seed, it)
        rays, targets, lam, is_pseudo = stage2_batch(scene, config, pseudo_labels, rng)
        if len(rays) == 0:
            continue
        feats = _gather_features(rays, pixel_features)
        _set_lr(optimizer, config.learning_rate_at(it))
        loss, out = stage2_loss(field, head, rays, targets, lam, feats, config.samples_per_ray, config.stratified, gen, stats)
        if not torch.isfinite(loss):
            where = _dump_batch(out_dir, it, rays)
            raise FloatingPointError(f"non-finite stage-2 loss at iteration {it}; batch dumped to {where}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        done = it + 1
        if done % config.log_every == 0 or done == config.iterations:
            with torch.no_grad():
                p = out.seg.gather(-1, torch.as_tensor(targets)[:, None]).squeeze(-1).clamp_min(PROB_FLOOR)
                ce = -torch.log(p) * torch.as_tensor(lam, dtype=p.dtype)
                mask = torch.as_tensor(is_pseudo)
                n = len(targets)
                sem_train = float(ce[~mask].sum() / n)
                sem_pseudo = float(ce[mask].sum() / n)
            losses.append(
                LossRecord(done, loss_sem_train=sem_train, loss_sem_pseudo=sem_pseudo, wall_clock=time.perf_counter() - t0)
            )
            log.info("stage2 it %d loss %.5f (train %.5f pseudo %.6f)", done, float(loss.detach()), sem_train, sem_pseudo)
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save(done)
    save(max(start, config.iterations))
    return StageResult(field, head, losses, ckpt_path)


