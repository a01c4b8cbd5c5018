"""Rendering rays through the field (and optionally the fusion head)."""

from __future__ import annotations

import numpy as np
import torch

from .neural_field import NeuralField
from .scene_io import RayBundle
from .semantic_fusion import SemanticFusionHead
from .volume_renderer import RenderOutput, composite, sample_along_ray


def _field_frozen(field: NeuralField) -> bool:
    return not any(p.requires_grad for p in field.parameters())


def render_rays(
    field: NeuralField,
    rays: RayBundle,
    n_samples: int,
    head: SemanticFusionHead | None = None,
    pixel_features: torch.Tensor | np.ndarray | None = None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
) -> RenderOutput:
    """Colour (and, with a head, semantics) for every ray in the bundle."""
    dtype = next(field.parameters()).dtype
    origins = torch.as_tensor(rays.origins, dtype=dtype)
    dirs = torch.as_tensor(rays.directions, dtype=dtype)
    samples = sample_along_ray(origins, dirs, rays.near, rays.far, n_samples, stratified, generator)
    view_dirs = dirs[:, None, :].expand_as(samples.positions)
    if _field_frozen(field):
        with torch.no_grad():
            out = field(samples.positions, view_dirs)
    else:
        out = field(samples.positions, view_dirs)
    attrs = None
    if head is not None:
        if pixel_features is None:
            raise ValueError("semantic rendering needs a pixel feature per ray")
        prior = torch.as_tensor(pixel_features, dtype=dtype)
        attrs = head(out.base, prior, samples.depths)
    return composite(out.sigma, samples.deltas, out.colour, attrs)


def render_view_chunks(
    field: NeuralField,
    rays: RayBundle,
    n_samples: int,
    head: SemanticFusionHead | None = None,
    pixel_features: np.ndarray | None = None,
    chunk: int = 2048,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Deterministic no-grad rendering in chunks: colours (n, 3), seg (n, L) or None."""
    colours, segs = [], []
    with torch.no_grad():
        for start in range(0, len(rays), chunk):
            sl = slice(start, start + chunk)
            sub = RayBundle(rays.origins[sl], rays.directions[sl], rays.near, rays.far, rays.pixels[sl], rays.view_ids[sl])
            feats = pixel_features[sl] if pixel_features is not None else None
            out = render_rays(field, sub, n_samples, head, feats)
            colours.append(out.colour.numpy())
            if out.seg is not None:
                segs.append(out.seg.numpy())
    return np.concatenate(colours), (np.concatenate(segs) if segs else None)
