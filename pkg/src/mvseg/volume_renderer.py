"""Sampling along rays and transmittance-weighted compositing.

Colour and semantic rendering share `compute_weights`; both accept arbitrary
leading batch dimensions with samples on the second-to-last axis for
attribute tensors and the last axis for weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DELTA_SENTINEL = 1e10


@dataclass
class RaySamples:
    depths: torch.Tensor  # (R, n)
    deltas: torch.Tensor  # (R, n)
    positions: torch.Tensor  # (R, n, 3)


@dataclass
class RenderOutput:
    colour: torch.Tensor  # (R, 3)
    seg: torch.Tensor | None  # (R, L) class probabilities
    seg_logits: torch.Tensor | None  # (R, L) composited semantic attributes
    weights: torch.Tensor  # (R, n)
    accumulated_opacity: torch.Tensor  # (R,)


def sample_along_ray(
    origins: torch.Tensor,
    directions: torch.Tensor,
    near: float,
    far: float,
    n: int,
    stratified: bool = False,
    generator: torch.Generator | int | None = None,
) -> RaySamples:
    """Split [near, far] into n equal bins; take bin centres, or one uniform
    draw per bin when `stratified`. The last delta is DELTA_SENTINEL."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    origins = torch.as_tensor(origins)
    directions = torch.as_tensor(directions, dtype=origins.dtype)
    batch = origins.shape[:-1]
    width = (far - near) / n
    lower = near + width * torch.arange(n, dtype=origins.dtype)
    if stratified:
        if isinstance(generator, int):
            generator = torch.Generator().manual_seed(generator)
        u = torch.rand(*batch, n, dtype=origins.dtype, generator=generator)
    else:
        u = torch.full((*batch, n), 0.5, dtype=origins.dtype)
    depths = lower + width * u
    deltas = torch.cat(
        [depths[..., 1:] - depths[..., :-1], torch.full((*batch, 1), DELTA_SENTINEL, dtype=origins.dtype)],
        dim=-1,
    )
    positions = origins[..., None, :] + directions[..., None, :] * depths[..., :, None]
    return RaySamples(depths=depths, deltas=deltas, positions=positions)


def compute_weights(sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """w_i = exp(-sum_{j<i} delta_j sigma_j) * (1 - exp(-delta_i sigma_i))."""
    sigmas = torch.as_tensor(sigmas)
    deltas = torch.as_tensor(deltas, dtype=sigmas.dtype)
    if (sigmas < 0).any() or (deltas < 0).any():
        raise ValueError("sigmas and deltas must be non-negative")
    optical = sigmas * deltas
    # shifted (exclusive) cumsum; subtracting optical from an inclusive cumsum
    # cancels catastrophically next to the 1e10 sentinel
    prefix = torch.cumsum(optical, dim=-1)
    prefix = torch.cat([torch.zeros_like(prefix[..., :1]), prefix[..., :-1]], dim=-1)
    return torch.exp(-prefix) * (1.0 - torch.exp(-optical))


def render_colour(weights: torch.Tensor, colours: torch.Tensor) -> torch.Tensor:
    return (weights[..., None] * colours).sum(dim=-2)


def render_semantics(weights: torch.Tensor, semantic_attrs: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Composite per-sample semantic attributes with the colour weights.

    The composited vector is a logit vector; with `normalize` it is passed
    through softmax so rows lie on the simplex.
    """
    logits = (weights[..., None] * semantic_attrs).sum(dim=-2)
    return torch.softmax(logits, dim=-1) if normalize else logits


def composite(
    sigmas: torch.Tensor,
    deltas: torch.Tensor,
    colours: torch.Tensor,
    semantic_attrs: torch.Tensor | None = None,
) -> RenderOutput:
    """One weight computation feeding both colour and semantic rendering."""
    weights = compute_weights(sigmas, deltas)
    logits = render_semantics(weights, semantic_attrs, normalize=False) if semantic_attrs is not None else None
    return RenderOutput(
        colour=render_colour(weights, colours),
        seg=torch.softmax(logits, dim=-1) if logits is not None else None,
        seg_logits=logits,
        weights=weights,
        accumulated_opacity=weights.sum(dim=-1),
    )
