"""Implicit neural field: a density trunk over encoded position and a colour
head over (base feature, encoded direction)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class FieldConfig:
    position_freqs: int = 10
    direction_freqs: int = 4
    hidden_width: int = 256
    depth: int = 8
    base_feature_dim: int = 256
    # positions are divided by this before encoding; pick ~ scene radius
    position_scale: float = 1.0

    def __post_init__(self):
        for name in ("position_freqs", "direction_freqs", "hidden_width", "depth", "base_feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"FieldConfig.{name} must be positive")
        if self.base_feature_dim < 8:
            raise ValueError("FieldConfig.base_feature_dim must be >= 8")
        if not self.position_scale > 0:
            raise ValueError("FieldConfig.position_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FieldOutput:
    sigma: torch.Tensor  # (..., )
    colour: torch.Tensor  # (..., 3)
    base: torch.Tensor  # (..., base_feature_dim)


def positional_encode(x: torch.Tensor, freqs: int) -> torch.Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(F-1) pi x), cos(2^(F-1) pi x)].

    Output length is d + 2 * d * freqs for a d-vector input.
    """
    if freqs < 1:
        raise ValueError("freqs must be >= 1")
    out = [x]
    for k in range(freqs):
        w = (2.0**k) * math.pi
        out.append(torch.sin(w * x))
        out.append(torch.cos(w * x))
    return torch.cat(out, dim=-1)


def encoded_dim(d: int, freqs: int) -> int:
    return d + 2 * d * freqs


class NeuralField(nn.Module):
    def __init__(self, config: FieldConfig = FieldConfig()):
        super().__init__()
        self.config = config
        in_pos = encoded_dim(3, config.position_freqs)
        w = config.hidden_width
        self.skip = config.depth // 2 if config.depth > 2 else None
        layers = []
        for i in range(config.depth):
            d_in = in_pos if i == 0 else w
            if self.skip is not None and i == self.skip:
                d_in += in_pos
            layers.append(nn.Linear(d_in, w))
        self.trunk = nn.ModuleList(layers)
        self.sigma_layer = nn.Linear(w, 1)
        self.base_layer = nn.Linear(w, config.base_feature_dim)

        in_dir = encoded_dim(3, config.direction_freqs)
        self.colour_net = nn.Sequential(
            nn.Linear(config.base_feature_dim + in_dir, w // 2),
            nn.ReLU(),
            nn.Linear(w // 2, 3),
        )

    # parameter groups ---------------------------------------------------

    def density_modules(self) -> list[nn.Module]:
        return [self.trunk, self.sigma_layer, self.base_layer]

    def density_parameters(self):
        for m in self.density_modules():
            yield from m.parameters()

    def density_state(self) -> dict[str, torch.Tensor]:
        """Named copies of every density sub-network tensor."""
        keep = ("trunk.", "sigma_layer.", "base_layer.")
        return {k: v.detach().clone() for k, v in self.state_dict().items() if k.startswith(keep)}

    # forward ------------------------------------------------------------

    def density(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """sigma (...,) and base feature (..., base_feature_dim) from position only."""
        enc = positional_encode(points / self.config.position_scale, self.config.position_freqs)
        h = enc
        for i, layer in enumerate(self.trunk):
            if i == self.skip:
                h = torch.cat([h, enc], dim=-1)
            h = F.relu(layer(h))
        sigma = F.softplus(self.sigma_layer(h)).squeeze(-1)
        return sigma, self.base_layer(h)

    def colour(self, base: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        enc = positional_encode(directions, self.config.direction_freqs)
        return torch.sigmoid(self.colour_net(torch.cat([base, enc], dim=-1)))

    def forward(self, points: torch.Tensor, directions: torch.Tensor) -> FieldOutput:
        sigma, base = self.density(points)
        return FieldOutput(sigma=sigma, colour=self.colour(base, directions), base=base)


def query_field(points, directions, field: NeuralField) -> FieldOutput:
    """Evaluate the field at points (n, 3) seen along unit directions (n, 3)."""
    points = torch.as_tensor(points)
    directions = torch.as_tensor(directions)
    if not (torch.isfinite(points).all() and torch.isfinite(directions).all()):
        raise ValueError("query_field got non-finite coordinates")
    norms = directions.norm(dim=-1)
    if directions.numel() and (norms - 1).abs().max() > 1e-4:
        raise ValueError("query_field directions must be unit vectors")
    dtype = next(field.parameters()).dtype
    return field(points.to(dtype), directions.to(dtype))


def freeze_density(field: NeuralField) -> NeuralField:
    """Stop gradients into the trunk, sigma and base-feature layers (idempotent)."""
    for p in field.density_parameters():
        p.requires_grad_(False)
    return field


def freeze_colour(field: NeuralField) -> NeuralField:
    for p in field.colour_net.parameters():
        p.requires_grad_(False)
    return field


def is_density_frozen(field: NeuralField) -> bool:
    return not any(p.requires_grad for p in field.density_parameters())
