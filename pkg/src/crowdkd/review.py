"""Review refinement: re-decode the feature re-weighted by the previous density map.

Each round computes ``M_i = D(F * M_{i-1} + F)`` with the model's own decoder
``D``, so wrapping a model adds no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .distill import resize_feature

NORMALIZATIONS = ("raw", "minmax")


class WrapError(TypeError):
    """The model does not expose an ``encode``/``decoder`` seam."""


@dataclass
class ReviewConfig:
    rounds: int = 2
    normalization: str = "raw"
    resize_mode: str = "bilinear"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.resize_mode != "bilinear":
            raise ValueError("only bilinear map resizing is supported")


def _attention(prev_map, size, normalization):
    att = resize_feature(prev_map, size)
    if normalization == "minmax":
        flat = att.flatten(start_dim=-3)
        lo = flat.min(dim=-1).values[..., None, None, None]
        hi = flat.max(dim=-1).values[..., None, None, None]
        att = (att - lo) / (hi - lo + 1e-12)
    elif normalization != "raw":
        raise ValueError(f"unknown normalization {normalization!r}")
    return att


def review_step(feature, prev_map, decoder, normalization: str = "raw"):
    """One review round; ``prev_map`` (N, 1, h, w) is resized to the feature grid."""
    in_channels = getattr(decoder, "in_channels", None)
    if in_channels is not None and feature.shape[-3] != in_channels:
        raise ValueError(f"decoder expects {in_channels} channels, feature has {feature.shape[-3]}")
    if prev_map.shape[-3] != 1:
        raise ValueError("density maps must have a single channel")
    att = _attention(prev_map, feature.shape[-2:], normalization)
    return decoder(feature * att + feature)


def review_forward(feature, decoder, rounds: int, normalization: str = "raw"):
    """Return ``[M_0, ..., M_rounds]``."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    maps = [decoder(feature)]
    for _ in range(rounds):
        maps.append(review_step(feature, maps[-1], decoder, normalization))
    return maps


def review_loss(maps, G):
    """Sum over rounds of the squared Frobenius distance to the hard target ``G``."""
    total = torch.zeros((), dtype=torch.float64)
    for m in maps:
        if m.shape != G.shape:
            raise ValueError(f"map shape {tuple(m.shape)} does not match target {tuple(G.shape)}")
        total = total + (m.to(torch.float64) - G.to(torch.float64)).pow(2).sum()
    return total


class ReviewWrapped(nn.Module):
    """Encoder-decoder model followed by ``rounds`` review rounds (shared decoder)."""

    def __init__(self, model, rounds: int = 2, normalization: str = "raw"):
        super().__init__()
        self.config = ReviewConfig(rounds, normalization)
        self.model = model

    @property
    def rounds(self):
        return self.config.rounds

    @property
    def decoder(self):
        return self.model.decoder

    def encode(self, x):
        return self.model.encode(x)

    def forward(self, x, return_all: bool = False):
        feature, _ = self.model.encode(x)
        maps = review_forward(feature, self.model.decoder, self.config.rounds, self.config.normalization)
        return maps if return_all else maps[-1]


def wrap_with_review(model, rounds: int = 2, normalization: str = "raw") -> ReviewWrapped:
    if not callable(getattr(model, "encode", None)) or not isinstance(getattr(model, "decoder", None), nn.Module):
        raise WrapError(f"{type(model).__name__} has no encode/decoder seam to review")
    return ReviewWrapped(model, rounds, normalization)
