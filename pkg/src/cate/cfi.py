"""Concept-feature interference: cosine similarity profile -> SELU projection."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .errors import DegenerateInputError, ValidationError

SELU_SCALE = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


def similarity_vector(alpha: torch.Tensor, cs_anchors: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each row of ``alpha`` to each class-specific anchor.

    Works on a single vector (C,) or a bag (N, C); anchors are (m, C) in bank order.
    """
    norms = alpha.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateInputError("cosine similarity undefined for a zero-norm feature")
    unit_anchors = cs_anchors / cs_anchors.norm(dim=-1, keepdim=True)
    return (alpha / norms) @ unit_anchors.T


class SnnLayer(nn.Module):
    """One affine map followed by SELU, with LeCun-normal init (std 1/sqrt(m))."""

    def __init__(self, m: int, out_dim: int):
        super().__init__()
        self.m = m
        self.weight = nn.Parameter(torch.empty(m, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            self.weight.normal_(0.0, 1.0 / math.sqrt(self.m), generator=generator)
            self.bias.zero_()

    def forward(self, sim: torch.Tensor) -> torch.Tensor:
        return interference(sim, self)


def interference(sim_vec: torch.Tensor, layer: SnnLayer) -> torch.Tensor:
    if sim_vec.shape[-1] != layer.weight.shape[0]:
        raise ValidationError(f"similarity width {sim_vec.shape[-1]} != SNN input width {layer.weight.shape[0]}")
    return F.selu(sim_vec @ layer.weight + layer.bias)


def enhance(alpha: torch.Tensor, cs_anchors: torch.Tensor, layer: SnnLayer) -> torch.Tensor:
    """z = [alpha | beta] per patch, width 2C."""
    beta = interference(similarity_vector(alpha, cs_anchors), layer)
    return torch.cat([alpha, beta], dim=-1)
