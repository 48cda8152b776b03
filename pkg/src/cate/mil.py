"""Gated attention MIL head."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


def canonical_order(h: torch.Tensor) -> torch.Tensor:
    """Row order sorted lexicographically by value (first column most significant)."""
    keys = h.detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(keys.T[::-1]).copy()).to(h.device)


class AttentionHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int, hidden: int = 128):
        super().__init__()
        self.attn_v = nn.Linear(in_dim, hidden)
        self.attn_u = nn.Linear(in_dim, hidden)
        self.attn_w = nn.Linear(hidden, 1)
        self.classifier = nn.Linear(in_dim, num_classes)

    def attention_scores(self, h: torch.Tensor) -> torch.Tensor:
        gate = torch.tanh(self.attn_v(h)) * torch.sigmoid(self.attn_u(h))
        return self.attn_w(gate).squeeze(-1)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if h.ndim != 2 or h.shape[0] == 0:
            raise ValidationError(f"expected a non-empty (N, D) bag, got shape {tuple(h.shape)}")
        # Working on canonically ordered rows makes the output bitwise independent
        # of patch order; floating-point sums would otherwise differ in the last ulp.
        order = canonical_order(h)
        hs = h[order]
        att_sorted = torch.softmax(self.attention_scores(hs), dim=0)
        logits = self.classifier(att_sorted @ hs)
        attention = torch.empty_like(att_sorted)
        attention = attention.index_put((order,), att_sorted)
        return logits, attention


def classification_loss(logits: torch.Tensor, label: int) -> torch.Tensor:
    num_classes = logits.shape[-1]
    if not 0 <= int(label) < num_classes:
        raise ValidationError(f"label {label} outside [0, {num_classes})")
    return -torch.log_softmax(logits, dim=-1)[..., int(label)]
