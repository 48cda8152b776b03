"""Concept-guided information bottleneck: stochastic encoder, PIM and SIM losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


def _mlp(dim: int, hidden: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = dim
    for h in hidden:
        layers += [nn.Linear(width, h), nn.GELU()]
        width = h
    layers.append(nn.Linear(width, dim))
    return nn.Sequential(*layers)


class StochasticEncoder(nn.Module):
    """Per-patch Gaussian posterior q(alpha | x) = N(mu_net(x), exp(logvar_net(x)))."""

    def __init__(self, dim: int, hidden: Sequence[int] | None = None, init_logvar: float = 0.0):
        super().__init__()
        hidden = (dim, dim) if hidden is None else tuple(hidden)
        self.dim = dim
        self.mu_net = _mlp(dim, hidden)
        self.logvar_net = _mlp(dim, hidden)
        with torch.no_grad():
            self.logvar_net[-1].bias.fill_(init_logvar)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu = self.mu_net(x)
        logvar = self.logvar_net(x).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


@dataclass
class CalibratedSample:
    mu: torch.Tensor
    logvar: torch.Tensor
    alpha: torch.Tensor
    epsilon: torch.Tensor


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * logvar) * epsilon


def encode(
    encoder: StochasticEncoder,
    bag_features: torch.Tensor,
    generator: torch.Generator | None = None,
    train_mode: bool = True,
    epsilon: torch.Tensor | None = None,
) -> CalibratedSample:
    """Run the encoder on one bag.

    In train mode alpha is drawn with the reparameterization trick (``epsilon``
    from ``generator`` unless given explicitly); in eval mode alpha is the mean.
    """
    if not torch.isfinite(bag_features).all():
        raise ValidationError("bag features contain non-finite values")
    mu, logvar = encoder(bag_features)
    for name, out in (("mu_net", mu), ("logvar_net", logvar)):
        if not torch.isfinite(out).all():
            raise NumericError("encoder produced non-finite output", layer=name)
    if not train_mode:
        return CalibratedSample(mu, logvar, mu, torch.zeros_like(mu))
    if epsilon is None:
        epsilon = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return CalibratedSample(mu, logvar, reparameterize(mu, logvar, epsilon), epsilon)


@dataclass
class PimConfig:
    tau: float = 0.07
    normalize: bool = True
    positive: str = "mean"  # "mean": renormalized class mean; "max": best-matching class anchor

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.positive not in ("mean", "max"):
            raise ValidationError(f"positive must be 'mean' or 'max', got {self.positive!r}")


def infonce_from_logits(pos: torch.Tensor, logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-row ``-pos/tau + logsumexp(logits/tau)``; ``logits`` rows hold all m + n similarities."""
    return -pos / tau + torch.logsumexp(logits / tau, dim=-1)


def pim_loss(
    calibrated: CalibratedSample | torch.Tensor,
    anchors: torch.Tensor,
    positive: torch.Tensor,
    selected: Sequence[int] | torch.Tensor,
    cfg: PimConfig,
    class_anchors: torch.Tensor | None = None,
) -> torch.Tensor:
    """InfoNCE toward the bag's class concept, averaged over the selected patches.

    ``anchors`` stacks all m class-specific and n class-agnostic anchors (the
    denominator); ``positive`` is the renormalized class-mean anchor. With
    ``cfg.positive == "max"``, the positive is instead each patch's best match
    among ``class_anchors``.
    """
    alpha = calibrated.alpha if isinstance(calibrated, CalibratedSample) else calibrated
    idx = torch.as_tensor(selected, dtype=torch.long)
    if idx.numel() == 0:
        raise ValidationError("pim_loss needs at least one selected patch")
    if idx.min() < 0 or idx.max() >= alpha.shape[0]:
        raise ValidationError(f"selected indices out of range for a bag of {alpha.shape[0]} patches")
    a = alpha[idx]
    if cfg.normalize:
        a = F.normalize(a, dim=-1, eps=1e-12)
    logits = a @ anchors.T
    if cfg.positive == "max":
        if class_anchors is None:
            raise ValidationError("positive='max' requires class_anchors")
        pos = (a @ class_anchors.T).max(dim=-1).values
    else:
        pos = a @ positive
    return infonce_from_logits(pos, logits, cfg.tau).mean()


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def sim_loss(calibrated: CalibratedSample) -> torch.Tensor:
    """Mean over all patches of the closed-form KL to the standard-normal prior."""
    mu, logvar = calibrated.mu, calibrated.logvar
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NumericError("sim_loss received non-finite mu/logvar")
    return kl_to_standard_normal(mu, logvar).mean()


def infonce_estimate(samples_a, samples_b, tau: float = 1.0) -> float:
    """Symmetric in-batch InfoNCE estimate (nats) with critic ``-||a - b||^2 / tau``.

    Row i of ``samples_a`` is paired with row i of ``samples_b``; all other rows
    act as negatives. The estimate never exceeds ``ln B``.
    """
    a = torch.as_tensor(np.asarray(samples_a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(samples_b, dtype=np.float64))
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ValidationError(f"paired samples must share a shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    batch = a.shape[0]
    if batch < 2:
        raise ValidationError("infonce_estimate needs a batch of at least 2 pairs")
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    scores = -torch.cdist(a, b).pow(2) / tau
    diag = scores.diagonal()
    rows = (diag - torch.logsumexp(scores, dim=1)).mean()
    cols = (diag - torch.logsumexp(scores, dim=0)).mean()
    est = 0.5 * (rows + cols).item() + math.log(batch)
    return min(est, math.log(batch))
