"""Affordance decoding head and the focal + dice training objective."""

from __future__ import annotations

import torch
import torch.nn as nn

from .cmafm import FuseConv, broadcast_mean
from .errors import DomainError, ShapeError

PHI_EPS = 1e-7


class AffordanceDecoder(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.fuse = FuseConv(channels)
        self.head = nn.Linear(channels, 1)

    def logits(self, F_ti, F_tp):
        for x, what in ((F_ti, "F_ti"), (F_tp, "F_tp")):
            if x.dim() < 2 or x.shape[-2] != self.channels:
                raise ShapeError(f"{what}: expected [C={self.channels}, N], got {tuple(x.shape)}")
        F_alpha = self.fuse(broadcast_mean(F_ti, F_tp.shape[-1]), F_tp)
        return self.head(F_alpha.transpose(-1, -2)).squeeze(-1)

    def forward(self, F_ti, F_tp):
        """phi in (0, 1) per point, shape [..., N]."""
        # clamp keeps phi strictly inside (0, 1) where float32 sigmoid saturates
        return torch.sigmoid(self.logits(F_ti, F_tp)).clamp(PHI_EPS, 1.0 - PHI_EPS)


def decode(F_ti, F_tp, decoder):
    return decoder(F_ti, F_tp)


def _pair(phi, label):
    phi = torch.as_tensor(phi)
    label = torch.as_tensor(label, dtype=phi.dtype)
    if phi.shape != label.shape:
        raise ShapeError(f"phi {tuple(phi.shape)} and label {tuple(label.shape)} differ in shape")
    return phi, label


def focal_loss(phi, label, gamma=2.0, alpha=0.25):
    """Soft-label focal loss, mean over the last axis.

    Each point mixes the positive term (weight ``label``) and the negative
    term (weight ``1 - label``), as in binary cross-entropy.
    """
    phi, label = _pair(phi, label)
    if bool(((phi <= 0) | (phi >= 1)).any()):
        raise DomainError("focal loss needs phi strictly inside (0, 1)")
    pos = -alpha * (1 - phi) ** gamma * torch.log(phi)
    neg = -(1 - alpha) * phi ** gamma * torch.log1p(-phi)
    return (label * pos + (1 - label) * neg).mean(-1)


def dice_loss(phi, label, eps=1.0):
    phi, label = _pair(phi, label)
    inter = (phi * label).sum(-1)
    denom = (phi ** 2).sum(-1) + (label ** 2).sum(-1)
    return 1 - (2 * inter + eps) / (denom + eps)


def total_loss(phi, label, gamma=2.0, alpha=0.25, eps=1.0):
    """focal + dice, averaged over any leading batch axes."""
    return (focal_loss(phi, label, gamma, alpha) + dice_loss(phi, label, eps)).mean()
