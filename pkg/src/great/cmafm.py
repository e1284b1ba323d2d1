"""Cross-modal adaptive fusion of knowledge with point and image features.

Feature maps are channel-first, ``[C, N]`` (optionally with leading batch
dims). Text matrices are row-major, ``[N, C]``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .backbones import PointwiseMLP
from .errors import ConfigError, ShapeError


def _check(x, channels, what):
    if x.dim() < 2 or x.shape[-2] != channels:
        raise ShapeError(f"{what}: expected [C={channels}, N], got {tuple(x.shape)}")


class FuseConv(nn.Module):
    """Channel concatenation followed by two 1x1 convolutions, 2C -> C -> C."""

    def __init__(self, channels):
        super().__init__()
        self.mlp = PointwiseMLP([2 * channels, channels, channels], final_act=False)

    def forward(self, a, b):
        return self.mlp(torch.cat([a, b], dim=-2))


def broadcast_mean(x, n):
    """Mean over the last axis of [..., C, M], expanded to [..., C, n]."""
    return x.mean(dim=-1, keepdim=True).expand(*x.shape[:-1], n)


class CrossModalFusion(nn.Module):
    def __init__(self, channels, d=None):
        super().__init__()
        d = channels if d is None else d
        if d <= 0:
            raise ConfigError("projection dimension d must be positive")
        self.channels, self.d = channels, d
        # point queries reading knowledge
        self.w1 = nn.Linear(channels, d, bias=False)
        self.w2 = nn.Linear(channels, d, bias=False)
        self.w3 = nn.Linear(channels, channels, bias=False)
        # knowledge queries reading points
        self.w4 = nn.Linear(channels, d, bias=False)
        self.w5 = nn.Linear(channels, d, bias=False)
        self.w6 = nn.Linear(channels, channels, bias=False)
        self.f_phi = PointwiseMLP([channels, channels, channels], final_act=False)
        self.f_geo = FuseConv(channels)
        self.f_int = FuseConv(channels)
        self.last_weights = None

    def _attend(self, q, k, v):
        weights = (q @ k.transpose(-1, -2) / math.sqrt(self.d)).softmax(dim=-1)
        return weights, weights @ v

    def co_represent(self, F_p, T_o_bar):
        """F_p [C, N_p], T_o_bar [N_o, C] -> (F'_p [C, N_p], T'_o [C, N_o])."""
        _check(F_p, self.channels, "F_p")
        if T_o_bar.shape[-1] != self.channels:
            raise ShapeError(f"T_o_bar: expected [N_o, C={self.channels}], got {tuple(T_o_bar.shape)}")
        pts = F_p.transpose(-1, -2)  # [N_p, C]
        w_p, out_p = self._attend(self.w1(pts), self.w2(T_o_bar), self.w3(T_o_bar))
        w_o, out_o = self._attend(self.w4(T_o_bar), self.w5(pts), self.w6(pts))
        self.last_weights = (w_p, w_o)
        return out_p.transpose(-1, -2), out_o.transpose(-1, -2)

    def inject_geometry(self, F_p_prime, T_o_prime):
        """Add the shared FC refinement to both sides, pool knowledge, fuse: -> P_o [C, N_p]."""
        _check(F_p_prime, self.channels, "F'_p")
        _check(T_o_prime, self.channels, "T'_o")
        pts = F_p_prime + self.f_phi(F_p_prime)
        know = T_o_prime + self.f_phi(T_o_prime)
        return self.f_geo(pts, broadcast_mean(know, pts.shape[-1]))

    def fuse_intention(self, T_a_bar, F_i):
        """T_a_bar [N_a, C], F_i [C, N_i] -> F_ti [C, N_i]."""
        _check(F_i, self.channels, "F_i")
        if T_a_bar.shape[-1] != self.channels:
            raise ShapeError(f"T_a_bar: expected [N_a, C={self.channels}], got {tuple(T_a_bar.shape)}")
        gamma = broadcast_mean(T_a_bar.transpose(-1, -2), F_i.shape[-1])
        return self.f_int(gamma, F_i)


def co_represent(F_p, T_o_bar, module):
    return module.co_represent(F_p, T_o_bar)


def inject_geometry(F_p_prime, T_o_prime, module):
    return module.inject_geometry(F_p_prime, T_o_prime)


def fuse_intention(T_a_bar, F_i, module):
    return module.fuse_intention(T_a_bar, F_i)


def upsample_points(pyramid, P_o, fp):
    return fp(pyramid, P_o)
