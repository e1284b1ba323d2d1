"""Knowledge embeddings and their mutual integration.

The geometry text becomes a token matrix, the three interaction texts become
three pooled rows. A shared cross-attention layer lets each side read the
other, and a shared self-attention layer then adds context within each side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError

MAX_OBJECT_TOKENS = 64


@dataclass
class KnowledgeEmbeddings:
    T_o: torch.Tensor  # [N_o, C]
    T_a: torch.Tensor  # [N_a, C]
    T_o_bar: torch.Tensor
    T_a_bar: torch.Tensor


class Attention(nn.Module):
    """Single-head scaled dot-product attention with a residual connection.

    ``forward(x, y)`` queries from ``x`` [..., Nq, C] and reads keys/values from
    ``y`` [..., Nk, C]; returns ``x + W_out(softmax(q k^T / sqrt(C)) v)``.
    """

    def __init__(self, channels):
        super().__init__()
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.out = nn.Linear(channels, channels, bias=False)
        self.channels = channels
        self.last_weights = None

    def forward(self, x, y):
        if x.shape[-1] != self.channels or y.shape[-1] != self.channels:
            raise ShapeError(f"attention expects C={self.channels}, got {x.shape[-1]} and {y.shape[-1]}")
        scores = self.q(x) @ self.k(y).transpose(-1, -2) / math.sqrt(self.channels)
        weights = scores.softmax(dim=-1)
        self.last_weights = weights
        return x + self.out(weights @ self.v(y))


class KnowledgeIntegrator(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.cross = Attention(channels)  # f_m
        self.self_attn = Attention(channels)  # f_delta

    def forward(self, T_o, T_a):
        if T_o.shape[-1] != T_a.shape[-1]:
            raise ShapeError(f"channel mismatch: T_o has {T_o.shape[-1]}, T_a has {T_a.shape[-1]}")
        o = self.cross(T_o, T_a)
        a = self.cross(T_a, T_o)
        o = self.self_attn(o, o)
        a = self.self_attn(a, a)
        return o, a


def encode_knowledge(record, text_encoder, max_tokens=MAX_OBJECT_TOKENS):
    """(T_o [N_o, C], T_a [3, C]) for one knowledge record."""
    T_o = text_encoder(record.object_text, max_tokens).tokens
    T_a = torch.stack([text_encoder(t).pooled for t in record.affordance_texts])
    return T_o, T_a


def integrate_knowledge(T_o, T_a, integrator):
    return integrator(T_o, T_a)
