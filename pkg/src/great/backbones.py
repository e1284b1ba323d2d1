"""Trainable encoders: image feature grid, point feature pyramid, token embeddings.

Defaults are small so the full pipeline trains on a CPU. Heavier pretrained
networks can replace any of them as long as they honour the same shapes.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EncodingError, ShapeError

FP_EPS = 1e-8


def _groups(ch, max_groups=8):
    return math.gcd(ch, max_groups)


# -- image --------------------------------------------------------------------------


class ImageEncoder(nn.Module):
    """Five stride-2 conv stages (stride 32 total), then pooled onto a fixed grid.

    Output is ``[B, C, grid*grid]``, the flattened spatial map.
    """

    def __init__(self, channels=512, grid=7):
        super().__init__()
        c = channels
        widths = [max(8, c // 8), max(8, c // 4), max(8, c // 2), c, c]
        layers, cin = [], 3
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.GroupNorm(_groups(w), w), nn.ReLU(inplace=True)]
            cin = w
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.channels = c
        self.grid = grid

    def forward(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"image batch must be [B, 3, H, W], got {tuple(images.shape)}")
        feats = self.pool(self.stages(images))
        return feats.flatten(2)


# -- points -------------------------------------------------------------------------


def square_distance(src, dst):
    """Pairwise squared distances, [B, N, 3] x [B, M, 3] -> [B, N, M]."""
    return (src.unsqueeze(2) - dst.unsqueeze(1)).pow(2).sum(-1)


def index_points(points, idx):
    """Gather rows: points [B, N, C], idx [B, ...] -> [B, ..., C]."""
    B = points.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(points, 1, flat.unsqueeze(-1).expand(-1, -1, points.shape[-1]))
    return out.reshape(*idx.shape, points.shape[-1])


def farthest_point_sample(xyz, npoint):
    """Farthest point sampling starting from the point nearest the centroid.

    xyz: [B, N, 3]. Returns indices [B, npoint].
    """
    B, N, _ = xyz.shape
    if npoint > N:
        raise ShapeError(f"cannot sample {npoint} of {N} points")
    centroid = xyz.mean(dim=1, keepdim=True)
    farthest = ((xyz - centroid) ** 2).sum(-1).argmin(dim=1)
    idx = torch.zeros(B, npoint, dtype=torch.long, device=xyz.device)
    dist = torch.full((B, N), float("inf"), dtype=xyz.dtype, device=xyz.device)
    batch = torch.arange(B, device=xyz.device)
    for i in range(npoint):
        idx[:, i] = farthest
        d = ((xyz - xyz[batch, farthest].unsqueeze(1)) ** 2).sum(-1)
        dist = torch.minimum(dist, d)
        farthest = dist.argmax(dim=1)
    return idx


def ball_group(xyz, centres, radius, nsample):
    """Neighbour indices for each centre, nearest first, limited to ``radius``.

    Slots beyond the points found inside the ball repeat the nearest one,
    which is the centre itself when centres are drawn from ``xyz``.
    """
    sq = square_distance(centres, xyz)
    k = min(nsample, xyz.shape[1])
    d, idx = sq.topk(k, dim=-1, largest=False, sorted=True)
    outside = d > radius ** 2
    return torch.where(outside, idx[..., :1].expand_as(idx), idx)


def three_nn_weights(query, ref, k=3, eps=FP_EPS):
    """Inverse-distance weights of the ``k`` nearest ``ref`` points for each query point.

    Distances are floored at ``eps``. Returns (idx [B, Nq, k], weights [B, Nq, k]).
    """
    sq = square_distance(query, ref)
    k = min(k, ref.shape[1])
    d2, idx = sq.topk(k, dim=-1, largest=False, sorted=True)
    inv = 1.0 / torch.clamp(d2.clamp_min(0).sqrt(), min=eps)
    return idx, inv / inv.sum(-1, keepdim=True)


def interpolate(feats, idx, weights):
    """feats [B, C, M] at reference points -> [B, C, Nq] using idx/weights from three_nn_weights."""
    gathered = index_points(feats.transpose(1, 2), idx)  # [B, Nq, k, C]
    return (gathered * weights.unsqueeze(-1)).sum(2).transpose(1, 2)


@dataclass
class PointHierarchy:
    """Sampling structure of one cloud batch. Depends on coordinates only."""

    coords: list  # level coords [B, n_l, 3], level 0 = input
    groups: list  # neighbour indices per SA level [B, n_l, K] into previous level
    interp: list  # (idx, weights) per FP step, coarse level l+1 -> fine level l

    def to(self, dtype):
        return PointHierarchy(
            [c.to(dtype) for c in self.coords],
            self.groups,
            [(i, w.to(dtype)) for i, w in self.interp],
        )

    def select(self, rows):
        return PointHierarchy(
            [c[rows] for c in self.coords],
            [g[rows] for g in self.groups],
            [(i[rows], w[rows]) for i, w in self.interp],
        )

    @staticmethod
    def stack(parts):
        return PointHierarchy(
            [torch.cat(c) for c in zip(*(p.coords for p in parts))],
            [torch.cat(g) for g in zip(*(p.groups for p in parts))],
            [(torch.cat([i for i, _ in s]), torch.cat([w for _, w in s])) for s in zip(*(p.interp for p in parts))],
        )


@dataclass
class PointFeaturePyramid:
    features: torch.Tensor  # deepest level [B, C, N_p]
    levels: list  # (coords [B, n_l, 3], features [B, c_l, n_l]) per level, input level first
    hierarchy: PointHierarchy


def build_hierarchy(xyz, npoints=(512, 128, 64), radii=(0.2, 0.4, 0.8), nsample=32, k=3):
    if xyz.dim() == 2:
        xyz = xyz.unsqueeze(0)
    if xyz.dim() != 3 or xyz.shape[-1] != 3:
        raise ShapeError(f"coords must be [B, N, 3], got {tuple(xyz.shape)}")
    spread = (xyz - xyz.mean(1, keepdim=True)).pow(2).sum(-1).amax(1)
    if bool((spread <= 0).any()):
        raise EncodingError("degenerate point cloud: all points identical")
    if list(npoints) != sorted(npoints, reverse=True) or npoints[0] >= xyz.shape[1]:
        raise ShapeError(f"level sizes {tuple(npoints)} must strictly decrease below {xyz.shape[1]}")
    with torch.no_grad():
        coords, groups = [xyz], []
        for n, r in zip(npoints, radii):
            prev = coords[-1]
            centres = index_points(prev, farthest_point_sample(prev, n))
            groups.append(ball_group(prev, centres, r, nsample))
            coords.append(centres)
        interp = [three_nn_weights(coords[l], coords[l + 1], k) for l in range(len(npoints))]
    return PointHierarchy(coords, groups, interp)


class PointwiseMLP(nn.Module):
    """Shared per-point layers over the channel axis; input [..., C_in, N]."""

    def __init__(self, widths, final_act=True, norm=False):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(a, b))
            if final_act or i < len(widths) - 2:
                if norm:
                    layers.append(nn.LayerNorm(b))
                layers.append(nn.ReLU(inplace=False))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.transpose(-1, -2)).transpose(-1, -2)


class SetAbstraction(nn.Module):
    def __init__(self, in_ch, widths, norm=False):
        super().__init__()
        self.mlp = PointwiseMLP([in_ch + 3] + list(widths), norm=norm)
        self.out_ch = widths[-1]

    def forward(self, prev_xyz, prev_feats, centres, group_idx):
        grouped_xyz = index_points(prev_xyz, group_idx) - centres.unsqueeze(2)  # [B, S, K, 3]
        grouped = index_points(prev_feats.transpose(1, 2), group_idx)  # [B, S, K, c]
        x = torch.cat([grouped_xyz, grouped], dim=-1)
        x = self.mlp.net(x)  # per neighbour
        return x.amax(dim=2).transpose(1, 2)  # [B, c_out, S]


def _sa_widths(c, levels):
    base = [(c // 4, c // 4, c // 2), (c // 2, c // 2, c), (c, c, c)]
    while len(base) < levels:
        base.append((c, c, c))
    return [tuple(max(4, w) for w in ws) for ws in base[:levels]]


class PointEncoder(nn.Module):
    """Set-abstraction hierarchy (sample, group, shared MLP, max-pool) per level."""

    def __init__(self, channels=512, npoints=(512, 128, 64), radii=(0.2, 0.4, 0.8), nsample=32, norm=False):
        super().__init__()
        if len(npoints) != len(radii):
            raise ShapeError("npoints and radii must have equal length")
        self.npoints, self.radii, self.nsample = tuple(npoints), tuple(radii), nsample
        self.sa = nn.ModuleList()
        cin = 3
        for widths in _sa_widths(channels, len(npoints)):
            self.sa.append(SetAbstraction(cin, widths, norm))
            cin = widths[-1]
        if cin != channels:
            raise ShapeError("deepest set-abstraction width must equal C")
        self.level_channels = [3] + [m.out_ch for m in self.sa]

    def hierarchy(self, xyz):
        return build_hierarchy(xyz, self.npoints, self.radii, self.nsample)

    def forward(self, xyz, hierarchy=None):
        if xyz.dim() == 2:
            xyz = xyz.unsqueeze(0)
        h = hierarchy if hierarchy is not None else self.hierarchy(xyz)
        h = h.to(xyz.dtype)
        feats = xyz.transpose(1, 2)
        levels = [(h.coords[0], feats)]
        for l, sa in enumerate(self.sa):
            feats = sa(h.coords[l], feats, h.coords[l + 1], h.groups[l])
            levels.append((h.coords[l + 1], feats))
        return PointFeaturePyramid(feats, levels, h)


class FeaturePropagation(nn.Module):
    """Upsample deepest features back to the input points, level by level.

    Each step interpolates from the coarser level with k=3 inverse-distance
    weights, concatenates the finer level's skip features and applies a
    shared per-point MLP.
    """

    def __init__(self, level_channels, channels, use_skip=True, norm=False):
        super().__init__()
        self.use_skip = use_skip
        self.mlps = nn.ModuleList()
        for skip_ch in reversed(level_channels[:-1]):
            cin = channels + (skip_ch if use_skip else 0)
            self.mlps.append(PointwiseMLP([cin, channels, channels], norm=norm))

    def forward(self, pyramid, deep_features):
        levels = pyramid.levels
        interp = pyramid.hierarchy.to(deep_features.dtype).interp
        if deep_features.shape[-1] != levels[-1][0].shape[1]:
            raise ShapeError(
                f"deep features have {deep_features.shape[-1]} points, deepest level has {levels[-1][0].shape[1]}"
            )
        x = deep_features
        for step, l in enumerate(range(len(levels) - 2, -1, -1)):
            idx, w = interp[l]
            x = interpolate(x, idx, w)
            if self.use_skip:
                x = torch.cat([x, levels[l][1]], dim=1)
            x = self.mlps[step](x)
        return x


# -- text ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text):
    return _TOKEN.findall(text.lower())


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # [L, C]
    pooled: torch.Tensor  # [C]


def _sinusoid(length, dim, dtype):
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class HashedTextEncoder(nn.Module):
    """Hashed-token embedding table followed by a small self-attention stack."""

    def __init__(self, channels=512, buckets=4096, layers=2):
        super().__init__()
        self.buckets = buckets
        self.embed = nn.Embedding(buckets, channels)
        nn.init.normal_(self.embed.weight, std=0.5)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(channels, 1, dim_feedforward=2 * channels, dropout=0.0, batch_first=True)
            for _ in range(layers)
        )
        self.channels = channels

    def token_ids(self, text, max_tokens=None):
        toks = tokenize(text)
        if not toks:
            raise ValueError("text must contain at least one token")
        if max_tokens is not None:
            toks = toks[:max_tokens]
        return torch.tensor([zlib.crc32(t.encode("utf-8")) % self.buckets for t in toks], dtype=torch.long)

    def forward(self, text, max_tokens=None):
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text must be a nonempty string")
        ids = self.token_ids(text, max_tokens)
        w = self.embed.weight
        x = (self.embed(ids) + _sinusoid(len(ids), self.channels, w.dtype)).unsqueeze(0)
        for layer in self.layers:
            x = layer(x)
        tokens = x.squeeze(0)
        return TextEmbedding(tokens, tokens.mean(0))


class FrozenTextEncoder(nn.Module):
    """Adapter for a frozen external encoder returning [L, D] arrays per text.

    Only the D -> C projection trains.
    """

    def __init__(self, embed_fn, in_dim, channels=512):
        super().__init__()
        self.embed_fn = embed_fn
        self.proj = nn.Linear(in_dim, channels)
        self.channels = channels

    def forward(self, text, max_tokens=None):
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text must be a nonempty string")
        with torch.no_grad():
            raw = torch.as_tensor(self.embed_fn(text), dtype=self.proj.weight.dtype)
        if max_tokens is not None:
            raw = raw[:max_tokens]
        tokens = self.proj(raw)
        return TextEmbedding(tokens, tokens.mean(0))


def image_encode(image, encoder):
    return encoder(image)


def point_encode(coords, encoder, hierarchy=None):
    return encoder(coords, hierarchy)


def fp_upsample(pyramid, deep_features, fp):
    return fp(pyramid, deep_features)


def text_encode(text, encoder, max_tokens=None):
    return encoder(text, max_tokens)
