"""The full grounding network and its checkpoint format."""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbones import FeaturePropagation, HashedTextEncoder, ImageEncoder, PointEncoder
from .cmafm import CrossModalFusion
from .decoder import AffordanceDecoder
from .errors import ConfigError, GreatError, StageError, ValidationError
from .knowledge import MAX_OBJECT_TOKENS, KnowledgeIntegrator, encode_knowledge

CHECKPOINT_FORMAT = "great-checkpoint/1"


@dataclass
class ModelConfig:
    channels: int = 512
    d: int | None = None
    grid: int = 7
    npoints: tuple = (512, 128, 64)
    radii: tuple = (0.2, 0.4, 0.8)
    nsample: int = 32
    text_buckets: int = 4096
    text_layers: int = 2
    max_object_tokens: int = MAX_OBJECT_TOKENS
    image_size: int = 224
    point_norm: bool = False
    head_bias_init: float = 0.0

    def __post_init__(self):
        self.npoints = tuple(self.npoints)
        self.radii = tuple(self.radii)
        if self.channels < 1 or self.grid < 1:
            raise ConfigError("channels and grid must be positive")
        if self.d is not None and self.d <= 0:
            raise ConfigError("projection dimension d must be positive")

    @classmethod
    def from_dims(cls, dims, **extra):
        """Build from the ``{C, N_p, N_i, d}`` block of a training config."""
        kw = dict(extra)
        if "C" in dims:
            kw["channels"] = int(dims["C"])
        if dims.get("d") is not None:
            kw["d"] = int(dims["d"])
        if "N_i" in dims:
            g = math.isqrt(int(dims["N_i"]))
            if g * g != int(dims["N_i"]):
                raise ConfigError("N_i must be a square number (flattened H1 x W1 grid)")
            kw["grid"] = g
        if "N_p" in dims:
            npts = list(kw.get("npoints", cls.npoints))
            npts[-1] = int(dims["N_p"])
            kw["npoints"] = tuple(npts)
        return cls(**kw)

    def to_dict(self):
        d = asdict(self)
        d["npoints"] = list(self.npoints)
        d["radii"] = list(self.radii)
        return d


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (GreatError, ValueError, RuntimeError, IndexError) as exc:
        raise StageError(name, exc) from exc


class GreatModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        C = cfg.channels
        self.image_encoder = ImageEncoder(C, cfg.grid)
        self.point_encoder = PointEncoder(C, cfg.npoints, cfg.radii, cfg.nsample, cfg.point_norm)
        self.fp = FeaturePropagation(self.point_encoder.level_channels, C, norm=cfg.point_norm)
        self.text_encoder = HashedTextEncoder(C, cfg.text_buckets, cfg.text_layers)
        self.integrator = KnowledgeIntegrator(C)
        self.fusion = CrossModalFusion(C, cfg.d)
        self.decoder = AffordanceDecoder(C)
        nn.init.constant_(self.decoder.head.bias, cfg.head_bias_init)

    def forward(self, images, coords, records, hierarchy=None, intermediates=None):
        """images [B, 3, H, W], coords [B, N, 3], one knowledge record per sample -> phi [B, N].

        Pass a dict as ``intermediates`` to collect every stage output.
        """
        if images.dim() == 3:
            images, coords = images.unsqueeze(0), coords.unsqueeze(0)
        if len(records) != images.shape[0] or coords.shape[0] != images.shape[0]:
            raise ValidationError("images, coords and knowledge records must have the same batch size")
        keep = intermediates if intermediates is not None else {}
        with stage("image_encode"):
            F_i = self.image_encoder(images)
        with stage("point_encode"):
            pyramid = self.point_encoder(coords, hierarchy)
        F_p = pyramid.features
        keep.update(F_i=F_i, F_p=F_p, pyramid=pyramid)

        P_o, F_ti = [], []
        for b, record in enumerate(records):
            with stage("encode_knowledge"):
                T_o, T_a = encode_knowledge(record, self.text_encoder, self.config.max_object_tokens)
            with stage("integrate_knowledge"):
                T_o_bar, T_a_bar = self.integrator(T_o, T_a)
            with stage("co_represent"):
                F_p_prime, T_o_prime = self.fusion.co_represent(F_p[b], T_o_bar)
            with stage("inject_geometry"):
                P_o.append(self.fusion.inject_geometry(F_p_prime, T_o_prime))
            with stage("fuse_intention"):
                F_ti.append(self.fusion.fuse_intention(T_a_bar, F_i[b]))
            if b == 0:
                keep.update(T_o=T_o, T_a=T_a, T_o_bar=T_o_bar, T_a_bar=T_a_bar,
                            F_p_prime=F_p_prime, T_o_prime=T_o_prime)
        P_o, F_ti = torch.stack(P_o), torch.stack(F_ti)
        with stage("upsample_points"):
            F_tp = self.fp(pyramid, P_o)
        with stage("decode"):
            phi = self.decoder(F_ti, F_tp)
        keep.update(P_o=P_o, F_ti=F_ti, F_tp=F_tp, phi=phi)
        return phi


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model, meta=None):
    """Write ``<path>.npz`` (named parameter arrays) and ``<path>.json`` (format tag, dims, meta)."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = {"format": CHECKPOINT_FORMAT, "model": model.config.to_dict(), "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    """Return (model in eval mode, sidecar dict)."""
    path = Path(path).with_suffix(".npz")
    side_path = path.with_suffix(".json")
    if not path.is_file() or not side_path.is_file():
        raise ValidationError(f"checkpoint not found: {path} (+ .json sidecar)")
    sidecar = json.loads(side_path.read_text(encoding="utf-8"))
    if sidecar.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{side_path}: unsupported checkpoint format {sidecar.get('format')!r}")
    model = GreatModel(ModelConfig(**sidecar["model"]))
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    model.load_state_dict(state)
    model.eval()
    return model, sidecar
