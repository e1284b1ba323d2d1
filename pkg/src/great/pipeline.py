"""Reason, train, evaluate and infer.

Reasoning is its own phase: ``reason`` fills the transcript cache, and
``train``/``evaluate`` only read it. Training therefore never talks to a
model backend and is reproducible offline.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import NUM_POINTS
from .backbones import PointHierarchy
from .dataset import (
    PARTITION_NAMES,
    InteractionImage,
    evaluation_pairs,
    load_image,
    load_manifest,
    make_partition,
    normalize_points,
    parse_entry_id,
    partition_cells,
    sample_batch,
    write_point_annotation,
)
from .decoder import total_loss
from .errors import (
    BackendError,
    ConfigError,
    DivergenceError,
    FormatError,
    GreatError,
    ParseError,
    PreconditionError,
)
from .mhacot import PROMPT_TEMPLATES, parse_transcript, run_chain, run_chains
from .metrics import GT_THRESHOLD, IOU_THRESHOLDS, evaluate_all
from .mllm_client import BackendConfig, cache_get
from .model import GreatModel, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 65
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    dims: dict = field(default_factory=lambda: {"C": 512, "N_p": 64, "N_i": 49, "d": None})
    partition: str = "seen"
    held_out_objects: list = field(default_factory=list)
    held_out_affordances: list = field(default_factory=list)
    test_ratio: float = 0.2
    paths: dict = field(default_factory=lambda: {"manifest": "manifest.json", "cache_dir": "cache",
                                                 "checkpoint_dir": "checkpoints"})
    model: dict = field(default_factory=dict)  # extra ModelConfig fields (radii, nsample, ...)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    gt_threshold: float = GT_THRESHOLD
    iou_thresholds: list = field(default_factory=lambda: list(IOU_THRESHOLDS))
    prompts: list = field(default_factory=lambda: list(PROMPT_TEMPLATES))
    backend: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.partition not in PARTITION_NAMES:
            raise ConfigError(f"unknown partition {self.partition!r}")
        if len(self.prompts) != 4:
            raise ConfigError("prompts must list exactly 4 templates")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        paths = dict(cls().paths)
        paths.update(d.get("paths", {}))
        if base_dir is not None:
            paths = {k: str((Path(base_dir) / v).resolve()) for k, v in paths.items()}
        d["paths"] = paths
        if "dims" in d:
            dims = dict(cls().dims)
            dims.update(d["dims"])
            d["dims"] = dims
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self):
        return asdict(self)

    def model_config(self):
        return ModelConfig.from_dims(self.dims, **self.model)

    def backend_config(self):
        return BackendConfig.from_dict(self.backend) if self.backend else None


# -- knowledge ------------------------------------------------------------------------


def load_knowledge(image_ids, cache_dir):
    """Parse cached transcripts into knowledge records; fail listing every missing id."""
    records, missing = {}, []
    for image_id in sorted(set(image_ids)):
        t = cache_get(image_id, cache_dir)
        if t is None:
            missing.append(image_id)
            continue
        records[image_id] = parse_transcript(t)
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise PreconditionError(
            f"{len(missing)} image(s) have no cached transcript; run `great reason` first: {shown}", missing
        )
    return records


def reason(manifest, backend, cache_dir, templates=PROMPT_TEMPLATES):
    """Fill the transcript cache for every image of the manifest."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    images = [manifest.load_image(e.id) for e in manifest.images]
    results = run_chains(images, backend, cache_dir, templates)
    summary = {"total": len(images), "hit": 0, "miss": 0, "fail": 0, "failed": {}}
    for image_id in sorted(results):
        status, value = results[image_id]
        if status != "fail":
            try:
                parse_transcript(value)
            except ParseError as exc:
                status, value = "fail", exc
        summary[status] += 1
        if status == "fail":
            summary["failed"][image_id] = str(value)
    return summary


# -- batching ---------------------------------------------------------------------------


class HierarchyCache:
    """Per-instance point sampling structure; coordinates never change during training."""

    def __init__(self, encoder):
        self.encoder = encoder
        self._store = {}

    def get(self, instance_id, coords):
        h = self._store.get(instance_id)
        if h is None:
            h = self.encoder.hierarchy(torch.as_tensor(coords, dtype=torch.float32))
            self._store[instance_id] = h
        return h

    def batch(self, samples):
        return PointHierarchy.stack([self.get(s.points.id, s.points.coords) for s in samples])


def batch_tensors(samples):
    images = torch.from_numpy(np.stack([s.image.pixels for s in samples]).astype(np.float32))
    coords = torch.from_numpy(np.stack([s.points.coords for s in samples]).astype(np.float32))
    labels = torch.from_numpy(np.stack([s.label.heatmap for s in samples]).astype(np.float32))
    return images, coords, labels


def forward(sample, knowledge, model, hierarchy=None):
    """phi for one paired sample, shape [N]."""
    if knowledge.image_id != sample.image.id:
        raise ConfigError(f"knowledge for {knowledge.image_id!r} does not belong to image {sample.image.id!r}")
    images, coords, _ = batch_tensors([sample])
    return model(images, coords, [knowledge], hierarchy=hierarchy)[0]


# -- training -----------------------------------------------------------------------------


def _partition(config, manifest):
    return make_partition(
        manifest, config.partition, config.held_out_objects, config.held_out_affordances,
        seed=config.seed, test_ratio=config.test_ratio,
    )


def _side_images(partition, manifest, side):
    return [i for ims, _ in partition_cells(partition, manifest, side).values() for i in ims]


def train(config, progress=None):
    """Train on the configured partition. Returns (final checkpoint path, [per-epoch mean loss])."""
    manifest = load_manifest(config.paths["manifest"])
    partition = _partition(config, manifest)
    knowledge = load_knowledge(_side_images(partition, manifest, "train"), config.paths["cache_dir"])

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = GreatModel(config.model_config())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    hierarchies = HierarchyCache(model.point_encoder)

    n_train = sum(1 for e in partition.train if parse_entry_id(e)[0] == "pt")
    steps = max(1, math.ceil(n_train / config.batch_size))
    ckpt_dir = Path(config.paths["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    curve, last_good = [], None
    meta = {"train": config.to_dict()}

    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            samples = sample_batch(partition, manifest, config.batch_size, rng)
            images, coords, labels = batch_tensors(samples)
            phi = model(images, coords, [knowledge[s.image.id] for s in samples], hierarchy=hierarchies.batch(samples))
            loss = total_loss(phi, labels, config.focal_gamma, config.focal_alpha, config.dice_eps)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}", last_checkpoint=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        last_good = save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}", model, dict(meta, epoch=epoch, loss=curve[-1]))
        write_loss_curve(ckpt_dir / "loss_curve.csv", curve)
        log.info("epoch %d loss %.5f", epoch, curve[-1])
        if progress:
            progress(epoch, curve[-1])
    return last_good, curve


def write_loss_curve(path, curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(curve):
        w.writerow([i, repr(float(v))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- evaluation ------------------------------------------------------------------------------


def config_from_checkpoint(sidecar, overrides=None):
    d = dict(sidecar["meta"]["train"])
    d.update(overrides or {})
    return TrainConfig.from_dict(d)


@torch.no_grad()
def predict_pairs(model, manifest, pairs, knowledge, batch_size=16):
    hierarchies = HierarchyCache(model.point_encoder)
    preds, labels = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        samples = []
        for image_id, inst, aff in chunk:
            points, label = manifest.load_instance(inst, aff)
            samples.append(_Sample(points, label, manifest.load_image(image_id)))
        images, coords, lab = batch_tensors(samples)
        phi = model(images, coords, [knowledge[s.image.id] for s in samples], hierarchy=hierarchies.batch(samples))
        preds += list(phi.numpy().astype(np.float64))
        labels += list(lab.numpy().astype(np.float64))
    return preds, labels


@dataclass
class _Sample:
    points: object
    label: object
    image: object


def evaluate(checkpoint, partition=None, manifest_path=None, cache_dir=None):
    """Metric report for the test side of ``partition`` (default: the one trained on)."""
    model, sidecar = load_checkpoint(checkpoint)
    overrides = {}
    if partition is not None:
        overrides["partition"] = partition
    if manifest_path is not None or cache_dir is not None:
        paths = dict(sidecar["meta"]["train"]["paths"])
        if manifest_path is not None:
            paths["manifest"] = str(manifest_path)
        if cache_dir is not None:
            paths["cache_dir"] = str(cache_dir)
        overrides["paths"] = paths
    config = config_from_checkpoint(sidecar, overrides)
    manifest = load_manifest(config.paths["manifest"])
    part = _partition(config, manifest)
    pairs = evaluation_pairs(part, manifest, seed=config.seed)
    knowledge = load_knowledge([p[0] for p in pairs], config.paths["cache_dir"])
    preds, labels = predict_pairs(model, manifest, pairs, knowledge)
    report = evaluate_all(
        preds, labels, ids=[f"{i}|{inst}|{aff}" for i, inst, aff in pairs],
        gt_threshold=config.gt_threshold, iou_thresholds=config.iou_thresholds,
    )
    report["partition"] = config.partition
    return report


# -- inference ---------------------------------------------------------------------------------


def load_points_file(path):
    """Coordinates from a 3-column or 4-column text file."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(tok)}")
            try:
                rows.append([float(t) for t in tok[:3]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric token") from exc
    if len(rows) != NUM_POINTS:
        raise FormatError(f"{path}: expected {NUM_POINTS} points, got {len(rows)}")
    return np.asarray(rows)


def infer(checkpoint, image_path, points_path, object_category, out_path, cache_dir=None,
          backend=None, render_path=None):
    """Predict phi for one image/point-cloud pair and write ``x y z phi`` rows."""
    model, sidecar = load_checkpoint(checkpoint)
    config = config_from_checkpoint(sidecar)
    cache_dir = cache_dir or config.paths["cache_dir"]
    image = InteractionImage(Path(image_path).stem, object_category, "unknown",
                             load_image(image_path, model.config.image_size))
    transcript = cache_get(image.id, cache_dir)
    if transcript is None:
        if backend is None:
            raise PreconditionError(
                f"no cached reasoning for image {image.id!r} and no backend configured; "
                "run `great reason` or pass --backend", [image.id],
            )
        transcript = run_chain(image, backend, cache_dir, config.prompts)
    record = parse_transcript(transcript)
    raw = load_points_file(points_path)
    coords = normalize_points(raw)
    with torch.no_grad():
        phi = model(
            torch.from_numpy(image.pixels).unsqueeze(0),
            torch.from_numpy(coords.astype(np.float32)).unsqueeze(0),
            [record],
        )[0].numpy().astype(np.float64)
    write_point_annotation(out_path, raw, phi)
    if render_path is not None:
        render_heatmap(raw, phi).save(render_path)
    return phi


def render_heatmap(coords, values, side=448):
    """Orthographic front view; deeper red means higher affordance probability."""
    pts = np.asarray(coords, dtype=np.float64)
    pts = pts - pts.mean(0)
    scale = 0.42 * side / max(np.abs(pts[:, [0, 2]]).max(), 1e-9)
    img = Image.new("RGB", (side, side), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    order = np.argsort(-pts[:, 1])  # far points first
    for i in order:
        v = float(np.clip(values[i], 0.0, 1.0))
        u, w = side / 2 + scale * pts[i, 0], side / 2 - scale * pts[i, 2]
        colour = (int(200 + 55 * v), int(200 * (1 - v)), int(200 * (1 - v)))
        draw.ellipse([u - 2, w - 2, u + 2, w + 2], fill=colour)
    return img
