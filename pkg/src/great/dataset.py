"""PIAD-style data: manifest loading, annotation files, partitions and paired sampling.

Point clouds and images are not paired one-to-one. A training sample couples an
interaction image with any point instance of the same object category that carries
an annotation for the image's affordance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import NUM_POINTS
from .errors import (
    ConfigError,
    FormatError,
    ParseError,
    RangeError,
    SamplingError,
    ValidationError,
)

log = logging.getLogger(__name__)

PARTITION_NAMES = ("seen", "unseen_object", "unseen_affordance")
IMAGE_SIZE = 224
MIN_IMAGE_SIDE = 32


@dataclass
class PointCloudInstance:
    id: str
    object_category: str
    coords: np.ndarray  # [N, 3]

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.ndim != 2 or c.shape[1] != 3:
            raise FormatError(f"{self.id}: coords must be [N, 3], got {c.shape}")
        if c.shape[0] != NUM_POINTS:
            raise FormatError(f"{self.id}: expected {NUM_POINTS} points, got {c.shape[0]}")
        if not np.all(np.isfinite(c)):
            raise RangeError(f"{self.id}: non-finite coordinates")
        if np.all(c == c[0]):
            raise ValidationError(f"{self.id}: degenerate cloud, all points identical")


@dataclass
class AffordanceAnnotation:
    instance_id: str
    affordance_category: str
    heatmap: np.ndarray  # [N]

    def __post_init__(self):
        h = np.asarray(self.heatmap)
        if h.shape != (NUM_POINTS,):
            raise FormatError(f"{self.instance_id}: heatmap must be [{NUM_POINTS}], got {h.shape}")
        if not np.all(np.isfinite(h)) or h.min() < 0.0 or h.max() > 1.0:
            raise RangeError(f"{self.instance_id}: heatmap values must lie in [0, 1]")


@dataclass
class InteractionImage:
    id: str
    object_category: str
    affordance_category: str
    pixels: np.ndarray  # [3, H, W] in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[0] != 3:
            raise FormatError(f"{self.id}: image must be [3, H, W], got {p.shape}")
        if min(p.shape[1:]) < MIN_IMAGE_SIDE:
            raise FormatError(f"{self.id}: image sides must be >= {MIN_IMAGE_SIDE}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise RangeError(f"{self.id}: pixel values must lie in [0, 1]")


@dataclass
class PairedSample:
    points: PointCloudInstance
    label: AffordanceAnnotation
    image: InteractionImage


@dataclass(frozen=True)
class PointEntry:
    file: Path
    object: str
    labels: dict  # affordance -> Path

    @property
    def id(self):
        return self.file.stem


@dataclass(frozen=True)
class ImageEntry:
    file: Path
    object: str
    affordance: str

    @property
    def id(self):
        return self.file.stem


@dataclass
class Manifest:
    objects: list
    affordances: list
    points: list
    images: list
    root: Path = Path(".")
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def point_entry(self, instance_id):
        return self._index()["points"][instance_id]

    def image_entry(self, image_id):
        return self._index()["images"][image_id]

    def cells(self):
        """(object, affordance) pairs that have both images and annotations."""
        return sorted({(e.object, e.affordance) for e in self.images})

    def _index(self):
        idx = self._cache.get("index")
        if idx is None:
            idx = {
                "points": {e.id: e for e in self.points},
                "images": {e.id: e for e in self.images},
            }
            self._cache["index"] = idx
        return idx

    def load_instance(self, instance_id, affordance, normalize=True):
        """Load one (points, label) pair, cached per file."""
        entry = self.point_entry(instance_id)
        key = ("pt", instance_id, affordance, normalize)
        hit = self._cache.get(key)
        if hit is None:
            coords, heat = load_point_annotation(entry.labels[affordance])
            if normalize:
                coords = normalize_points(coords)
            hit = (
                PointCloudInstance(instance_id, entry.object, coords),
                AffordanceAnnotation(instance_id, affordance, heat),
            )
            self._cache[key] = hit
        return hit

    def load_image(self, image_id, size=IMAGE_SIZE):
        key = ("img", image_id, size)
        hit = self._cache.get(key)
        if hit is None:
            e = self.image_entry(image_id)
            hit = InteractionImage(image_id, e.object, e.affordance, load_image(e.file, size))
            self._cache[key] = hit
        return hit


@dataclass
class PartitionSpec:
    name: str
    train: list
    test: list
    held_out_objects: frozenset = frozenset()
    held_out_affordances: frozenset = frozenset()


# -- files ------------------------------------------------------------------


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            line=exc.lineno,
        ) from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    for key in ("objects", "affordances", "points", "images"):
        if not isinstance(doc.get(key), list):
            raise ValidationError(f"{path}: key {key!r} missing or not an array")

    root = path.parent
    objects = [str(o) for o in doc["objects"]]
    affordances = [str(a) for a in doc["affordances"]]
    obj_set, aff_set = set(objects), set(affordances)

    points = []
    for i, raw in enumerate(doc["points"]):
        where = f"points[{i}]"
        if not isinstance(raw, dict) or not {"file", "object", "labels"} <= raw.keys():
            raise ValidationError(f"{where}: needs keys 'file', 'object', 'labels'")
        if raw["object"] not in obj_set:
            raise ValidationError(f"{where}: unknown object category {raw['object']!r}")
        labels = {}
        for aff, rel in dict(raw["labels"]).items():
            if aff not in aff_set:
                raise ValidationError(f"{where}: unknown affordance category {aff!r}")
            labels[aff] = _existing(root, rel, where)
        points.append(PointEntry(_existing(root, raw["file"], where), raw["object"], labels))

    images = []
    for i, raw in enumerate(doc["images"]):
        where = f"images[{i}]"
        if not isinstance(raw, dict) or not {"file", "object", "affordance"} <= raw.keys():
            raise ValidationError(f"{where}: needs keys 'file', 'object', 'affordance'")
        if raw["object"] not in obj_set:
            raise ValidationError(f"{where}: unknown object category {raw['object']!r}")
        if raw["affordance"] not in aff_set:
            raise ValidationError(f"{where}: unknown affordance category {raw['affordance']!r}")
        images.append(ImageEntry(_existing(root, raw["file"], where), raw["object"], raw["affordance"]))

    _check_unique([e.id for e in points], "point instance")
    _check_unique([e.id for e in images], "image")

    annotated = {(e.object, a) for e in points for a in e.labels}
    pictured = {(e.object, e.affordance) for e in images}
    for obj, aff in sorted(annotated ^ pictured):
        side = "annotations but no images" if (obj, aff) in annotated else "images but no annotations"
        raise ValidationError(f"cell ({obj}, {aff}) has {side}")

    return Manifest(objects, affordances, points, images, root)


def _existing(root, rel, where):
    p = root / rel
    if not p.is_file():
        raise ValidationError(f"{where}: referenced file does not exist: {p}")
    return p


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise ValidationError(f"duplicate {what} id {i!r}")
        seen.add(i)


def load_point_annotation(path):
    """Read a 2048x4 ``x y z h`` text file into (coords [N,3], heatmap [N])."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})", line=lineno) from exc
    if len(rows) != NUM_POINTS:
        raise FormatError(f"{path}: expected {NUM_POINTS} rows, got {len(rows)}")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise RangeError(f"{path}: non-finite values")
    heat = arr[:, 3]
    if heat.min() < 0.0 or heat.max() > 1.0:
        bad = int(np.flatnonzero((heat < 0.0) | (heat > 1.0))[0]) + 1
        raise RangeError(f"{path}: heatmap value outside [0, 1] at row {bad}")
    return arr[:, :3].copy(), heat.copy()


def write_point_annotation(path, coords, heatmap):
    coords = np.asarray(coords, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    table = np.concatenate([coords, heatmap[:, None]], axis=1).tolist()
    # repr gives the shortest string that parses back to the same double
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(map(repr, row)) + "\n" for row in table)


def normalize_points(coords):
    """Center to zero mean and scale to unit max radius."""
    c = np.asarray(coords, dtype=np.float64)
    c = c - c.mean(axis=0)
    radius = np.sqrt((c ** 2).sum(axis=1)).max()
    if radius <= 0.0:
        raise ValidationError("cannot normalize a cloud whose points are all identical")
    return c / radius


def load_image(path, size=IMAGE_SIZE):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# -- partitions ---------------------------------------------------------------


def point_entry_id(instance_id, affordance):
    return f"pt:{instance_id}:{affordance}"


def image_entry_id(image_id):
    return f"img:{image_id}"


def parse_entry_id(entry_id):
    kind, _, rest = entry_id.partition(":")
    if kind == "pt":
        inst, _, aff = rest.rpartition(":")
        return kind, inst, aff
    return kind, rest, None


def _annotation_rows(manifest):
    """(entry id, object, affordance) for every annotation and every image."""
    rows = [
        (point_entry_id(e.id, a), e.object, a)
        for e in manifest.points
        for a in sorted(e.labels)
    ]
    rows += [(image_entry_id(e.id), e.object, e.affordance) for e in manifest.images]
    return rows


def make_partition(manifest, name, held_out_objects=(), held_out_affordances=(), seed=0, test_ratio=0.2):
    if name not in PARTITION_NAMES:
        raise ConfigError(f"unknown partition {name!r}; expected one of {PARTITION_NAMES}")
    held_obj = frozenset(held_out_objects)
    held_aff = frozenset(held_out_affordances)
    unknown = (held_obj - set(manifest.objects)) | (held_aff - set(manifest.affordances))
    if unknown:
        raise ConfigError(f"held-out categories not in manifest: {sorted(unknown)}")
    rows = _annotation_rows(manifest)

    if name == "seen":
        rng = np.random.default_rng(seed)
        test = set()
        # instances split per object category, images per (object, affordance) cell
        for obj in sorted(manifest.objects):
            inst = sorted(e.id for e in manifest.points if e.object == obj)
            for i in _split_test(inst, rng, test_ratio):
                e = manifest.point_entry(i)
                test.update(point_entry_id(i, a) for a in e.labels)
        for obj, aff in manifest.cells():
            ims = sorted(e.id for e in manifest.images if e.object == obj and e.affordance == aff)
            test.update(image_entry_id(i) for i in _split_test(ims, rng, test_ratio))
        train = [r[0] for r in rows if r[0] not in test]
        spec = PartitionSpec(name, sorted(train), sorted(test))
    elif name == "unseen_object":
        if not held_obj:
            raise ConfigError("unseen_object partition needs at least one held-out object")
        train = [r for r in rows if r[1] not in held_obj]
        train_affs = {r[2] for r in train}
        test = [r for r in rows if r[1] in held_obj and r[2] in train_affs]
        spec = PartitionSpec(name, sorted(r[0] for r in train), sorted(r[0] for r in test), held_obj, frozenset())
    else:
        if not held_aff:
            raise ConfigError("unseen_affordance partition needs at least one held-out affordance")
        train = [r for r in rows if r[2] not in held_aff]
        test = [r for r in rows if r[2] in held_aff]
        spec = PartitionSpec(name, sorted(r[0] for r in train), sorted(r[0] for r in test), frozenset(), held_aff)

    if not any(t.startswith("pt:") for t in spec.train) or not any(t.startswith("img:") for t in spec.train):
        raise ConfigError(f"{name}: held-out categories leave the training side empty")
    return spec


def make_partitions(manifest, held_out_objects, held_out_affordances, seed=0, test_ratio=0.2):
    return tuple(
        make_partition(manifest, n, held_out_objects, held_out_affordances, seed, test_ratio)
        for n in PARTITION_NAMES
    )


def _split_test(ids, rng, ratio):
    if len(ids) < 2:
        return []
    n_test = min(len(ids) - 1, max(1, int(round(ratio * len(ids)))))
    order = rng.permutation(len(ids))
    return [ids[k] for k in order[:n_test]]


def partition_cells(partition, manifest, side="train"):
    """Group one side of a partition into {(object, affordance): (image ids, instance ids)}."""
    cells = {}
    for eid in getattr(partition, side):
        kind, key, aff = parse_entry_id(eid)
        if kind == "img":
            e = manifest.image_entry(key)
            cells.setdefault((e.object, e.affordance), ([], []))[0].append(key)
        else:
            e = manifest.point_entry(key)
            cells.setdefault((e.object, aff), ([], []))[1].append(key)
    return cells


def draw_pairs(partition, manifest, n, rng, side="train"):
    """Draw ``n`` (image id, instance id, affordance) triples.

    The image is uniform over the side's images; the instance is drawn
    independently among instances annotated for that image's cell.
    """
    cells = partition_cells(partition, manifest, side)
    images = sorted(i for ims, _ in cells.values() for i in ims)
    if not images:
        raise SamplingError(f"partition {partition.name!r} has no {side} images")
    out = []
    for k in rng.integers(0, len(images), size=n):
        img = manifest.image_entry(images[k])
        cell = (img.object, img.affordance)
        instances = sorted(cells[cell][1])
        if not instances:
            raise SamplingError(f"no point instance annotated for cell {cell}")
        inst = instances[rng.integers(0, len(instances))]
        out.append((img.id, inst, img.affordance))
    return out


def sample_batch(partition, manifest, batch_size, rng, side="train"):
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    samples = []
    for image_id, inst, aff in draw_pairs(partition, manifest, batch_size, rng, side):
        points, label = manifest.load_instance(inst, aff)
        samples.append(PairedSample(points, label, manifest.load_image(image_id)))
    return samples


def evaluation_pairs(partition, manifest, seed=0):
    """Deterministic evaluation pairs: every test annotation with one test image of its cell."""
    rng = np.random.default_rng(seed)
    cells = partition_cells(partition, manifest, "test")
    pairs = []
    for cell in sorted(cells):
        ims, insts = cells[cell]
        if not insts:
            continue
        if not ims:
            raise SamplingError(f"test cell {cell} has annotations but no images")
        ims = sorted(ims)
        for inst in sorted(insts):
            pairs.append((ims[rng.integers(0, len(ims))], inst, cell[1]))
    return pairs

