"""Deterministic procedural dataset in the PIAD manifest layout.

Every object template is a handful of parametric surfaces. Affordances are
attached to named regions of those surfaces, and the annotation heatmap is
nonzero only on the region's points. Interaction images are orthographic
point splats of a separately drawn instance with a stick figure whose hand
touches the affordance region. Fixture answers for the reasoning chain are
written alongside so the whole pipeline can run offline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import NUM_POINTS
from .dataset import load_manifest, write_point_annotation
from .errors import GenerationError

IMAGE_SIDE = 224

# (object, region) -> (part phrase, geometry description, why it supports the action)
PART_TEXT = {
    ("mug", "handle"): ("handle", "a narrow curved loop attached to the side of the body",
                        "the fingers can wrap around it"),
    ("mug", "rim"): ("rim", "the circular top edge around the open mouth",
                     "liquid flows out over it when the body is tilted"),
    ("knife", "handle"): ("handle", "a narrow elongated grip at one end",
                          "the fingers can wrap around it"),
    ("knife", "edge"): ("blade edge", "a thin sharp straight edge along the bottom of the blade",
                        "it presses through soft material"),
    ("bottle", "neck"): ("neck", "a narrow cylindrical part above the body",
                         "the fingers can wrap around it"),
    ("bottle", "mouth"): ("mouth", "the circular top edge around the open mouth",
                          "liquid flows out over it when the body is tilted"),
}

ACTION_TEXT = {
    "grasp": "holds",
    "pour": "pours water out of",
    "cut": "cuts bread with",
}

OTHER_INTERACTIONS = {
    "mug": ["A person can drink coffee from the mug.", "A person can carry the mug to the table.",
            "A person can wash the mug in the sink.", "A person can fill the mug with tea."],
    "knife": ["A person can slice vegetables with the knife.", "A person can spread butter with the knife.",
              "A person can stab a piece of meat with the knife.", "A person can wipe the knife clean."],
    "bottle": ["A person can drink from the bottle.", "A person can shake the bottle.",
               "A person can carry the bottle in a bag.", "A person can open the cap of the bottle."],
}

DEFAULT_AFFORDANCES = {
    "mug": {"grasp": "handle", "pour": "rim"},
    "knife": {"grasp": "handle", "cut": "edge"},
    "bottle": {"grasp": "neck", "pour": "mouth"},
}


@dataclass
class SyntheticConfig:
    templates: list = field(default_factory=lambda: ["mug", "knife", "bottle"])
    instances_per_object: int = 20
    images_per_cell: int = 6
    # per-template overrides: {"mug": {"affordances": {...}, "rim_band": 0.12}}
    overrides: dict = field(default_factory=dict)
    noise: float = 0.004
    max_yaw_deg: float = 15.0

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("templates", "instances_per_object", "images_per_cell",
                                   "overrides", "noise", "max_yaw_deg") if k in d}
        return cls(**known)


# -- surface samplers -----------------------------------------------------------


def _cylinder_side(rng, n, radius, z0, z1, r1=None):
    """Side of a cylinder (or frustum when r1 is given) around the z axis."""
    r1 = radius if r1 is None else r1
    theta = rng.uniform(0, 2 * np.pi, n)
    t = rng.uniform(0, 1, n)
    r = radius + (r1 - radius) * t
    return np.stack([r * np.cos(theta), r * np.sin(theta), z0 + (z1 - z0) * t], axis=1)


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, z)], axis=1)


def _box_surface(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(0, 1, (n, 3)) * ext
    side = rng.integers(0, 2, n)
    pts[np.arange(n), face_axis] = np.where(side == 1, hi[face_axis], lo[face_axis])
    return pts


def _allocate(areas, total=NUM_POINTS, min_frac=0.08):
    w = np.asarray(areas, float) / sum(areas)
    w = np.maximum(w, min_frac)
    w = w / w.sum()
    counts = np.floor(w * total).astype(int)
    counts[np.argmax(w)] += total - counts.sum()
    return counts


def _mug(rng, p):
    R = rng.uniform(0.34, 0.44)
    H = rng.uniform(0.8, 1.0)
    a = rng.uniform(0.18, 0.24) * H
    b = 0.035
    parts = {"side": 2 * np.pi * R * H, "bottom": np.pi * R ** 2, "handle": np.pi * a * 2 * np.pi * b}
    n_side, n_bottom, n_handle = _allocate(list(parts.values()))
    side = _cylinder_side(rng, n_side, R, 0.0, H)
    bottom = _disk(rng, n_bottom, R, 0.0)
    alpha = rng.uniform(-np.pi / 2, np.pi / 2, n_handle)
    beta = rng.uniform(0, 2 * np.pi, n_handle)
    centre = np.stack([R + a * np.cos(alpha), np.zeros(n_handle), H / 2 + a * np.sin(alpha)], axis=1)
    radial = np.stack([np.cos(alpha), np.zeros(n_handle), np.sin(alpha)], axis=1)
    handle = centre + b * (np.cos(beta)[:, None] * radial + np.sin(beta)[:, None] * np.array([0, 1.0, 0]))
    pts = np.concatenate([side, bottom, handle])
    band = p.get("rim_band", 0.12) * H
    regions = {
        "handle": np.r_[np.zeros(n_side + n_bottom, bool), np.ones(n_handle, bool)],
        "rim": np.r_[side[:, 2] > H - band, np.zeros(n_bottom + n_handle, bool)],
    }
    return pts, regions


def _knife(rng, p):
    L = rng.uniform(0.9, 1.1)
    W = rng.uniform(0.18, 0.24)
    t = 0.02
    Lh = rng.uniform(0.4, 0.5)
    hh, hw = 0.08, 0.06
    blade_area, handle_area = 2 * L * W, 2 * Lh * (hh + hw)
    n_blade, n_handle = _allocate([blade_area, handle_area])
    x = L * rng.uniform(0, 1, n_blade)
    # tapered tip over the last quarter of the blade
    top = W * np.clip((L - x) / (0.25 * L), 0.15, 1.0)
    z = rng.uniform(0, 1, n_blade) * top
    y = np.where(rng.integers(0, 2, n_blade) == 1, t / 2, -t / 2)
    blade = np.stack([x, y, z], axis=1)
    zc = W / 2
    handle = _box_surface(rng, n_handle, [-Lh, -hw / 2, zc - hh / 2], [0.0, hw / 2, zc + hh / 2])
    band = p.get("edge_band", 0.2) * W
    regions = {
        "handle": np.r_[np.zeros(n_blade, bool), np.ones(n_handle, bool)],
        "edge": np.r_[z < band, np.zeros(n_handle, bool)],
    }
    return np.concatenate([blade, handle]), regions


def _bottle(rng, p):
    R = rng.uniform(0.3, 0.38)
    Hb = rng.uniform(0.6, 0.75)
    r = rng.uniform(0.09, 0.12)
    s = 0.15
    Hn = rng.uniform(0.25, 0.32)
    areas = [2 * np.pi * R * Hb, np.pi * R ** 2, np.pi * (R + r) * math.hypot(R - r, s), 2 * np.pi * r * Hn]
    n_body, n_bottom, n_shoulder, n_neck = _allocate(areas)
    body = _cylinder_side(rng, n_body, R, 0.0, Hb)
    bottom = _disk(rng, n_bottom, R, 0.0)
    shoulder = _cylinder_side(rng, n_shoulder, R, Hb, Hb + s, r1=r)
    neck = _cylinder_side(rng, n_neck, r, Hb + s, Hb + s + Hn)
    top = Hb + s + Hn
    band = p.get("mouth_band", 0.3) * Hn
    n_rest = n_body + n_bottom + n_shoulder
    regions = {
        "neck": np.r_[np.zeros(n_rest, bool), neck[:, 2] <= top - band],
        "mouth": np.r_[np.zeros(n_rest, bool), neck[:, 2] > top - band],
    }
    return np.concatenate([body, bottom, shoulder, neck]), regions


TEMPLATES = {"mug": _mug, "knife": _knife, "bottle": _bottle}


def _yaw(pts, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T


def build_instance(template, rng, params=None, noise=0.004, max_yaw_deg=15.0):
    """One procedural instance: (coords [N,3], {region: mask})."""
    if template not in TEMPLATES:
        raise GenerationError(f"unknown template {template!r}")
    pts, regions = TEMPLATES[template](rng, params or {})
    pts = _yaw(pts, math.radians(rng.uniform(-max_yaw_deg, max_yaw_deg)))
    pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts, regions


def region_heatmap(pts, mask):
    """Soft heatmap: in (0.55, 1] on the region, peaked at its centroid, 0 elsewhere."""
    heat = np.zeros(len(pts))
    if not mask.any():
        return heat
    sel = pts[mask]
    d = np.linalg.norm(sel - sel.mean(axis=0), axis=1)
    sigma = max(d.max() * 0.5, 1e-6)
    heat[mask] = 0.55 + 0.45 * np.exp(-(d ** 2) / (2 * sigma ** 2))
    return np.round(heat, 6)


# -- images ---------------------------------------------------------------------


def render_interaction(pts, region_mask, rng, side=IMAGE_SIDE):
    """Orthographic side view (x right, z up) with a stick figure reaching the region."""
    img = Image.new("RGB", (side, side), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    scale = side * rng.uniform(0.34, 0.42)
    off = np.array([side * rng.uniform(0.45, 0.55), side * rng.uniform(0.5, 0.6)])
    centre = pts.mean(axis=0)

    def project(p):
        q = np.atleast_2d(p) - centre
        return np.stack([off[0] + scale * q[:, 0], off[1] - scale * q[:, 2]], axis=1)

    uv = project(pts)
    depth = pts[:, 1]
    shade = np.interp(depth, (depth.min(), depth.max() + 1e-9), (70, 170)).astype(int)
    for (u, v), g in zip(uv, shade):
        draw.point((float(u), float(v)), fill=(g, g, g + 20))

    hand = project(pts[region_mask].mean(axis=0))[0]
    # figure stands on the side of the hand away from the object's centre
    direction = 1.0 if hand[0] >= off[0] else -1.0
    shoulder = hand + np.array([direction * side * 0.16, side * 0.05])
    hip = shoulder + np.array([direction * side * 0.04, side * 0.22])
    head = shoulder + np.array([direction * side * 0.02, -side * 0.07])
    r = side * 0.035
    colour = (200, 40, 40)
    draw.ellipse([head[0] - r, head[1] - r, head[0] + r, head[1] + r], outline=colour, width=2)
    draw.line([tuple(shoulder), tuple(hip)], fill=colour, width=3)
    draw.line([tuple(shoulder), tuple(hand)], fill=colour, width=3)
    for dx in (-0.05, 0.05):
        foot = hip + np.array([dx * side, side * 0.16])
        draw.line([tuple(hip), tuple(foot)], fill=colour, width=3)
    draw.ellipse([hand[0] - 3, hand[1] - 3, hand[0] + 3, hand[1] + 3], fill=colour)
    return img


# -- reasoning fixtures -------------------------------------------------------------


def fixture_answers(obj, affordance, region, rng):
    part, geometry, why = PART_TEXT.get((obj, region), (region, f"the {region} of the {obj}", "it fits the action"))
    action = ACTION_TEXT.get(affordance, f"{affordance}s")
    first = [
        f"The {part} of the {obj} interacts with the person.",
        f"The person is touching the {part} of the {obj}.",
    ][rng.integers(0, 2)]
    second = f"The {part} is {geometry}, so {why}."
    third = f"The person {action} the {obj} by the {part}."
    pool = OTHER_INTERACTIONS.get(obj, [f"A person can move the {obj}.", f"A person can clean the {obj}."])
    a, b = (pool[i] for i in rng.choice(len(pool), size=2, replace=False))
    fourth = [f"1. {a}\n2. {b}", f"- {a}\n- {b}", f"{a[:-1]}; {b[:-1]}"][rng.integers(0, 3)]
    return [first, second, third, fourth]


# -- driver ------------------------------------------------------------------------


def _affordance_map(template, cfg):
    over = cfg.overrides.get(template, {})
    return dict(over.get("affordances", DEFAULT_AFFORDANCES.get(template, {})))


def generate_synthetic(spec, out_dir, seed=0):
    """Write points, labels, images, fixture answers and ``manifest.json``; return the loaded manifest."""
    cfg = spec if isinstance(spec, SyntheticConfig) else SyntheticConfig.from_dict(spec or {})
    out = Path(out_dir)
    for sub in ("points", "labels", "images"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    objects, affordances = [], set()
    point_rows, image_rows, fixtures = [], [], {}
    child_seeds = np.random.SeedSequence(seed).spawn(len(cfg.templates))
    for t_index, template in enumerate(cfg.templates):
        if template not in TEMPLATES:
            raise GenerationError(f"unknown template {template!r}")
        aff_map = _affordance_map(template, cfg)
        if not aff_map:
            raise GenerationError(f"template {template!r} has no affordances")
        params = cfg.overrides.get(template, {})
        objects.append(template)
        affordances.update(aff_map)
        rng = np.random.default_rng(child_seeds[t_index])

        for k in range(cfg.instances_per_object):
            pts, regions = build_instance(template, rng, params, cfg.noise, cfg.max_yaw_deg)
            pts = np.round(pts, 6)
            iid = f"{template}_{k:03d}"
            labels = {}
            for aff, region in sorted(aff_map.items()):
                if region not in regions:
                    raise GenerationError(f"template {template!r} has no region {region!r}")
                if not regions[region].any():
                    raise GenerationError(f"template {template!r}: region {region!r} for {aff!r} is empty")
                rel = f"labels/{iid}_{aff}.txt"
                write_point_annotation(out / rel, pts, region_heatmap(pts, regions[region]))
                labels[aff] = rel
            _write_xyz(out / f"points/{iid}.txt", pts)
            point_rows.append({"file": f"points/{iid}.txt", "object": template, "labels": labels})

        for aff, region in sorted(aff_map.items()):
            for k in range(cfg.images_per_cell):
                pts, regions = build_instance(template, rng, params, cfg.noise, cfg.max_yaw_deg)
                if not regions[region].any():
                    raise GenerationError(f"template {template!r}: region {region!r} for {aff!r} is empty")
                img_id = f"img_{template}_{aff}_{k:02d}"
                render_interaction(pts, regions[region], rng).save(out / f"images/{img_id}.png", optimize=False)
                image_rows.append({"file": f"images/{img_id}.png", "object": template, "affordance": aff})
                fixtures[img_id] = fixture_answers(template, aff, region, rng)

    manifest = {
        "objects": objects,
        "affordances": sorted(affordances),
        "points": point_rows,
        "images": image_rows,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (out / "fixtures.json").write_text(json.dumps(fixtures, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return load_manifest(out / "manifest.json")


def _write_xyz(path, pts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(map(repr, row)) + "\n" for row in np.asarray(pts, float).tolist())
