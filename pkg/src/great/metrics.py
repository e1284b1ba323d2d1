"""Dense heatmap metrics: AUC, aIOU, SIM and MAE.

AUC and aIOU binarize the ground truth at ``GT_THRESHOLD``. A sample where a
metric is undefined is excluded from that metric's mean and counted in the
report instead of being scored as zero.
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError

GT_THRESHOLD = 0.5
IOU_THRESHOLDS = tuple(np.round(np.arange(1, 20) * 0.05, 2))
METRICS = ("auc", "aiou", "sim", "mae")
HIGHER_IS_BETTER = {"auc": True, "aiou": True, "sim": True, "mae": False}


def _vectors(phi, label):
    phi = np.asarray(phi, dtype=np.float64).ravel()
    label = np.asarray(label, dtype=np.float64).ravel()
    if phi.shape != label.shape:
        raise ShapeError(f"phi has {phi.size} values, label has {label.size}")
    return phi, label


def auc(phi, label, gt_threshold=GT_THRESHOLD):
    """ROC area x 100 from the Mann-Whitney U statistic with average ranks for ties."""
    phi, label = _vectors(phi, label)
    pos = label >= gt_threshold
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative points")
    ranks = rankdata(phi, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def aiou(phi, label, gt_threshold=GT_THRESHOLD, thresholds=IOU_THRESHOLDS):
    phi, label = _vectors(phi, label)
    gt = label >= gt_threshold
    pred = phi[None, :] >= np.asarray(thresholds)[:, None]
    inter = (pred & gt).sum(1)
    union = (pred | gt).sum(1)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return 100.0 * float(iou.mean())


def sim(phi, label):
    phi, label = _vectors(phi, label)
    if phi.min() < 0 or label.min() < 0:
        raise ShapeError("SIM needs nonnegative inputs")
    sp, sl = phi.sum(), label.sum()
    if sp <= 0 or sl <= 0:
        raise UndefinedMetricError("SIM needs both inputs to have a positive sum")
    return float(np.minimum(phi / sp, label / sl).sum())


def mae(phi, label):
    phi, label = _vectors(phi, label)
    return float(np.abs(phi - label).mean())


def evaluate_all(predictions, labels, ids=None, gt_threshold=GT_THRESHOLD, iou_thresholds=IOU_THRESHOLDS):
    """Average each metric over the samples where it is defined."""
    funcs = {
        "auc": lambda p, l: auc(p, l, gt_threshold),
        "aiou": lambda p, l: aiou(p, l, gt_threshold, iou_thresholds),
        "sim": sim,
        "mae": mae,
    }
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    values = {m: [] for m in METRICS}
    per_sample = []
    for i, (p, l) in enumerate(zip(predictions, labels)):
        row = {"id": ids[i] if ids is not None else i}
        for m in METRICS:
            try:
                v = funcs[m](p, l)
            except UndefinedMetricError:
                v = None
            else:
                values[m].append(v)
            row[m] = v
        per_sample.append(row)
    report = {"n_samples": len(predictions)}
    for m in METRICS:
        vals = values[m]
        report[m] = float(np.mean(vals)) if vals else None
        report[f"{m}_skipped"] = len(predictions) - len(vals)
    report["per_sample"] = per_sample
    return report


def report_json(reports):
    """Serialize ``{partition: report}`` deterministically."""
    return json.dumps(reports, indent=1, sort_keys=True) + "\n"


def report_table(reports):
    """Aligned text table, one row per partition, columns AUC, aIOU, SIM, MAE."""
    header = ["partition", "AUC↑", "aIOU↑", "SIM↑", "MAE↓", "n", "skipped"]
    rows = []
    for name, r in reports.items():
        skipped = sum(r[f"{m}_skipped"] for m in METRICS)
        rows.append([name] + [_fmt(r[m], m) for m in METRICS] + [str(r["n_samples"]), str(skipped)])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(header)] + [line(r) for r in rows]) + "\n"


def _fmt(v, metric):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.2f}" if metric in ("auc", "aiou") else f"{v:.4f}"
