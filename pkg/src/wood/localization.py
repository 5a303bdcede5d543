"""Localization maps from the trained classifier, seed thresholding, metrics.

The map for class c is the inner product of the class's final-layer weight row
with the spatial feature map, clamped at zero, max-normalized per class, then
bilinearly upsampled to image resolution. Seeds assign each pixel to the
argmax class where the normalized map clears a threshold, else background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import net
from .imgio import write_pfm


@dataclass
class LocalizationMap:
    """Per-class score maps in [0, 1] for the classes present in the image."""

    image_id: str
    maps: dict[int, np.ndarray]  # class index -> (H, W) float map


@dataclass
class SeedMetrics:
    per_class_iou: dict[str, float]  # "background" + foreground class names
    miou: float
    precision: float
    recall: float
    f1: float
    excluded_classes: list[str] = field(default_factory=list)
    zero_division_flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "excluded_classes": self.excluded_classes,
            "zero_division_flags": self.zero_division_flags,
        }


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize with edge replication."""
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.astype(np.float64).copy()
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    a = arr[np.ix_(y0c, x0c)]
    b = arr[np.ix_(y0c, x1c)]
    c = arr[np.ix_(y1c, x0c)]
    d = arr[np.ix_(y1c, x1c)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy) + bot * wy


def raw_cam(state: net.ClassifierState, image, class_index: int) -> np.ndarray:
    """Unnormalized map at feature resolution: the weight-row inner product
    with the feature map. Exposed separately so tests can oracle it."""
    with torch.no_grad():
        fm = net.forward(state, image).feature_map  # (d, h, w)
        w = state.head_weight()[class_index]  # (d,)
        return torch.tensordot(w, fm, dims=([0], [0])).numpy().astype(np.float64)


def cam(
    state: net.ClassifierState, image, present_classes: Sequence[int], image_id: str = ""
) -> LocalizationMap:
    """Normalized, upsampled localization maps for the given classes."""
    if len(present_classes) == 0:
        raise ValueError("present_classes must be non-empty")
    n_classes = state.config.n_classes
    img = np.asarray(image)
    out_h, out_w = img.shape[-2:]
    maps: dict[int, np.ndarray] = {}
    for c in present_classes:
        if not 0 <= c < n_classes:
            raise IndexError(f"class index {c} out of range [0, {n_classes})")
        m = raw_cam(state, image, c)
        m = np.maximum(m, 0.0)
        peak = m.max()
        if peak > 0.0:
            m = m / peak
        maps[int(c)] = np.clip(bilinear_resize(m, out_h, out_w), 0.0, 1.0)
    return LocalizationMap(image_id=image_id, maps=maps)


def seed_from_map(loc: LocalizationMap, theta: float) -> np.ndarray:
    """Per-pixel assignment: argmax class where the map clears theta, else
    background (0); foreground classes are stored as index + 1. Ties go to the
    lower class index."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must be in (0, 1)")
    classes = sorted(loc.maps)
    stack = np.stack([loc.maps[c] for c in classes])
    best = stack.argmax(axis=0)  # first max wins -> lower class index
    best_val = stack.max(axis=0)
    seed = np.zeros(stack.shape[1:], dtype=np.int32)
    fg = best_val >= theta
    class_arr = np.asarray(classes, dtype=np.int32)
    seed[fg] = class_arr[best[fg]] + 1
    return seed


def save_maps(loc: LocalizationMap, class_names: Sequence[str], out_dir: str | Path) -> list[Path]:
    """One PFM per class: <image_id>.<class>.pfm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c, m in sorted(loc.maps.items()):
        path = out_dir / f"{loc.image_id}.{class_names[c]}.pfm"
        write_pfm(path, m)
        written.append(path)
    return written


def evaluate_seeds(
    seeds: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    class_names: Sequence[str],
) -> SeedMetrics:
    """Pooled pixel metrics over a whole split.

    Per-class IoU over background + each foreground class; classes absent from
    both prediction and ground truth are excluded from the mean and recorded.
    Precision/recall/F1 treat all foreground classes as one binary mask.
    """
    if len(seeds) != len(gt_masks):
        raise ValueError("seeds and ground-truth masks differ in length")
    if len(seeds) == 0:
        raise ValueError("nothing to evaluate")
    n = len(class_names) + 1  # + background
    conf = np.zeros((n, n), dtype=np.int64)
    for seed, gt in zip(seeds, gt_masks):
        s = np.asarray(seed, dtype=np.int64)
        g = np.asarray(gt, dtype=np.int64)
        if s.shape != g.shape:
            raise ValueError(f"seed shape {s.shape} != mask shape {g.shape}")
        if s.min() < 0 or s.max() >= n or g.min() < 0 or g.max() >= n:
            raise ValueError("labels out of range for the class list")
        conf += np.bincount(g.ravel() * n + s.ravel(), minlength=n * n).reshape(n, n)

    names = ["background"] + list(class_names)
    per_class: dict[str, float] = {}
    excluded: list[str] = []
    flags: list[str] = []
    ious = []
    for k in range(n):
        tp = conf[k, k]
        union = conf[k, :].sum() + conf[:, k].sum() - tp
        if union == 0:
            excluded.append(names[k])
            continue
        iou = tp / union
        per_class[names[k]] = float(iou)
        ious.append(iou)
    miou = float(np.mean(ious)) if ious else 0.0

    gt_fg = conf[1:, :].sum()
    pred_fg = conf[:, 1:].sum()
    tp_fg = conf[1:, 1:].sum()
    if pred_fg == 0:
        precision = 0.0
        flags.append("precision_zero_division")
    else:
        precision = float(tp_fg / pred_fg)
    if gt_fg == 0:
        recall = 0.0
        flags.append("recall_zero_division")
    else:
        recall = float(tp_fg / gt_fg)
    if precision + recall == 0.0:
        f1 = 0.0
        flags.append("f1_zero_division")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return SeedMetrics(
        per_class_iou=per_class,
        miou=miou,
        precision=precision,
        recall=recall,
        f1=f1,
        excluded_classes=excluded,
        zero_division_flags=flags,
    )


def per_class_report(baseline: SeedMetrics, method: SeedMetrics) -> dict:
    """Per-class IoU deltas (method - baseline), sorted by descending
    improvement; returns rows plus an aligned-text rendering."""
    if set(baseline.per_class_iou) != set(method.per_class_iou):
        raise ValueError("metric histories cover different class lists")
    rows = []
    for name in baseline.per_class_iou:
        b = baseline.per_class_iou[name]
        m = method.per_class_iou[name]
        rows.append({"class": name, "baseline": b, "method": m, "delta": m - b})
    rows.sort(key=lambda r: (-r["delta"], r["class"]))
    width = max(len(r["class"]) for r in rows)
    lines = [f"{'class':<{width}}  baseline  method    delta"]
    for r in rows:
        lines.append(
            f"{r['class']:<{width}}  {r['baseline']:8.4f}  {r['method']:8.4f}  {r['delta']:+8.4f}"
        )
    return {"rows": rows, "text": "\n".join(lines)}


def save_metrics(metrics: SeedMetrics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics.to_json(), indent=2), encoding="utf-8")
