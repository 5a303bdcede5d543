"""Synthetic shapes-on-textures dataset with a controllable spurious correlation.

Each foreground class is a shape paired with a background texture. With
probability `correlation_rate` an in-distribution image of the class is drawn
on its paired texture, otherwise on a neutral one, so the texture becomes a
spurious predictor of the class. The candidate-OoD pool contains no labeled
foreground: part of it is "hard" (a paired texture alone), part neutral, and a
configured contamination fraction secretly contains a foreground shape to
exercise the manual-review pipeline. Ground-truth masks are pixel-perfect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, get_float, get_int, get_str, reject_unknown_keys
from .imgio import load_gray_u8, save_gray_u8
from .manifest import (
    SPLIT_IN_DIST,
    SPLIT_OOD_CANDIDATE,
    ClassList,
    Manifest,
    SampleRecord,
    save_manifest,
)

SHAPES = ("square", "disk", "triangle", "cross")
TEXTURES = ("stripes", "checker", "dots", "hatch", "gray")

_GEN_KEYS = {
    "classes",
    "image_size",
    "correlation_rate",
    "n_in_per_class",
    "n_ood_candidate",
    "n_test_per_class",
    "hard_fraction",
    "contamination",
    "noise_std",
    "rng_seed",
}


@dataclass(frozen=True)
class GenSpec:
    """Generation parameters; see module docstring for semantics."""

    classes: tuple[tuple[str, str], ...]  # (shape, paired texture) per class
    image_size: int = 64
    correlation_rate: float = 0.95
    n_in_per_class: int = 100
    n_ood_candidate: int = 100
    n_test_per_class: int = 0
    hard_fraction: float = 0.5
    contamination: float = 0.0
    noise_std: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("need at least one class")
        shapes = [s for s, _ in self.classes]
        textures = [t for _, t in self.classes]
        for s in shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}, palette: {SHAPES}")
        for t in textures:
            if t not in TEXTURES:
                raise ConfigError(f"unknown texture {t!r}, palette: {TEXTURES}")
        if len(set(shapes)) != len(shapes) or len(set(textures)) != len(textures):
            raise ConfigError("classes must use distinct shapes and distinct textures")
        if not self.neutral_textures():
            raise ConfigError("at least one texture must remain unpaired for neutral backgrounds")
        if not 0.0 <= self.correlation_rate <= 1.0:
            raise ConfigError("correlation_rate must be in [0, 1]")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError("hard_fraction must be in [0, 1]")
        if not 0.0 <= self.contamination < 1.0:
            raise ConfigError("contamination must be in [0, 1)")
        if min(self.n_in_per_class, self.n_ood_candidate, self.n_test_per_class) < 0:
            raise ConfigError("counts must be >= 0")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")

    def neutral_textures(self) -> tuple[str, ...]:
        paired = {t for _, t in self.classes}
        return tuple(t for t in TEXTURES if t not in paired)

    def class_names(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.classes)

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "GenSpec":
        reject_unknown_keys(kv, _GEN_KEYS)
        classes = []
        for pair in get_str(kv, "classes").split(","):
            shape, sep, texture = pair.strip().partition(":")
            if not sep:
                raise ConfigError(f"classes entries must be shape:texture, got {pair!r}")
            classes.append((shape.strip(), texture.strip()))
        return GenSpec(
            classes=tuple(classes),
            image_size=get_int(kv, "image_size", 64),
            correlation_rate=get_float(kv, "correlation_rate", 0.95),
            n_in_per_class=get_int(kv, "n_in_per_class", 100),
            n_ood_candidate=get_int(kv, "n_ood_candidate", 100),
            n_test_per_class=get_int(kv, "n_test_per_class", 0),
            hard_fraction=get_float(kv, "hard_fraction", 0.5),
            contamination=get_float(kv, "contamination", 0.0),
            noise_std=get_float(kv, "noise_std", 0.02),
            rng_seed=get_int(kv, "rng_seed", 0),
        )


def render_texture(kind: str, size: int) -> np.ndarray:
    """Background texture, values kept below the foreground intensity."""
    y, x = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        return np.where((y // 4) % 2 == 0, 0.3, 0.7)
    if kind == "checker":
        return np.where(((x // 8) + (y // 8)) % 2 == 0, 0.3, 0.7)
    if kind == "dots":
        base = np.full((size, size), 0.35)
        cy, cx = (y % 8) - 4, (x % 8) - 4
        base[cy * cy + cx * cx <= 4] = 0.75
        return base
    if kind == "hatch":
        return np.where(((x + y) // 4) % 2 == 0, 0.3, 0.7)
    if kind == "gray":
        return np.full((size, size), 0.5)
    raise ValueError(f"unknown texture {kind!r}")


def render_shape(kind: str, size: int, cy: int, cx: int, h: int) -> np.ndarray:
    """Boolean foreground mask for one shape with half-extent h at (cy, cx)."""
    y, x = np.mgrid[0:size, 0:size]
    dy, dx = y - cy, x - cx
    if kind == "square":
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "disk":
        return dy * dy + dx * dx <= h * h
    if kind == "triangle":
        # upright isoceles: apex at cy-h, base at cy+h
        t = y - (cy - h)
        return (t >= 0) & (t <= 2 * h) & (np.abs(dx) * 2 <= t)
    if kind == "cross":
        bar = max(1, h // 3)
        return ((np.abs(dy) <= bar) & (np.abs(dx) <= h)) | (
            (np.abs(dx) <= bar) & (np.abs(dy) <= h)
        )
    raise ValueError(f"unknown shape {kind!r}")


def _compose(
    spec: GenSpec,
    rng: np.random.Generator,
    texture: str,
    shape_class: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image and its mask (uint8 pixels; mask is class index + 1)."""
    size = spec.image_size
    img = render_texture(texture, size).copy()
    mask = np.zeros((size, size), dtype=np.uint8)
    if shape_class is not None:
        h = int(rng.integers(size // 12, size // 8 + 1))
        cy = int(rng.integers(h + 1, size - h - 1))
        cx = int(rng.integers(h + 1, size - h - 1))
        fg = render_shape(spec.classes[shape_class][0], size, cy, cx, h)
        img[fg] = 0.95
        mask[fg] = shape_class + 1
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, mask


def _background_for(spec: GenSpec, rng: np.random.Generator, cls: int) -> str:
    if rng.random() < spec.correlation_rate:
        return spec.classes[cls][1]
    neutral = spec.neutral_textures()
    return neutral[int(rng.integers(len(neutral)))]


def _contaminated_indices(n: int, fraction: float) -> set[int]:
    # Deterministic allocation: every ceil(1/f)-th candidate carries a shape,
    # so the pool's positive rate is exact rather than sampled.
    if fraction <= 0.0 or n == 0:
        return set()
    step = math.ceil(1.0 / fraction)
    return {i for i in range(n) if (i + 1) % step == 0}


def generate(spec: GenSpec, out_dir: str | Path) -> Manifest:
    """Emit images, masks and manifests under out_dir; returns the train manifest.

    Deterministic: identical specs produce byte-identical trees. The train
    manifest (manifest.jsonl) holds in-distribution and candidate-OoD records;
    held-out labeled images, if requested, go to a separate test.jsonl.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    classes = ClassList(spec.class_names())
    n_cls = len(classes)

    def emit(rec_id: str, texture: str, shape_class: int | None, split: str) -> SampleRecord:
        pixels, mask = _compose(spec, rng, texture, shape_class)
        img_rel = f"images/{rec_id}.png"
        mask_rel = f"masks/{rec_id}.png"
        save_gray_u8(out_dir / img_rel, pixels)
        save_gray_u8(out_dir / mask_rel, mask)
        labels = [0] * n_cls
        if split == SPLIT_IN_DIST and shape_class is not None:
            labels[shape_class] = 1
        return SampleRecord(
            id=rec_id,
            path=img_rel,
            labels=tuple(labels),
            split=split,
            gt_mask_path=mask_rel,
        )

    train_records = []
    for cls in range(n_cls):
        for i in range(spec.n_in_per_class):
            texture = _background_for(spec, rng, cls)
            train_records.append(
                emit(f"in_{classes.names[cls]}_{i:04d}", texture, cls, SPLIT_IN_DIST)
            )

    contaminated = _contaminated_indices(spec.n_ood_candidate, spec.contamination)
    neutral = spec.neutral_textures()
    hard_count = 0
    clean_count = 0
    for i in range(spec.n_ood_candidate):
        if i in contaminated:
            cls = i % n_cls
            texture = _background_for(spec, rng, cls)
            rec = emit(f"cand_{i:04d}", texture, cls, SPLIT_OOD_CANDIDATE)
        else:
            # deterministic spread: floor accumulation yields exactly
            # round(n_clean * hard_fraction) hard candidates
            take_hard = math.floor((clean_count + 1) * spec.hard_fraction) > math.floor(
                clean_count * spec.hard_fraction
            )
            if take_hard:
                texture = spec.classes[hard_count % n_cls][1]
                hard_count += 1
            else:
                texture = neutral[int(rng.integers(len(neutral)))]
            clean_count += 1
            rec = emit(f"cand_{i:04d}", texture, None, SPLIT_OOD_CANDIDATE)
        train_records.append(rec)

    manifest = Manifest(classes=classes, records=tuple(train_records))
    save_manifest(manifest, out_dir / "manifest.jsonl")

    if spec.n_test_per_class > 0:
        test_records = []
        for cls in range(n_cls):
            for i in range(spec.n_test_per_class):
                texture = _background_for(spec, rng, cls)
                test_records.append(
                    emit(f"test_{classes.names[cls]}_{i:04d}", texture, cls, SPLIT_IN_DIST)
                )
        save_manifest(
            Manifest(classes=classes, records=tuple(test_records)),
            out_dir / "test.jsonl",
        )
    return manifest


def describe(manifest: Manifest, base_dir: str | Path | None = None) -> dict:
    """Summary stats: counts per split/class and the candidate pool's true
    contamination rate, read off the synthetic ground-truth masks."""
    stats = {
        "classes": list(manifest.classes.names),
        "total": len(manifest.records),
        "splits": {s: 0 for s in ("in_dist", "ood_candidate", "ood_hard")},
        "per_class_in_dist": {name: 0 for name in manifest.classes.names},
        "candidate_contamination": 0.0,
    }
    contaminated = 0
    candidates = 0
    for rec in manifest.records:
        stats["splits"][rec.split] += 1
        if rec.split == SPLIT_IN_DIST:
            for idx in rec.positive_classes():
                stats["per_class_in_dist"][manifest.classes.names[idx]] += 1
        elif rec.split == SPLIT_OOD_CANDIDATE:
            candidates += 1
            if rec.gt_mask_path is not None:
                mask_path = Path(rec.gt_mask_path)
                if base_dir is not None:
                    mask_path = Path(base_dir) / mask_path
                if mask_path.exists() and load_gray_u8(mask_path).any():
                    contaminated += 1
    if candidates:
        stats["candidate_contamination"] = contaminated / candidates
    return stats
