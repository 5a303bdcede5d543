"""Experiment orchestration: config files, training runs, ablation matrix,
data-quantity sweeps, the tau/lambda grid, and feature dumps.

Every run is deterministic given its root seed. The root seed is split into
per-purpose child seeds (net init, shuffling, k-means, subset sampling) that
are recorded in the run report.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import net
from .clusters import (
    ClusterSet,
    build_in_clusters,
    build_ood_clusters_by_predicted_class,
    build_ood_clusters_kmeans,
)
from .config import (
    ConfigError,
    get_bool,
    get_float,
    get_float_list,
    get_int,
    get_int_list,
    get_str,
    reject_unknown_keys,
)
from .imgio import load_gray_u8, load_image_unit
from .losses import ABLATION_ROWS, Hyperparams, LossFlags, total_loss_tensor
from .localization import SeedMetrics, cam, evaluate_seeds, seed_from_map
from .manifest import SPLIT_IN_DIST, SPLIT_OOD_HARD, Manifest, load_manifest

_CONFIG_KEYS = {
    "train_manifest",
    "hard_ood_manifest",
    "eval_manifest",
    "out_dir",
    "channels",
    "lr",
    "epochs",
    "batch_in",
    "batch_ood",
    "lambda",
    "tau",
    "k",
    "refresh_every",
    "cls_on_in",
    "cls_on_ood",
    "d_on_in",
    "d_on_ood",
    "uniform_ood_labels",
    "clustering",
    "theta",
    "rng_seed",
    "repeats",
    "ood_sizes",
    "in_sizes",
    "fixed_budget",
    "taus",
    "lambdas",
}


@dataclass(frozen=True)
class ExperimentConfig:
    train_manifest: str
    out_dir: str
    hard_ood_manifest: str | None = None
    eval_manifest: str | None = None
    channels: tuple[int, ...] = (16, 32, 32)
    lr: float = 0.05
    epochs: int = 15
    batch_in: int = 16
    batch_ood: int = 16
    hp: Hyperparams = field(default_factory=Hyperparams)
    flags: LossFlags = field(default_factory=LossFlags)
    clustering: str = "kmeans"
    theta: float = 0.25
    rng_seed: int = 0
    repeats: int = 5
    ood_sizes: tuple[int, ...] = ()
    in_sizes: tuple[int, ...] = ()
    fixed_budget: bool = False
    # default grid covers the stock operating point (tau=20, lambda=0.007)
    taus: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0)
    lambdas: tuple[float, ...] = (0.003, 0.005, 0.007, 0.01)

    def __post_init__(self):
        if not self.flags.cls_on_in:
            raise ConfigError("cls_on_in cannot be disabled; every run trains on labels")
        if self.clustering not in ("kmeans", "predicted_class"):
            raise ConfigError(f"unknown clustering method {self.clustering!r}")
        if self.epochs < 1 or self.batch_in < 1 or self.batch_ood < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must be in (0, 1)")

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "ExperimentConfig":
        reject_unknown_keys(kv, _CONFIG_KEYS)
        hp = Hyperparams(
            lam=get_float(kv, "lambda", 0.007),
            tau=get_float(kv, "tau", 20.0),
            k=get_int(kv, "k", 50),
            refresh_every=get_int(kv, "refresh_every", 0),
        )
        flags = LossFlags(
            cls_on_in=get_bool(kv, "cls_on_in", True),
            cls_on_ood=get_bool(kv, "cls_on_ood", False),
            d_on_in=get_bool(kv, "d_on_in", False),
            d_on_ood=get_bool(kv, "d_on_ood", False),
            uniform_ood_labels=get_bool(kv, "uniform_ood_labels", False),
        )
        return ExperimentConfig(
            train_manifest=get_str(kv, "train_manifest"),
            out_dir=get_str(kv, "out_dir"),
            hard_ood_manifest=kv.get("hard_ood_manifest"),
            eval_manifest=kv.get("eval_manifest"),
            channels=tuple(get_int_list(kv, "channels", [16, 32, 32])),
            lr=get_float(kv, "lr", 0.05),
            epochs=get_int(kv, "epochs", 15),
            batch_in=get_int(kv, "batch_in", 16),
            batch_ood=get_int(kv, "batch_ood", 16),
            hp=hp,
            flags=flags,
            clustering=get_str(kv, "clustering", "kmeans"),
            theta=get_float(kv, "theta", 0.25),
            rng_seed=get_int(kv, "rng_seed", 0),
            repeats=get_int(kv, "repeats", 5),
            ood_sizes=tuple(get_int_list(kv, "ood_sizes", [])),
            in_sizes=tuple(get_int_list(kv, "in_sizes", [])),
            fixed_budget=get_bool(kv, "fixed_budget", False),
            taus=tuple(get_float_list(kv, "taus", [10.0, 20.0, 30.0, 40.0])),
            lambdas=tuple(get_float_list(kv, "lambdas", [0.003, 0.005, 0.007, 0.01])),
        )

    def snapshot(self) -> dict:
        return {
            "train_manifest": self.train_manifest,
            "hard_ood_manifest": self.hard_ood_manifest,
            "eval_manifest": self.eval_manifest,
            "out_dir": self.out_dir,
            "channels": list(self.channels),
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_in": self.batch_in,
            "batch_ood": self.batch_ood,
            "lambda": self.hp.lam,
            "tau": self.hp.tau,
            "k": self.hp.k,
            "refresh_every": self.hp.refresh_every,
            "cls_on_in": self.flags.cls_on_in,
            "cls_on_ood": self.flags.cls_on_ood,
            "d_on_in": self.flags.d_on_in,
            "d_on_ood": self.flags.d_on_ood,
            "uniform_ood_labels": self.flags.uniform_ood_labels,
            "clustering": self.clustering,
            "theta": self.theta,
            "rng_seed": self.rng_seed,
        }


def derive_seeds(root: int) -> dict[str, int]:
    children = np.random.SeedSequence(root).spawn(4)
    names = ("init", "shuffle", "kmeans", "subset")
    return {
        name: int(child.generate_state(1, np.uint32)[0])
        for name, child in zip(names, children)
    }


@dataclass
class RunReport:
    config: dict
    seeds: dict
    epoch_losses: list[dict]
    metrics: dict
    wall_time_s: float

    def fingerprint(self) -> str:
        """Hash of the deterministic payload; wall time is excluded."""
        payload = {
            "config": self.config,
            "seeds": self.seeds,
            "epoch_losses": self.epoch_losses,
            "metrics": self.metrics,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "epoch_losses": self.epoch_losses,
            "metrics": self.metrics,
            "wall_time_s": self.wall_time_s,
            "fingerprint": self.fingerprint(),
        }


@dataclass
class LoadedSplit:
    ids: list[str]
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N, C) int
    mask_paths: list[str | None]


def load_split(manifest: Manifest, base_dir: Path, split: str) -> LoadedSplit:
    records = manifest.by_split(split)
    images = (
        np.stack([load_image_unit(base_dir / rec.path) for rec in records])
        if records
        else np.zeros((0, 0, 0), dtype=np.float32)
    )
    labels = np.array([rec.labels for rec in records], dtype=np.int64).reshape(
        len(records), len(manifest.classes)
    )
    return LoadedSplit(
        ids=[rec.id for rec in records],
        images=images,
        labels=labels,
        mask_paths=[rec.gt_mask_path for rec in records],
    )


class _OodCycler:
    """Round-robin over the (smaller) OoD pool, reshuffled each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        for i in range(count):
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out[i] = self.order[self.pos]
            self.pos += 1
        return out


def _batch_features(state: net.ClassifierState, images: np.ndarray, batch: int = 256):
    scores = []
    feats = []
    for start in range(0, len(images), batch):
        s, z = net.forward_numpy(state, images[start : start + batch])
        scores.append(s)
        feats.append(z)
    return np.concatenate(scores), np.concatenate(feats)


def refresh_clusters(
    state: net.ClassifierState,
    in_split: LoadedSplit,
    ood_images: np.ndarray | None,
    config: ExperimentConfig,
    class_names: Sequence[str],
    kmeans_seed: int,
) -> tuple[ClusterSet | None, ClusterSet | None]:
    """Recompute cluster sets from the current classifier; centers are
    constants until the next refresh."""
    pin = pood = None
    if config.flags.d_on_in:
        _, z_in = _batch_features(state, in_split.images)
        pin = build_in_clusters(z_in, in_split.labels, class_names)
    if config.flags.d_on_ood:
        if ood_images is None or len(ood_images) == 0:
            raise ConfigError("d_on_ood is set but there is no hard-OoD data")
        scores, z_ood = _batch_features(state, ood_images)
        if config.clustering == "kmeans":
            pood = build_ood_clusters_kmeans(z_ood, config.hp.k, kmeans_seed)
        else:
            pood = build_ood_clusters_by_predicted_class(
                z_ood, scores.argmax(axis=1), len(class_names)
            )
    return pin, pood


def evaluate_on_manifest(
    state: net.ClassifierState,
    manifest: Manifest,
    base_dir: Path,
    theta: float,
) -> SeedMetrics:
    """Localization seeds for every labeled record, scored against the masks."""
    seeds = []
    gts = []
    for rec in manifest.by_split(SPLIT_IN_DIST):
        if rec.gt_mask_path is None:
            raise ConfigError(f"record {rec.id!r} has no ground-truth mask to evaluate against")
        image = load_image_unit(base_dir / rec.path)
        loc = cam(state, image, rec.positive_classes(), image_id=rec.id)
        seeds.append(seed_from_map(loc, theta))
        gts.append(load_gray_u8(base_dir / rec.gt_mask_path).astype(np.int64))
    return evaluate_seeds(seeds, gts, manifest.classes.names)


def train(
    config: ExperimentConfig,
    *,
    seed: int | None = None,
    in_subset: np.ndarray | None = None,
    ood_subset: np.ndarray | None = None,
    write: bool = True,
) -> tuple[net.ClassifierState, RunReport]:
    """One training run; deterministic given config + seed.

    in_subset / ood_subset restrict the pools by index (used by the sweeps).
    """
    t0 = time.monotonic()
    root_seed = config.rng_seed if seed is None else seed
    seeds = derive_seeds(root_seed)

    train_path = Path(config.train_manifest)
    manifest = load_manifest(train_path)
    base_dir = train_path.parent
    class_names = manifest.classes.names
    in_split = load_split(manifest, base_dir, SPLIT_IN_DIST)
    if len(in_split.ids) == 0:
        raise ConfigError("train manifest has no in-distribution records")

    ood_images: np.ndarray | None = None
    if config.flags.needs_ood_data():
        if config.hard_ood_manifest is None:
            raise ConfigError("OoD loss flags are set but hard_ood_manifest is missing")
        ood_path = Path(config.hard_ood_manifest)
        ood_manifest = load_manifest(ood_path)
        ood_split = load_split(ood_manifest, ood_path.parent, SPLIT_OOD_HARD)
        if len(ood_split.ids) == 0:
            raise ConfigError("hard-OoD manifest has no ood_hard records")
        ood_images = ood_split.images
        if ood_subset is not None:
            ood_images = ood_images[ood_subset]
            if len(ood_images) == 0:
                raise ConfigError("empty OoD subset")

    if in_subset is not None:
        in_split = LoadedSplit(
            ids=[in_split.ids[i] for i in in_subset],
            images=in_split.images[in_subset],
            labels=in_split.labels[in_subset],
            mask_paths=[in_split.mask_paths[i] for i in in_subset],
        )

    image_size = in_split.images.shape[-1]
    state = net.ClassifierState(
        net.NetConfig(
            n_classes=len(class_names),
            image_size=image_size,
            channels=config.channels,
            init_seed=seeds["init"],
        )
    )

    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    cycler = (
        _OodCycler(len(ood_images), shuffle_rng) if ood_images is not None else None
    )
    n_in = len(in_split.ids)
    steps_per_epoch = (n_in + config.batch_in - 1) // config.batch_in
    pin = pood = None
    refresh_idx = 0
    global_step = 0
    epoch_losses: list[dict] = []

    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n_in)
        if config.flags.needs_distance() and config.hp.refresh_every == 0:
            pin, pood = refresh_clusters(
                state, in_split, ood_images, config, class_names,
                seeds["kmeans"] + refresh_idx,
            )
            refresh_idx += 1
        sums = {"total": 0.0, "cls": 0.0, "dist": 0.0}
        for step in range(steps_per_epoch):
            if (
                config.flags.needs_distance()
                and config.hp.refresh_every > 0
                and global_step % config.hp.refresh_every == 0
            ):
                pin, pood = refresh_clusters(
                    state, in_split, ood_images, config, class_names,
                    seeds["kmeans"] + refresh_idx,
                )
                refresh_idx += 1
            idx = order[step * config.batch_in : (step + 1) * config.batch_in]
            images_in = in_split.images[idx]
            y_in = in_split.labels[idx]
            images_ood = None
            if cycler is not None and (config.flags.cls_on_ood or config.flags.d_on_ood):
                images_ood = ood_images[cycler.take(config.batch_ood)]
            loss_t, cls_t, dist_t = total_loss_tensor(
                state, images_in, y_in, images_ood, pin, pood, config.hp, config.flags
            )
            grads = net.grad(state, lambda: loss_t)
            net.sgd_step(state, grads, config.lr)
            sums["total"] += float(loss_t.detach())
            sums["cls"] += float(cls_t.detach())
            sums["dist"] += float(dist_t.detach())
            global_step += 1
        epoch_losses.append(
            {key: value / steps_per_epoch for key, value in sums.items()}
        )

    eval_path = Path(config.eval_manifest) if config.eval_manifest else train_path
    eval_manifest = load_manifest(eval_path)
    metrics = evaluate_on_manifest(state, eval_manifest, eval_path.parent, config.theta)

    report = RunReport(
        config=config.snapshot(),
        seeds={"root": root_seed, **seeds},
        epoch_losses=epoch_losses,
        metrics=metrics.to_json(),
        wall_time_s=time.monotonic() - t0,
    )
    if write:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        net.save_checkpoint(state, out_dir / "checkpoint.bin")
        (out_dir / "report.json").write_text(
            json.dumps(report.to_json(), indent=2), encoding="utf-8"
        )
    return state, report


def ablate(config: ExperimentConfig, *, write: bool = True) -> dict:
    """Run the six loss/data flag combinations (a)-(f) on the same data and
    seed; emit one row per combination."""
    rows = {}
    for label, flags in ABLATION_ROWS.items():
        run_config = replace(config, flags=flags)
        _, report = train(run_config, write=False)
        rows[label] = report
    table = _ablation_table(rows)
    result = {
        "rows": {label: report.to_json() for label, report in rows.items()},
        "table": table,
    }
    if write:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(
            json.dumps(result, indent=2), encoding="utf-8"
        )
        (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return result


def _ablation_table(rows: dict[str, RunReport]) -> str:
    lines = ["row  cls_in  cls_ood  d_in  d_ood    miou    prec  recall      f1"]
    for label, report in rows.items():
        flags = ABLATION_ROWS[label]
        m = report.metrics

        def mark(flag: bool) -> str:
            return "x" if flag else "."

        lines.append(
            f"({label})  {mark(flags.cls_on_in):>6}  {mark(flags.cls_on_ood):>7}"
            f"  {mark(flags.d_on_in):>4}  {mark(flags.d_on_ood):>5}"
            f"  {m['miou']:6.4f}  {m['precision']:6.4f}  {m['recall']:6.4f}  {m['f1']:6.4f}"
        )
    return "\n".join(lines)


def _quantiles(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "min": float(arr.min()),
        "q25": float(np.quantile(arr, 0.25)),
        "median": float(np.quantile(arr, 0.5)),
        "q75": float(np.quantile(arr, 0.75)),
        "max": float(arr.max()),
        "std": float(arr.std()),
        "values": [float(v) for v in arr],
    }


def sweep_ood_count(config: ExperimentConfig, *, write: bool = True) -> dict:
    """mIoU vs hard-OoD count, repeated over random subsets.

    The training seed is held fixed so the spread at each point isolates the
    sensitivity to which OoD images were drawn (the full-pool point therefore
    has zero spread). Size 0 runs the plain baseline: with no hard-OoD set
    every OoD-dependent term is inactive.
    """
    if not config.ood_sizes:
        raise ConfigError("ood_sizes is empty")
    if config.hard_ood_manifest is None:
        raise ConfigError("sweep needs hard_ood_manifest")
    ood_path = Path(config.hard_ood_manifest)
    pool = len(load_manifest(ood_path).by_split(SPLIT_OOD_HARD))
    train_manifest = load_manifest(Path(config.train_manifest))
    n_in_total = len(train_manifest.by_split(SPLIT_IN_DIST))
    seeds = derive_seeds(config.rng_seed)
    subset_root = np.random.SeedSequence(seeds["subset"])

    points = []
    for size in config.ood_sizes:
        if size > pool:
            raise ConfigError(f"requested |D_ood|={size} exceeds pool of {pool}")
        mious = []
        for rep in range(config.repeats):
            rng = np.random.default_rng(subset_root.spawn(1)[0])
            if size == 0:
                run_config = replace(config, flags=LossFlags())
                _, report = train(run_config, write=False)
            else:
                # sorted: the sampled object is the subset, not an ordering,
                # so the full-pool point is identical across repeats
                ood_subset = np.sort(rng.choice(pool, size=size, replace=False))
                in_subset = None
                if config.fixed_budget:
                    keep = n_in_total - size
                    if keep < 1:
                        raise ConfigError("fixed budget leaves no in-distribution data")
                    in_subset = np.sort(rng.choice(n_in_total, size=keep, replace=False))
                _, report = train(
                    config, in_subset=in_subset, ood_subset=ood_subset, write=False
                )
            mious.append(report.metrics["miou"])
            if size == 0:
                break  # baseline is deterministic; one run covers all repeats
        points.append({"ood_size": int(size), "miou": _quantiles(mious)})
    result = {"fixed_budget": config.fixed_budget, "points": points}
    if write:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep_ood.json").write_text(
            json.dumps(result, indent=2), encoding="utf-8"
        )
    return result


def sweep_in_count(config: ExperimentConfig, *, write: bool = True) -> dict:
    """mIoU vs in-distribution count at a fixed hard-OoD pool."""
    if not config.in_sizes:
        raise ConfigError("in_sizes is empty")
    train_manifest = load_manifest(Path(config.train_manifest))
    n_in_total = len(train_manifest.by_split(SPLIT_IN_DIST))
    seeds = derive_seeds(config.rng_seed)
    subset_root = np.random.SeedSequence(seeds["subset"])
    points = []
    for size in config.in_sizes:
        if size > n_in_total or size < 1:
            raise ConfigError(f"requested |D_in|={size} outside pool of {n_in_total}")
        mious = []
        for _ in range(config.repeats):
            rng = np.random.default_rng(subset_root.spawn(1)[0])
            in_subset = np.sort(rng.choice(n_in_total, size=size, replace=False))
            _, report = train(config, in_subset=in_subset, write=False)
            mious.append(report.metrics["miou"])
        points.append({"in_size": int(size), "miou": _quantiles(mious)})
    result = {"points": points}
    if write:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep_in.json").write_text(
            json.dumps(result, indent=2), encoding="utf-8"
        )
    return result


def grid_tau_lambda(config: ExperimentConfig, *, write: bool = True) -> dict:
    """Cross product of the configured tau and lambda lists, one run per cell."""
    if not config.taus or not config.lambdas:
        raise ConfigError("taus and lambdas must both be non-empty")
    cells = []
    for tau in config.taus:
        for lam in config.lambdas:
            run_config = replace(config, hp=replace(config.hp, tau=tau, lam=lam))
            _, report = train(run_config, write=False)
            cells.append({"tau": tau, "lambda": lam, "miou": report.metrics["miou"]})
    header = "tau \\ lambda  " + "  ".join(f"{lam:>8g}" for lam in config.lambdas)
    lines = [header]
    for tau in config.taus:
        row = [f"{tau:>12g}"]
        for lam in config.lambdas:
            cell = next(c for c in cells if c["tau"] == tau and c["lambda"] == lam)
            row.append(f"{cell['miou']:8.4f}")
        lines.append("  ".join(row))
    result = {"cells": cells, "table": "\n".join(lines)}
    if write:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "grid.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
        (out_dir / "grid.txt").write_text(result["table"] + "\n", encoding="utf-8")
    return result


def dump_features(
    state: net.ClassifierState,
    manifest: Manifest,
    base_dir: str | Path,
    out_path: str | Path,
) -> int:
    """One JSONL row per sample: id, split, labels, predicted class, z."""
    base = Path(base_dir)
    names = manifest.classes.names
    count = 0
    with Path(out_path).open("w", encoding="utf-8") as fh:
        for rec in manifest.records:
            image = load_image_unit(base / rec.path)
            scores, z = net.forward_numpy(state, image[None])
            row = {
                "id": rec.id,
                "split": rec.split,
                "labels": list(rec.labels),
                "predicted_class": names[int(scores[0].argmax())],
                "z": [float(v) for v in z[0]],
            }
            fh.write(json.dumps(row) + "\n")
            count += 1
    return count
