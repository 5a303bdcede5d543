"""Cluster sets over penultimate features.

Two flavors drive the distance loss: per-class means of in-distribution
features (one cluster per class, multi-label samples contribute to every
positive class) and K-means clusters of the hard-OoD features. A third,
grouping OoD features by their falsely predicted class, exists for the
clustering-method comparison.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imgio import pack_tensor, unpack_tensors

KIND_IN_CLASS_MEANS = "in_dist_class_means"
KIND_OOD_KMEANS = "ood_kmeans"
KIND_OOD_PREDICTED = "ood_predicted_class"


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSet:
    kind: str
    centers: np.ndarray  # (K, d)
    sizes: tuple[int, ...]
    # for class-derived kinds: which class index each cluster came from;
    # classes with no members are simply absent
    class_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.centers.ndim != 2:
            raise ClusterError(f"centers must be (K, d), got {self.centers.shape}")
        if len(self.sizes) != self.centers.shape[0]:
            raise ClusterError("sizes do not match number of centers")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def build_in_clusters(
    features: np.ndarray,
    labels: np.ndarray,
    class_names: Sequence[str] | None = None,
) -> ClusterSet:
    """Per-class mean features; cluster c averages every sample with y_c = 1."""
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    if feats.ndim != 2 or labs.ndim != 2 or feats.shape[0] != labs.shape[0]:
        raise ClusterError(
            f"expected (N, d) features and (N, C) labels, got {feats.shape} / {labs.shape}"
        )
    n_classes = labs.shape[1]
    centers = np.zeros((n_classes, feats.shape[1]))
    sizes = []
    for c in range(n_classes):
        members = feats[labs[:, c] == 1]
        if members.shape[0] == 0:
            name = class_names[c] if class_names is not None else f"#{c}"
            raise ClusterError(f"class {name} has no positive samples")
        centers[c] = members.mean(axis=0)
        sizes.append(members.shape[0])
    return ClusterSet(
        kind=KIND_IN_CLASS_MEANS,
        centers=centers,
        sizes=tuple(sizes),
        class_ids=tuple(range(n_classes)),
    )


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    inertia_history: tuple[float, ...]  # one entry per Lloyd iteration
    n_iter: int


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (N, K) squared Euclidean distances
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: sample proportional to squared distance to the
    nearest already-chosen center."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest_sq = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            centers[j] = points[int(rng.integers(n))]
            continue
        probs = closest_sq / total
        idx = int(rng.choice(n, p=probs))
        centers[j] = points[idx]
        closest_sq = np.minimum(closest_sq, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def lloyd_kmeans(
    points: np.ndarray,
    k: int,
    rng_seed: int,
    max_iter: int = 100,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Runs to an assignment fixpoint or max_iter. Empty clusters are re-seeded
    to the point farthest from its assigned center. Inertia (sum of squared
    distances to assigned centers) is recorded once per iteration and is
    non-increasing.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ClusterError(f"expected (N, d) points, got {pts.shape}")
    n = pts.shape[0]
    if n < k:
        raise ClusterError(
            f"{n} feature(s) cannot form {k} clusters; choose k <= {n}"
        )
    rng = np.random.default_rng(rng_seed)
    centers = kmeans_pp_init(pts, k, rng)
    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for it in range(max_iter):
        sq = _sq_distances(pts, centers)
        new_assignment = sq.argmin(axis=1)

        # farthest-point repair, one empty cluster at a time
        for j in range(k):
            if not (new_assignment == j).any():
                dist_own = sq[np.arange(n), new_assignment]
                far = int(dist_own.argmax())
                centers[j] = pts[far]
                sq[:, j] = ((pts - centers[j]) ** 2).sum(axis=1)
                new_assignment = sq.argmin(axis=1)

        for j in range(k):
            members = pts[new_assignment == j]
            if members.shape[0]:  # duplicates can defeat the repair; keep center
                centers[j] = members.mean(axis=0)

        inertia = float(
            ((pts - centers[new_assignment]) ** 2).sum()
        )
        history.append(inertia)
        if (new_assignment == assignment).all():
            assignment = new_assignment
            break
        assignment = new_assignment
    return KMeansResult(
        centers=centers,
        assignment=assignment,
        inertia_history=tuple(history),
        n_iter=len(history),
    )


def build_ood_clusters_kmeans(
    features: np.ndarray, k: int, rng_seed: int
) -> ClusterSet:
    result = lloyd_kmeans(features, k, rng_seed)
    sizes = tuple(int((result.assignment == j).sum()) for j in range(k))
    return ClusterSet(kind=KIND_OOD_KMEANS, centers=result.centers, sizes=sizes)


def build_ood_clusters_by_predicted_class(
    features: np.ndarray, predicted: np.ndarray, n_classes: int
) -> ClusterSet:
    """One cluster per falsely-predicted class; classes with no members are
    skipped and recorded by their absence from class_ids."""
    feats = np.asarray(features, dtype=np.float64)
    pred = np.asarray(predicted, dtype=np.int64)
    if feats.shape[0] != pred.shape[0]:
        raise ClusterError("features and predictions differ in length")
    centers = []
    sizes = []
    class_ids = []
    for c in range(n_classes):
        members = feats[pred == c]
        if members.shape[0] == 0:
            continue
        centers.append(members.mean(axis=0))
        sizes.append(members.shape[0])
        class_ids.append(c)
    if centers:
        center_arr = np.stack(centers)
    else:
        d = feats.shape[1] if feats.ndim == 2 else 0
        center_arr = np.zeros((0, d))
    return ClusterSet(
        kind=KIND_OOD_PREDICTED,
        centers=center_arr,
        sizes=tuple(sizes),
        class_ids=tuple(class_ids),
    )


def recompute_center_oracle(features: np.ndarray, member_idx: np.ndarray) -> np.ndarray:
    """Brute-force re-averaging used by tests to verify the center identity."""
    total = np.zeros(features.shape[1], dtype=np.float64)
    count = 0
    for i in member_idx:
        total += features[i]
        count += 1
    return total / count


_MAGIC = b"WOODCLU1"


def save_cluster_set(cs: ClusterSet, path: str | Path) -> None:
    """Same binary tensor container as checkpoints, plus a JSON sidecar."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(pack_tensor("centers", cs.centers))
    sidecar = {
        "kind": cs.kind,
        "k": cs.k,
        "sizes": list(cs.sizes),
        "class_ids": list(cs.class_ids) if cs.class_ids is not None else None,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2), encoding="utf-8"
    )


def load_cluster_set(path: str | Path) -> ClusterSet:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != _MAGIC:
        raise ClusterError(f"{path}: not a cluster-set file")
    tensors = unpack_tensors(blob[12:], 1)
    sidecar = json.loads(
        path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8")
    )
    centers = tensors[0][1].astype(np.float64)
    return ClusterSet(
        kind=sidecar["kind"],
        centers=centers,
        sizes=tuple(sidecar["sizes"]),
        class_ids=tuple(sidecar["class_ids"]) if sidecar["class_ids"] is not None else None,
    )
