"""Training losses: cluster-distance repulsion/attraction plus multi-label BCE.

The distance loss pulls an in-distribution feature toward its class-mean
cluster(s) and pushes it away from the nearest hard-OoD clusters (the top
tau percent by Euclidean distance, selected per sample). Cluster centers are
constants: no gradient flows into them, and the selected index set is frozen
per sample before differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .clusters import KIND_IN_CLASS_MEANS, ClusterSet

# scores are clipped to [EPS, 1-EPS] before the log; BCE is undefined at 0/1
SCORE_EPS = 1e-7

_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


@dataclass(frozen=True)
class Hyperparams:
    """Loss balance lam, nearest-cluster percentage tau, OoD cluster count k,
    and the cluster refresh cadence (0 = once per epoch)."""

    lam: float = 0.007
    tau: float = 20.0
    k: int = 50
    refresh_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 < self.tau <= 100.0:
            raise ValueError("tau must be in (0, 100]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class LossFlags:
    """Which loss terms are active, per data source (the ablation axes)."""

    cls_on_in: bool = True
    cls_on_ood: bool = False
    d_on_in: bool = False
    d_on_ood: bool = False
    # naive alternative kept only for ablation: BCE the OoD batch against a
    # uniform 1/|C| target instead of the zero vector
    uniform_ood_labels: bool = False

    def needs_ood_data(self) -> bool:
        return self.cls_on_ood or self.d_on_ood

    def needs_distance(self) -> bool:
        return self.d_on_in or self.d_on_ood


def baseline_flags() -> LossFlags:
    return LossFlags()


def full_flags() -> LossFlags:
    return LossFlags(cls_on_in=True, cls_on_ood=True, d_on_in=True, d_on_ood=True)


# Table rows (a)-(f): which loss/data combinations each ablation enables.
ABLATION_ROWS: dict[str, LossFlags] = {
    "a": LossFlags(),
    "b": LossFlags(cls_on_ood=True),
    "c": LossFlags(d_on_in=True, d_on_ood=True),
    "d": LossFlags(cls_on_ood=True, d_on_in=True),
    "e": LossFlags(cls_on_ood=True, d_on_ood=True),
    "f": full_flags(),
}


def distance(z, center) -> float:
    """Euclidean distance between a feature and a cluster center."""
    zv = np.asarray(z, dtype=np.float64)
    cv = np.asarray(center, dtype=np.float64)
    if zv.shape != cv.shape:
        raise ValueError(f"dimension mismatch: {zv.shape} vs {cv.shape}")
    return float(np.linalg.norm(zv - cv))


def nearest_count(tau: float, k: int) -> int:
    """|K| = max(1, floor(tau% of k)); floor+clamp keeps the set non-empty."""
    if not 0.0 < tau <= 100.0:
        raise ValueError("tau must be in (0, 100]")
    return max(1, int(math.floor(tau * k / 100.0)))


def select_nearest_ood(z, ood: ClusterSet, tau: float) -> np.ndarray:
    """Indices of the top-tau% closest OoD clusters, nearest first; ties go to
    the lower cluster index."""
    if ood.k == 0:
        raise ValueError("empty cluster set")
    zv = np.asarray(
        z.detach().numpy() if torch.is_tensor(z) else z, dtype=np.float64
    )
    dists = np.linalg.norm(ood.centers - zv[None, :], axis=1)
    order = np.argsort(dists, kind="stable")
    return order[: nearest_count(tau, ood.k)]


def _as_float_tensor(value) -> torch.Tensor:
    """Tensors keep their dtype (training runs in float32); everything else
    becomes float64 so worked-example arithmetic is exact."""
    if torch.is_tensor(value):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def _safe_norm(diff: torch.Tensor) -> torch.Tensor:
    # Euclidean norm with gradient defined as 0 at the d=0 singularity
    sq = (diff * diff).sum()
    return torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=1e-300)), sq * 0.0)


def loss_d(
    z_in,
    y,
    pin: ClusterSet | None,
    pood: ClusterSet | None,
    tau: float,
    attract: bool = True,
    repel: bool = True,
    selected: np.ndarray | None = None,
) -> torch.Tensor:
    """Distance loss for one in-distribution sample (differentiable in z_in).

    attraction: sum of distances to the class-mean clusters of the positive
    labels; repulsion: minus the sum of distances to the selected nearest
    OoD clusters. Either term can be disabled for ablations. The selection is
    a constant for differentiation; callers re-evaluating the loss under
    parameter perturbations pass the frozen index set via `selected`.
    """
    z = _as_float_tensor(z_in)
    yv = np.asarray(y)
    if not yv.any():
        raise ValueError("distance loss is defined only for labeled in-distribution samples")
    total = z.sum() * 0.0  # scalar on the same graph/dtype
    if attract:
        if pin is None:
            raise ValueError("attraction term requires in-distribution clusters")
        if pin.kind != KIND_IN_CLASS_MEANS:
            raise ValueError(f"expected {KIND_IN_CLASS_MEANS} clusters, got {pin.kind}")
        for c in np.flatnonzero(yv):
            center = torch.as_tensor(pin.centers[c], dtype=z.dtype)
            total = total + _safe_norm(z - center)
    if repel:
        if pood is None or pood.k == 0:
            raise ValueError("repulsion term requires OoD clusters")
        if selected is None:
            selected = select_nearest_ood(z, pood, tau)
        for k in selected:
            center = torch.as_tensor(pood.centers[k], dtype=z.dtype)
            total = total - _safe_norm(z - center)
    return total


def _bce(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    global _clamp_events
    out_of_range = int((scores < SCORE_EPS).sum() + (scores > 1.0 - SCORE_EPS).sum())
    if out_of_range:
        _clamp_events += out_of_range
    p = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))


def loss_cls(
    scores_in,
    y,
    scores_ood=None,
    uniform_ood_labels: bool = False,
) -> torch.Tensor:
    """Multi-label BCE, averaged over classes: in-distribution scores against
    the label vector plus OoD scores against the zero vector. Batched inputs
    average each term over its own batch; an absent side is omitted."""
    total = None
    n_classes = None
    if scores_in is not None:
        s = _as_float_tensor(scores_in)
        t = torch.as_tensor(np.asarray(y), dtype=s.dtype)
        if s.shape != t.shape:
            raise ValueError(f"scores/labels shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
        n_classes = s.shape[-1]
        bce = _bce(s, t)
        term = bce.mean(dim=0).sum() if bce.dim() == 2 else bce.sum()
        total = term
    if scores_ood is not None:
        s = _as_float_tensor(scores_ood)
        if n_classes is None:
            n_classes = s.shape[-1]
        elif s.shape[-1] != n_classes:
            raise ValueError("in/ood score vectors disagree on class count")
        fill = 1.0 / n_classes if uniform_ood_labels else 0.0
        t = torch.full_like(s, fill)
        bce = _bce(s, t)
        term = bce.mean(dim=0).sum() if bce.dim() == 2 else bce.sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("at least one of scores_in / scores_ood is required")
    return total / n_classes


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch values of each term (floats, for reports and ablation checks)."""

    total: float
    cls: float
    dist: float


def _as_2d(t: torch.Tensor) -> torch.Tensor:
    return t if t.dim() == 2 else t.unsqueeze(0)


def total_loss_tensor(
    state,
    images_in,
    y_in,
    images_ood,
    pin: ClusterSet | None,
    pood: ClusterSet | None,
    hp: Hyperparams,
    flags: LossFlags,
    frozen_selection: list[np.ndarray] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L, L_cls, L_d) tensors for one batch pair; L = L_cls + lam * L_d.

    The distance loss is averaged over the in-distribution batch so lam keeps
    its meaning independent of batch size. The OoD images are only run through
    the network when the classification term needs their scores; the repulsion
    term reads precomputed cluster centers instead. frozen_selection pins the
    per-sample nearest-cluster index sets (see loss_d).
    """
    from .net import forward  # deferred: net imports nothing from here

    y = np.asarray(y_in)
    if y.ndim == 1:
        y = y[None, :]
    if len(y) == 0:
        raise ValueError("in-distribution batch must be non-empty")

    res_in = forward(state, images_in)
    scores_in = _as_2d(res_in.scores)
    z_in = _as_2d(res_in.z)
    if scores_in.shape[0] != y.shape[0]:
        raise ValueError("in-batch images and labels differ in length")
    dtype = scores_in.dtype
    zero = torch.zeros((), dtype=dtype)

    scores_ood = None
    if flags.cls_on_ood:
        if images_ood is None or len(images_ood) == 0:
            raise ValueError("cls_on_ood is set but the OoD batch is empty")
        scores_ood = _as_2d(forward(state, images_ood).scores)

    if flags.cls_on_in or flags.cls_on_ood:
        cls_term = loss_cls(
            scores_in if flags.cls_on_in else None,
            y if flags.cls_on_in else None,
            scores_ood,
            uniform_ood_labels=flags.uniform_ood_labels,
        )
    else:
        cls_term = zero

    if flags.needs_distance():
        per_sample = [
            loss_d(
                z_in[i],
                y[i],
                pin if flags.d_on_in else None,
                pood if flags.d_on_ood else None,
                hp.tau,
                attract=flags.d_on_in,
                repel=flags.d_on_ood,
                selected=frozen_selection[i] if frozen_selection is not None else None,
            )
            for i in range(z_in.shape[0])
        ]
        dist_term = torch.stack(per_sample).mean()
    else:
        dist_term = zero

    total = cls_term + hp.lam * dist_term
    return total, cls_term, dist_term


def total_loss(
    state,
    images_in,
    y_in,
    images_ood,
    pin: ClusterSet | None,
    pood: ClusterSet | None,
    hp: Hyperparams,
    flags: LossFlags | None = None,
):
    """Scalar loss value plus a closure that rebuilds it for gradient work.

    The per-sample nearest-cluster selection is made once, here, and reused on
    every closure call, so the closure stays a smooth function of the
    parameters under finite-difference probing.
    """
    if flags is None:
        flags = full_flags()

    frozen = None
    if flags.d_on_ood:
        from .net import forward  # deferred: net imports nothing from here

        if pood is None or pood.k == 0:
            raise ValueError("d_on_ood requires OoD clusters")
        with torch.no_grad():
            z = _as_2d(forward(state, images_in).z)
        frozen = [select_nearest_ood(z[i], pood, hp.tau) for i in range(z.shape[0])]

    def closure() -> torch.Tensor:
        total, _, _ = total_loss_tensor(
            state, images_in, y_in, images_ood, pin, pood, hp, flags,
            frozen_selection=frozen,
        )
        return total

    return float(closure().detach()), closure


def loss_breakdown(
    state, images_in, y_in, images_ood, pin, pood, hp, flags
) -> LossBreakdown:
    with torch.no_grad():
        total, cls_term, dist_term = total_loss_tensor(
            state, images_in, y_in, images_ood, pin, pood, hp, flags
        )
    return LossBreakdown(
        total=float(total), cls=float(cls_term), dist=float(dist_term)
    )
