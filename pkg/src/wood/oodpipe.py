"""Hard-OoD collection pipeline: rank candidates by classifier score, prune
everything under 0.5, queue the rest for human review, assemble the hard-OoD
set from the review log, and model the annotation cost n/(1-r)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import net
from .imgio import load_image_unit
from .manifest import (
    SPLIT_OOD_CANDIDATE,
    SPLIT_OOD_HARD,
    Manifest,
    ManifestIntegrityError,
    SampleRecord,
)

SCORE_THRESHOLD = 0.5  # inclusive: a candidate scoring exactly 0.5 survives

VERDICT_BACKGROUND_ONLY = "background_only"
VERDICT_CONTAINS_FOREGROUND = "contains_foreground"
VERDICT_SKIP = "skip"
VERDICTS = (VERDICT_BACKGROUND_ONLY, VERDICT_CONTAINS_FOREGROUND, VERDICT_SKIP)


@dataclass(frozen=True)
class RankedCandidate:
    sample_id: str
    class_name: str
    score: float
    rank: int  # 1-based within class, descending score


@dataclass(frozen=True)
class ReviewDecision:
    sample_id: str
    class_name: str
    verdict: str
    annotator_id: str
    timestamp: float

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


def rank_candidates(
    state: net.ClassifierState,
    candidates: Sequence[SampleRecord],
    class_names: Sequence[str],
    base_dir: str | Path = ".",
    batch_size: int = 64,
) -> list[RankedCandidate]:
    """Score every candidate for every class and keep (image, class) pairs at
    or above the threshold, ranked per class by descending score (ties by id)."""
    for rec in candidates:
        if rec.split != SPLIT_OOD_CANDIDATE:
            raise ValueError(f"record {rec.id!r} has split {rec.split}, expected ood_candidate")
    if not candidates:
        return []
    base = Path(base_dir)
    scores = np.zeros((len(candidates), len(class_names)))
    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start : start + batch_size]
        images = np.stack([load_image_unit(base / rec.path) for rec in chunk])
        s, _ = net.forward_numpy(state, images)
        scores[start : start + len(chunk)] = s

    out: list[RankedCandidate] = []
    for c, name in enumerate(class_names):
        surviving = [
            (float(scores[i, c]), candidates[i].id)
            for i in range(len(candidates))
            if scores[i, c] >= SCORE_THRESHOLD
        ]
        surviving.sort(key=lambda t: (-t[0], t[1]))
        out.extend(
            RankedCandidate(sample_id=sid, class_name=name, score=score, rank=r)
            for r, (score, sid) in enumerate(surviving, start=1)
        )
    return out


def save_ranked(ranked: Iterable[RankedCandidate], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rc in ranked:
            fh.write(json.dumps(asdict(rc)) + "\n")


def load_ranked(path: str | Path) -> list[RankedCandidate]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(RankedCandidate(**obj))
    return out


def append_decision(path: str | Path, decision: ReviewDecision) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(decision)) + "\n")


def load_decisions(path: str | Path) -> list[ReviewDecision]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(ReviewDecision(**json.loads(line)))
    return out


def effective_verdicts(decisions: Sequence[ReviewDecision]) -> dict[tuple[str, str], str]:
    """Latest non-skip verdict per (sample, class); later log lines win ties so
    corrections posted after an undo supersede the original verdict."""
    best: dict[tuple[str, str], tuple[float, int, str]] = {}
    for i, d in enumerate(decisions):
        if d.verdict == VERDICT_SKIP:
            continue
        key = (d.sample_id, d.class_name)
        stamp = (d.timestamp, i)
        if key not in best or stamp >= best[key][:2]:
            best[key] = (d.timestamp, i, d.verdict)
    return {key: v for key, (_, _, v) in best.items()}


def assemble_hard_ood(
    ranked: Sequence[RankedCandidate],
    decisions: Sequence[ReviewDecision],
    manifest: Manifest,
) -> list[SampleRecord]:
    """Hard-OoD records: candidates judged background_only for at least one
    class and contains_foreground for none. A single foreground verdict
    disqualifies the image globally."""
    known = {rc.sample_id for rc in ranked}
    for d in decisions:
        if d.sample_id not in known:
            raise ManifestIntegrityError(
                f"decision references unknown candidate {d.sample_id!r}"
            )
    verdicts = effective_verdicts(decisions)
    keep: set[str] = set()
    reject: set[str] = set()
    for (sample_id, _), verdict in verdicts.items():
        if verdict == VERDICT_CONTAINS_FOREGROUND:
            reject.add(sample_id)
        elif verdict == VERDICT_BACKGROUND_ONLY:
            keep.add(sample_id)
    selected = sorted(keep - reject)
    records = []
    for sample_id in selected:
        rec = manifest.record(sample_id)
        records.append(
            SampleRecord(
                id=rec.id,
                path=rec.path,
                labels=tuple(0 for _ in rec.labels),
                split=SPLIT_OOD_HARD,
                gt_mask_path=rec.gt_mask_path,
            )
        )
    return records


def expected_reviews(n: float, r: float) -> float:
    """Average number of images a reviewer must check to collect n hard-OoD
    images from a pool with positive rate r."""
    if not 0.0 <= r < 1.0:
        raise ValueError("positive rate r must be in [0, 1)")
    if n < 0:
        raise ValueError("n must be >= 0")
    return n / (1.0 - r)


def simulate_review_burden(
    pool_is_positive: np.ndarray, n: int, rng: np.random.Generator
) -> int:
    """One trial: shuffle the pool, scan until n clean images are found,
    return how many images were checked. Raises if the pool cannot supply n."""
    order = rng.permutation(len(pool_is_positive))
    clean = 0
    for checked, idx in enumerate(order, start=1):
        if not pool_is_positive[idx]:
            clean += 1
            if clean == n:
                return checked
    raise ValueError(f"pool has only {clean} clean images, needed {n}")


def make_decision(
    sample_id: str,
    class_name: str,
    verdict: str,
    annotator_id: str = "anon",
    timestamp: float | None = None,
) -> ReviewDecision:
    return ReviewDecision(
        sample_id=sample_id,
        class_name=class_name,
        verdict=verdict,
        annotator_id=annotator_id,
        timestamp=time.time() if timestamp is None else timestamp,
    )
