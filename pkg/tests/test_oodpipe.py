import numpy as np
import pytest

import wood.oodpipe as oodpipe
from wood.manifest import (
    ClassList,
    Manifest,
    ManifestIntegrityError,
    SampleRecord,
)
from wood.oodpipe import (
    RankedCandidate,
    ReviewDecision,
    assemble_hard_ood,
    effective_verdicts,
    expected_reviews,
    load_decisions,
    load_ranked,
    make_decision,
    rank_candidates,
    save_ranked,
    simulate_review_burden,
)


def candidate(i):
    return SampleRecord(
        id=f"cand_{i:02d}", path=f"images/cand_{i:02d}.png",
        labels=(0, 0), split="ood_candidate",
    )


def patch_scores(monkeypatch, score_matrix):
    """Make ranking see a fixed score matrix instead of running the net."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    calls = {"next": 0}

    monkeypatch.setattr(oodpipe, "load_image_unit", lambda path: np.zeros((4, 4)))

    def fake_forward(state, images):
        start = calls["next"]
        calls["next"] += len(images)
        return scores[start : start + len(images)], np.zeros((len(images), 2))

    monkeypatch.setattr(oodpipe.net, "forward_numpy", fake_forward)


def test_rank_prunes_below_half(monkeypatch):
    cands = [candidate(i) for i in range(4)]
    patch_scores(monkeypatch, [[0.9, 0.1], [0.6, 0.1], [0.4, 0.1], [0.2, 0.1]])
    ranked = rank_candidates(None, cands, ["square", "disk"])
    assert [(rc.sample_id, rc.rank, rc.score) for rc in ranked] == [
        ("cand_00", 1, 0.9),
        ("cand_01", 2, 0.6),
    ]


def test_rank_threshold_inclusive_at_half(monkeypatch):
    cands = [candidate(0)]
    patch_scores(monkeypatch, [[0.5, 0.4999999]])
    ranked = rank_candidates(None, cands, ["square", "disk"])
    assert [(rc.class_name, rc.score) for rc in ranked] == [("square", 0.5)]


def test_rank_all_below_half_empty(monkeypatch):
    cands = [candidate(i) for i in range(3)]
    patch_scores(monkeypatch, [[0.1, 0.2]] * 3)
    assert rank_candidates(None, cands, ["square", "disk"]) == []


def test_rank_image_appears_once_per_qualifying_class(monkeypatch):
    matrix = [[0.8, 0.7], [0.6, 0.3], [0.3, 0.9]]
    cands = [candidate(i) for i in range(3)]
    patch_scores(monkeypatch, matrix)
    ranked = rank_candidates(None, cands, ["square", "disk"])
    # oracle: scan the matrix directly
    expected = []
    for c, name in enumerate(["square", "disk"]):
        rows = sorted(
            ((matrix[i][c], cands[i].id) for i in range(3) if matrix[i][c] >= 0.5),
            key=lambda t: (-t[0], t[1]),
        )
        expected.extend((sid, name, r + 1) for r, (_, sid) in enumerate(rows))
    assert [(rc.sample_id, rc.class_name, rc.rank) for rc in ranked] == expected


def test_rank_ties_broken_by_sample_id(monkeypatch):
    cands = [candidate(i) for i in range(3)]
    patch_scores(monkeypatch, [[0.7, 0.0], [0.7, 0.0], [0.7, 0.0]])
    ranked = rank_candidates(None, cands, ["square", "disk"])
    assert [rc.sample_id for rc in ranked] == ["cand_00", "cand_01", "cand_02"]


def test_rank_rejects_wrong_split():
    rec = SampleRecord(id="x", path="x.png", labels=(1, 0), split="in_dist")
    with pytest.raises(ValueError):
        rank_candidates(None, [rec], ["square", "disk"])


def test_rank_empty_candidates_ok():
    assert rank_candidates(None, [], ["square"]) == []


def test_ranked_round_trip(tmp_path):
    ranked = [
        RankedCandidate("a", "square", 0.75, 1),
        RankedCandidate("b", "square", 0.6, 2),
    ]
    p = tmp_path / "ranked.jsonl"
    save_ranked(ranked, p)
    assert load_ranked(p) == ranked


# ----------------------------------------------------------------- assembly

def manifest_with_candidates(n):
    recs = tuple(candidate(i) for i in range(n))
    return Manifest(classes=ClassList(("square", "disk")), records=recs)


def ranked_for(ids, class_name="square"):
    return [
        RankedCandidate(sid, class_name, 0.9 - 0.01 * i, i + 1)
        for i, sid in enumerate(ids)
    ]


def test_assemble_basic_verdicts():
    m = manifest_with_candidates(3)
    ranked = ranked_for(["cand_00", "cand_01", "cand_02"])
    decisions = [
        make_decision("cand_00", "square", "background_only", timestamp=1.0),
        make_decision("cand_01", "square", "contains_foreground", timestamp=2.0),
        make_decision("cand_02", "square", "skip", timestamp=3.0),
    ]
    records = assemble_hard_ood(ranked, decisions, m)
    assert [r.id for r in records] == ["cand_00"]
    assert records[0].split == "ood_hard"
    assert records[0].labels == (0, 0)


def test_assemble_foreground_for_any_class_disqualifies():
    m = manifest_with_candidates(1)
    ranked = ranked_for(["cand_00"], "square") + ranked_for(["cand_00"], "disk")
    decisions = [
        make_decision("cand_00", "square", "background_only", timestamp=1.0),
        make_decision("cand_00", "disk", "contains_foreground", timestamp=2.0),
    ]
    assert assemble_hard_ood(ranked, decisions, m) == []


def test_assemble_unknown_sample_rejected():
    m = manifest_with_candidates(1)
    ranked = ranked_for(["cand_00"])
    decisions = [make_decision("ghost", "square", "background_only", timestamp=1.0)]
    with pytest.raises(ManifestIntegrityError):
        assemble_hard_ood(ranked, decisions, m)


def test_assemble_counts_background_only(tmp_path):
    m = manifest_with_candidates(10)
    ids = [f"cand_{i:02d}" for i in range(10)]
    ranked = ranked_for(ids)
    decisions = [
        make_decision(sid, "square",
                      "background_only" if i % 3 else "contains_foreground",
                      timestamp=float(i))
        for i, sid in enumerate(ids)
    ]
    k = sum(1 for i in range(10) if i % 3)
    records = assemble_hard_ood(ranked, decisions, m)
    assert len(records) == k


def test_supersession_latest_timestamp_wins():
    decisions = [
        make_decision("a", "square", "background_only", timestamp=1.0),
        make_decision("a", "square", "contains_foreground", timestamp=2.0),
    ]
    assert effective_verdicts(decisions)[("a", "square")] == "contains_foreground"
    # equal timestamps: later log line wins
    decisions = [
        make_decision("a", "square", "contains_foreground", timestamp=5.0),
        make_decision("a", "square", "background_only", timestamp=5.0),
    ]
    assert effective_verdicts(decisions)[("a", "square")] == "background_only"


def test_skip_never_overrides():
    decisions = [
        make_decision("a", "square", "background_only", timestamp=1.0),
        make_decision("a", "square", "skip", timestamp=9.0),
    ]
    assert effective_verdicts(decisions)[("a", "square")] == "background_only"


def test_decision_log_round_trip(tmp_path):
    p = tmp_path / "log.jsonl"
    d1 = make_decision("a", "square", "background_only", "alice", timestamp=1.5)
    d2 = make_decision("b", "square", "skip", "bob", timestamp=2.5)
    oodpipe.append_decision(p, d1)
    oodpipe.append_decision(p, d2)
    assert load_decisions(p) == [d1, d2]


def test_decision_rejects_bad_verdict():
    with pytest.raises(ValueError):
        ReviewDecision("a", "square", "maybe", "alice", 1.0)


# ---------------------------------------------------------------- cost model

def test_expected_reviews_paper_value():
    assert expected_reviews(100, 0.2) == pytest.approx(125.0)


def test_expected_reviews_edges():
    assert expected_reviews(7, 0.0) == 7.0
    assert expected_reviews(0, 0.9) == 0.0
    with pytest.raises(ValueError):
        expected_reviews(10, 1.0)
    with pytest.raises(ValueError):
        expected_reviews(-1, 0.2)


def test_review_burden_simulation_converges():
    rng = np.random.default_rng(42)
    pool = np.zeros(1000, dtype=bool)
    pool[:200] = True  # r = 0.2 exactly
    trials = [simulate_review_burden(pool, 100, rng) for _ in range(2000)]
    assert np.mean(trials) == pytest.approx(expected_reviews(100, 0.2), rel=0.05)
