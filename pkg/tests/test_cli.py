import json

import pytest

from wood.cli import main
from wood.manifest import load_manifest


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "gen.cfg"
    spec.write_text(
        """
        classes = square:stripes, disk:checker
        image_size = 32
        n_in_per_class = 8
        n_ood_candidate = 6
        n_test_per_class = 2
        hard_fraction = 1.0
        contamination = 0.34
        rng_seed = 5
        """,
        encoding="utf-8",
    )
    data = root / "data"
    assert main(["gen", "--spec", str(spec), "--out", str(data)]) == 0
    return root


def train_config(workdir, name="train.cfg", extra=""):
    cfg = workdir / name
    cfg.write_text(
        f"""
        train_manifest = {workdir}/data/manifest.jsonl
        eval_manifest = {workdir}/data/test.jsonl
        out_dir = {workdir}/run
        channels = 4, 8
        epochs = 1
        batch_in = 8
        batch_ood = 4
        k = 2
        tau = 50
        {extra}
        """,
        encoding="utf-8",
    )
    return cfg


def test_gen_created_expected_tree(workdir):
    data = workdir / "data"
    assert (data / "manifest.jsonl").exists()
    assert (data / "test.jsonl").exists()
    manifest = load_manifest(data / "manifest.jsonl")
    assert len(manifest.by_split("in_dist")) == 16
    assert len(manifest.by_split("ood_candidate")) == 6


def test_train_rank_build_pipeline(workdir, capsys):
    cfg = train_config(workdir)
    assert main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()

    ckpt = workdir / "run" / "checkpoint.bin"
    ranked_path = workdir / "ranked.jsonl"
    assert main([
        "rank", "--ckpt", str(ckpt),
        "--manifest", str(workdir / "data" / "manifest.jsonl"),
        "--out", str(ranked_path),
    ]) == 0
    capsys.readouterr()

    # scripted decisions: everything background_only
    from wood.oodpipe import load_ranked, make_decision, append_decision

    log = workdir / "decisions.jsonl"
    seen = set()
    for i, rc in enumerate(load_ranked(ranked_path)):
        if rc.sample_id not in seen:
            seen.add(rc.sample_id)
            append_decision(log, make_decision(
                rc.sample_id, rc.class_name, "background_only", timestamp=float(i)))

    hard = workdir / "hard.jsonl"
    assert main([
        "build-hard-ood", "--ranked", str(ranked_path), "--log", str(log),
        "--manifest", str(workdir / "data" / "manifest.jsonl"),
        "--out", str(hard),
    ]) == 0
    out = capsys.readouterr().out
    assert "hard-OoD records" in out
    manifest = load_manifest(hard)
    assert all(r.split == "ood_hard" for r in manifest.records)
    assert {r.id for r in manifest.records} == seen


def test_eval_and_cam_and_dump(workdir, capsys):
    ckpt = workdir / "run" / "checkpoint.bin"
    metrics_path = workdir / "metrics.json"
    assert main([
        "eval", "--ckpt", str(ckpt),
        "--manifest", str(workdir / "data" / "test.jsonl"),
        "--out", str(metrics_path),
    ]) == 0
    capsys.readouterr()
    payload = json.loads(metrics_path.read_text())
    assert "miou" in payload

    maps_dir = workdir / "maps"
    assert main([
        "cam", "--ckpt", str(ckpt),
        "--manifest", str(workdir / "data" / "test.jsonl"),
        "--out", str(maps_dir), "--seeds",
    ]) == 0
    capsys.readouterr()
    assert list(maps_dir.glob("*.pfm"))
    assert list(maps_dir.glob("*.seed.png"))

    feats = workdir / "features.jsonl"
    assert main([
        "dump-features", "--ckpt", str(ckpt),
        "--manifest", str(workdir / "data" / "test.jsonl"),
        "--out", str(feats),
    ]) == 0
    capsys.readouterr()
    assert feats.exists()


def test_cost_command(capsys):
    assert main(["cost", "--n", "100", "--r", "0.2"]) == 0
    assert capsys.readouterr().out.strip() == "125"


def test_cost_bad_rate_is_data_error(capsys):
    assert main(["cost", "--n", "10", "--r", "1.0"]) == 3
    assert "data error" in capsys.readouterr().err


def test_config_error_exit_code(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense without equals\n", encoding="utf-8")
    assert main(["train", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_manifest_is_data_error(workdir, tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        f"train_manifest = {tmp_path}/ghost.jsonl\nout_dir = {tmp_path}/o\n",
        encoding="utf-8",
    )
    assert main(["train", "--config", str(cfg)]) == 3
    assert "data error" in capsys.readouterr().err
