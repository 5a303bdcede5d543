"""Command-line entry points.

Exit codes: 0 success, 2 config error (bad config file / bad flag values),
3 data error (missing or invalid manifests, images, checkpoints).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import net, oodpipe, runner, synthgen
from .clusters import ClusterError
from .config import ConfigError, parse_kv_file
from .localization import cam, save_maps, seed_from_map
from .imgio import load_image_unit, save_gray_u8
from .manifest import (
    SPLIT_OOD_CANDIDATE,
    Manifest,
    ManifestError,
    SampleRecord,
    load_manifest,
    save_manifest,
)


def _cmd_gen(args) -> int:
    spec = synthgen.GenSpec.from_kv(parse_kv_file(args.spec))
    manifest = synthgen.generate(spec, args.out)
    stats = synthgen.describe(manifest, base_dir=args.out)
    print(json.dumps(stats, indent=2))
    return 0


def _cmd_train(args) -> int:
    config = runner.ExperimentConfig.from_kv(parse_kv_file(args.config))
    _, report = runner.train(config, seed=args.seed)
    print(json.dumps({"metrics": report.metrics, "out_dir": config.out_dir}, indent=2))
    return 0


def _cmd_rank(args) -> int:
    state = net.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    candidates = manifest.by_split(SPLIT_OOD_CANDIDATE)
    ranked = oodpipe.rank_candidates(
        state, candidates, manifest.classes.names, Path(args.manifest).parent
    )
    oodpipe.save_ranked(ranked, args.out)
    print(f"{len(ranked)} ranked (image, class) pairs -> {args.out}")
    return 0


def _cmd_serve_review(args) -> int:
    from .reviewd import ReviewService, make_server

    ranked = oodpipe.load_ranked(args.candidates)
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    image_paths = {rec.id: base / rec.path for rec in manifest.records}
    service = ReviewService(
        ranked, image_paths, args.log, target=args.target
    )
    server = make_server(service, host=args.host, port=args.port, static_dir=args.static)
    host, port = server.server_address[:2]
    # flush so wrappers watching stdout see the bound port immediately
    print(f"review service on http://{host}:{port}/ (log: {args.log})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_build_hard_ood(args) -> int:
    import os

    ranked = oodpipe.load_ranked(args.ranked)
    decisions = oodpipe.load_decisions(args.log)
    manifest = load_manifest(args.manifest)
    records = oodpipe.assemble_hard_ood(ranked, decisions, manifest)
    # manifest paths are relative to the manifest file; re-anchor them to the
    # output location so the new manifest is usable from where it lives
    src_dir = Path(args.manifest).resolve().parent
    out_dir = Path(args.out).resolve().parent

    def rebase(p: str | None) -> str | None:
        if p is None or os.path.isabs(p):
            return p
        return os.path.relpath(src_dir / p, out_dir)

    records = [
        SampleRecord(
            id=rec.id,
            path=rebase(rec.path),
            labels=rec.labels,
            split=rec.split,
            gt_mask_path=rebase(rec.gt_mask_path),
        )
        for rec in records
    ]
    save_manifest(Manifest(classes=manifest.classes, records=tuple(records)), args.out)
    print(f"{len(records)} hard-OoD records -> {args.out}")
    return 0


def _cmd_cam(args) -> int:
    state = net.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_maps = 0
    for rec in manifest.by_split("in_dist"):
        image = load_image_unit(base / rec.path)
        loc = cam(state, image, rec.positive_classes(), image_id=rec.id)
        n_maps += len(save_maps(loc, manifest.classes.names, out_dir))
        if args.seeds:
            seed = seed_from_map(loc, args.theta)
            save_gray_u8(out_dir / f"{rec.id}.seed.png", seed.astype("uint8"))
    print(f"{n_maps} maps -> {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    state = net.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    metrics = runner.evaluate_on_manifest(
        state, manifest, Path(args.manifest).parent, args.theta
    )
    payload = metrics.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    config = runner.ExperimentConfig.from_kv(parse_kv_file(args.config))
    result = runner.ablate(config)
    print(result["table"])
    return 0


def _cmd_sweep(args) -> int:
    config = runner.ExperimentConfig.from_kv(parse_kv_file(args.config))
    if args.mode == "ood":
        result = runner.sweep_ood_count(config)
    else:
        result = runner.sweep_in_count(config)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_grid(args) -> int:
    config = runner.ExperimentConfig.from_kv(parse_kv_file(args.config))
    result = runner.grid_tau_lambda(config)
    print(result["table"])
    return 0


def _cmd_dump_features(args) -> int:
    state = net.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    count = runner.dump_features(state, manifest, Path(args.manifest).parent, args.out)
    print(f"{count} feature rows -> {args.out}")
    return 0


def _cmd_cost(args) -> int:
    print(f"{oodpipe.expected_reviews(args.n, args.r):g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wood",
        description="Hard-OoD curation and classifier training for localization seeds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a classifier from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rank", help="rank candidate OoD images by class score")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("serve-review", help="serve the human review queue")
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--candidates", required=True, help="ranked candidates JSONL")
    p.add_argument("--log", required=True, help="decision log path (append-only)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--static", default=None, help="directory with the UI bundle")
    p.add_argument("--target", type=int, default=None, help="hard-OoD count goal")
    p.set_defaults(func=_cmd_serve_review)

    p = sub.add_parser("build-hard-ood", help="assemble the hard-OoD manifest from reviews")
    p.add_argument("--ranked", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_hard_ood)

    p = sub.add_parser("cam", help="write localization maps (PFM) per labeled image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=0.25)
    p.add_argument("--seeds", action="store_true", help="also write thresholded seeds")
    p.set_defaults(func=_cmd_cam)

    p = sub.add_parser("eval", help="evaluate localization seeds against masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--theta", type=float, default=0.25)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the six loss-flag combinations")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="data-quantity sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("ood", "in"), default="ood")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("grid", help="tau x lambda grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("dump-features", help="dump penultimate features per sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_features)

    p = sub.add_parser("cost", help="expected review count n/(1-r)")
    p.add_argument("--n", type=float, required=True)
    p.add_argument("--r", type=float, required=True)
    p.set_defaults(func=_cmd_cost)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ManifestError, ClusterError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
