"""Command line entry point: ``asd synth|scan|train|fit-inlier|score|evaluate|ablate|pipeline|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ARMS, ConfigError, RunConfig, for_machine, load_config
from .dataset import CorpusError, Manifest, SynthSpec, generate_synthetic, scan_corpus
from .embed_export import export_embeddings
from .metrics import evaluate_scores, format_table
from .pipeline import (
    EmbeddingCache,
    FeatureStore,
    StageError,
    arm_dir,
    compute_norm_stats,
    fit_detector,
    load_detector,
    load_encoder,
    norm_stats_for,
    run_pipeline,
    score_with_detector,
    select_inlier_param,
    train_machine,
)
from .inlier import save_inlier
from .scoring import read_scores_csv, scores_to_csv

logger = logging.getLogger("asdkit")


def _run_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--machine", help="machine type (default: every type in the manifest)")
    p.add_argument("--desk", action="store_true", help="small encoder, 30 epochs, batch size <= 32")
    p.add_argument("--manifest")
    p.add_argument("--workdir")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", help="JSON synthetic corpus recipe (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("scan", help="build a manifest from a DCASE-style directory")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", default="dcase2021")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the embedding for each machine type")
    _run_options(p)

    p = sub.add_parser("fit-inlier", help="fit per-ID inlier models on trained embeddings")
    _run_options(p)

    p = sub.add_parser("score", help="write clip anomaly scores to CSV")
    _run_options(p)
    p.add_argument("--split", default="eval-test")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="AUC / pAUC report from score CSV files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--p", type=float, default=0.1)

    p = sub.add_parser("ablate", help="run one ablation arm (or all)")
    _run_options(p)
    p.add_argument("--arm", required=True, choices=list(ARMS) + ["all"])

    p = sub.add_parser("pipeline", help="train, fit inlier models, score and evaluate")
    _run_options(p)
    p.add_argument("--arms", default="full", help="comma-separated arms to run alongside (e.g. full,no_h)")

    p = sub.add_parser("export", help="dump per-segment embeddings to CSV")
    _run_options(p)
    p.add_argument("--split", nargs="+", default=["eval-test"])
    p.add_argument("--out", required=True)
    return parser


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed, "machine_type": args.machine, "manifest": args.manifest,
                 "workdir": args.workdir, "epochs": args.epochs}
    cfg = load_config(args.config, overrides, desk=args.desk)
    if not cfg.manifest:
        raise ConfigError("a manifest is required (--manifest or config key 'manifest')")
    return cfg


def _machines(cfg: RunConfig, manifest: Manifest) -> list[str]:
    if cfg.machine_type:
        if cfg.machine_type not in manifest.machine_types:
            raise ConfigError(f"machine type {cfg.machine_type!r} not in manifest")
        return [cfg.machine_type]
    return list(manifest.machine_types)


def _print_reports(reports: dict):
    print(format_table(reports))
    for name, rep in reports.items():
        if rep.provenance.get("machines"):
            chosen = {mt: m.get("p") for mt, m in rep.provenance["machines"].items()}
            print(f"[{name}] inlier parameter per machine: {json.dumps(chosen, sort_keys=True)}")


def cmd_synth(args) -> int:
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.records)} clips and {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_scan(args) -> int:
    manifest = scan_corpus(args.root, args.layout, seed=args.seed)
    manifest.save(args.out)
    print(f"wrote manifest with {len(manifest.records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    stats = compute_norm_stats(manifest, cfg.workdir)
    store = FeatureStore(manifest, stats)
    for mt in _machines(cfg, manifest):
        mcfg = for_machine(cfg, mt)
        enc = train_machine(mcfg, manifest, store, cfg.workdir)
        print(f"{mt}: best epoch {enc.best_epoch_} validation loss {enc.best_loss_:.6f}")
    return 0


def cmd_fit_inlier(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    store = FeatureStore(manifest, norm_stats_for(manifest, cfg.workdir))
    for mt in _machines(cfg, manifest):
        mcfg = for_machine(cfg, mt)
        enc, _ = load_encoder(cfg.workdir, "full", mt)
        cache = EmbeddingCache(enc, store, mcfg.n_segments, mcfg.segment_s)
        p, grid = select_inlier_param(mcfg, manifest, cache)
        det = fit_detector(mcfg, manifest, cache, p)
        out = arm_dir(cfg.workdir, "full", mt) / "inlier"
        for pid, model in sorted(det.models_.items()):
            save_inlier(model, out / f"id_{pid:02d}.bin")
        (out / "selection.json").write_text(json.dumps({"h": mcfg.h_type, "p": p, "grid": {str(k): v for k, v in grid.items()}},
                                                       indent=1, sort_keys=True) + "\n")
        print(f"{mt}: {mcfg.h_type} p={p} on {len(det.models_)} product IDs")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    store = FeatureStore(manifest, norm_stats_for(manifest, cfg.workdir))
    scores = []
    for mt in _machines(cfg, manifest):
        mcfg = for_machine(cfg, mt)
        enc, _ = load_encoder(cfg.workdir, "full", mt)
        cache = EmbeddingCache(enc, store, mcfg.n_segments, mcfg.segment_s)
        det = load_detector(cfg.workdir, "full", mt, mcfg, enc)
        scores += score_with_detector(det, manifest.select(machine_type=mt, split=args.split), cache)
    out = args.out or Path(cfg.workdir) / "full" / f"scores_{args.split}.csv"
    scores_to_csv(scores, out)
    print(f"wrote {len(scores)} clip scores to {out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = [r for path in args.scores for r in read_scores_csv(path)]
    report = evaluate_scores(rows, args.p, {"scores": [Path(s).name for s in args.scores]})
    if args.out:
        report.save(args.out)
        Path(args.out).with_suffix(".txt").write_text(format_table({"report": report}) + "\n\n" + report.cell_table() + "\n")
    print(format_table({"report": report}))
    print(report.cell_table())
    return 1 if report.has_nan() else 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    arms = list(ARMS) if args.arm == "all" else [args.arm]
    reports = run_pipeline(cfg, manifest, cfg.workdir, arms=arms, reuse_full=True)
    _print_reports(reports)
    return 1 if any(r.has_nan() for r in reports.values()) else 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = sorted(set(arms) - set(ARMS))
    if unknown:
        raise ConfigError(f"unknown arms {unknown}")
    reports = run_pipeline(cfg, manifest, cfg.workdir, arms=arms)
    _print_reports(reports)
    return 1 if any(r.has_nan() for r in reports.values()) else 0


def cmd_export(args) -> int:
    cfg = _config(args)
    manifest = Manifest.load(cfg.manifest)
    store = FeatureStore(manifest, norm_stats_for(manifest, cfg.workdir))
    out = Path(args.out)
    total = 0
    machines = _machines(cfg, manifest)
    for mt in machines:
        mcfg = for_machine(cfg, mt)
        enc, _ = load_encoder(cfg.workdir, "full", mt)
        cache = EmbeddingCache(enc, store, mcfg.n_segments, mcfg.segment_s)
        target = out if len(machines) == 1 else out.with_name(f"{out.stem}_{mt}{out.suffix}")
        # rows from every machine type, embedded by this machine type's encoder
        records = manifest.select(split=args.split)
        total += export_embeddings(records, cache, target)
        print(f"{mt}: wrote {target}")
    print(f"{total} rows")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "scan": cmd_scan,
    "train": cmd_train,
    "fit-inlier": cmd_fit_inlier,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CorpusError, StageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
