"""File-backed pipeline stages: train, fit inlier models, score, evaluate, ablate."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, for_machine
from .dataset import ClipRecord, Manifest, num_workers, read_wav
from .features import MelConfig, NormStats, fit_norm_stats, load_norm_stats, logmel, save_norm_stats, segment_stack
from .inlier import load_inlier, save_inlier
from .metrics import EvalReport, evaluate_scores, format_table
from .nnet import load_checkpoint, save_checkpoint
from .scoring import ClipScore, SerialDetector, aggregate, no_h_segment_scores, scores_to_csv
from .training import OEEncoder

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


class FeatureStore:
    """Whole-clip log-mels for manifest records, normalized with their own machine type's statistics."""

    def __init__(self, manifest: Manifest, norm_stats: dict, mel: MelConfig = MelConfig()):
        self.manifest = manifest
        self.norm_stats = norm_stats
        self.mel = mel
        self._cache: dict[str, np.ndarray] = {}

    def _compute(self, record: ClipRecord) -> np.ndarray:
        wav, rate = read_wav(self.manifest.resolve(record))
        if rate != self.mel.sample_rate_hz:
            raise ValueError(f"{record.path}: sample rate {rate} != {self.mel.sample_rate_hz}")
        return logmel(wav, self.mel, self.norm_stats[record.machine_type]).astype(np.float32)

    def get(self, records) -> list[np.ndarray]:
        missing = [r for r in records if r.clip_id not in self._cache]
        if missing:
            with ThreadPoolExecutor(max_workers=num_workers()) as pool:
                for r, m in zip(missing, pool.map(self._compute, missing)):
                    self._cache[r.clip_id] = m
        return [self._cache[r.clip_id] for r in records]


def compute_norm_stats(manifest: Manifest, workdir=None) -> dict:
    stats = {mt: fit_norm_stats(manifest, mt) for mt in manifest.machine_types}
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        save_norm_stats(stats, Path(workdir) / "norm_stats.json")
    return stats


def norm_stats_for(manifest: Manifest, workdir) -> dict:
    path = Path(workdir) / "norm_stats.json"
    if path.exists():
        return load_norm_stats(path)
    return compute_norm_stats(manifest, workdir)


def _write_rows(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def arm_dir(workdir, arm: str, machine_type: str) -> Path:
    return Path(workdir) / arm / machine_type


# ---------------------------------------------------------------------------
# Stages


def train_machine(cfg: RunConfig, manifest: Manifest, store: FeatureStore, workdir, arm: str = "full") -> OEEncoder:
    """Train the embedding for ``cfg.machine_type`` and save its best checkpoint."""
    train = manifest.select(split="train")
    val = manifest.select(split="train-val")
    enc = OEEncoder(
        target=cfg.machine_type, n_ids=manifest.ids_per_type, lr=cfg.lr, batch_size=cfg.batch_size, lam=cfg.lam,
        epochs=cfg.epochs, use_mixup=cfg.use_mixup, mixup_alpha=cfg.mixup_alpha, loss_arm=cfg.loss_arm,
        conv_blocks=tuple(tuple(b) for b in cfg.conv_blocks), head_hidden=cfg.head_hidden,
        activation=cfg.activation, weight_decay=cfg.weight_decay, segment_s=cfg.segment_s, seed=cfg.seed,
    )
    enc.fit(
        store.get(train), [r.machine_type for r in train], [r.product_id for r in train],
        val_clips=store.get(val) if val else None,
        val_machine_types=[r.machine_type for r in val], val_product_ids=[r.product_id for r in val],
    )
    out = arm_dir(workdir, arm, cfg.machine_type)
    meta = {
        "epoch": enc.best_epoch_,
        "val_loss": enc.best_loss_,
        "machine_type": cfg.machine_type,
        "norm_stats": store.norm_stats[cfg.machine_type].to_dict(),
        "run_config": cfg.to_dict(with_paths=False),
        "run_config_hash": cfg.hash(),
    }
    save_checkpoint(out / "checkpoint.bin", enc.network_, enc.optim_, meta)
    _write_rows(out / "train_log.csv", enc.history_)
    _write_rows(out / "epochs.csv", enc.epoch_log_)
    return enc


def load_encoder(workdir, arm: str, machine_type: str) -> tuple[OEEncoder, dict]:
    net, header = load_checkpoint(arm_dir(workdir, arm, machine_type) / "checkpoint.bin")
    seg_s = header["meta"].get("run_config", {}).get("segment_s", 2.0)
    enc = OEEncoder.from_network(net, target=machine_type, segment_s=seg_s)
    enc.best_epoch_ = header["meta"].get("epoch")
    enc.best_loss_ = header["meta"].get("val_loss")
    return enc, header


class EmbeddingCache:
    """Segment embeddings and product-ID probabilities per clip for one trained encoder."""

    def __init__(self, encoder: OEEncoder, store: FeatureStore, n_segments: int, segment_s: float):
        self.encoder = encoder
        self.store = store
        self.n_segments = n_segments
        self.segment_s = segment_s
        self._emb: dict[str, np.ndarray] = {}
        self._prob: dict[str, np.ndarray] = {}

    def _fill(self, records):
        missing = [r for r in records if r.clip_id not in self._emb]
        if not missing:
            return
        mels = self.store.get(missing)
        mel = replace(self.store.mel, segment_s=self.segment_s)
        segs = np.concatenate([segment_stack(m, self.n_segments, self.segment_s, mel) for m in mels])
        emb, prob, _ = self.encoder.forward_all(segs)
        emb = emb.reshape(len(missing), self.n_segments, -1)
        prob = prob.reshape(len(missing), self.n_segments, -1)
        for i, r in enumerate(missing):
            self._emb[r.clip_id] = emb[i]
            self._prob[r.clip_id] = prob[i]

    def embeddings(self, records) -> np.ndarray:
        self._fill(records)
        return np.stack([self._emb[r.clip_id] for r in records]) if records else np.zeros((0, self.n_segments, 0))

    def id_probs(self, records) -> np.ndarray:
        self._fill(records)
        return np.stack([self._prob[r.clip_id] for r in records])


def fit_detector(cfg: RunConfig, manifest: Manifest, cache: EmbeddingCache, p: int) -> SerialDetector:
    fit_records = manifest.select(machine_type=cfg.machine_type, split=cfg.inlier_fit_split)
    if not fit_records:
        raise ValueError(f"no {cfg.inlier_fit_split} clips for {cfg.machine_type}")
    det = SerialDetector(encoder=cache.encoder, inlier=cfg.h_type, inlier_param=p, aggregator=cfg.aggregator,
                         n_segments=cfg.n_segments, segment_s=cfg.segment_s,
                         covariance_type=cfg.covariance_type, random_state=cfg.seed)
    return det.fit_embeddings(cache.embeddings(fit_records), [r.product_id for r in fit_records])


def _clip_scores(records, seg_scores, aggregator, refs=None) -> list[ClipScore]:
    return [
        ClipScore(clip_id=r.clip_id, segment_scores=s, aggregate=aggregate(s, aggregator), aggregator=aggregator,
                  machine_type=r.machine_type, product_id=r.product_id, label=r.label, model_refs=refs or {})
        for r, s in zip(records, seg_scores)
    ]


def score_with_detector(det: SerialDetector, records, cache: EmbeddingCache) -> list[ClipScore]:
    if not records:
        return []
    seg = det.segment_scores_from_embeddings(cache.embeddings(records), [r.product_id for r in records])
    return _clip_scores(records, seg, det.aggregator)


def score_no_h(records, cache: EmbeddingCache) -> list[ClipScore]:
    """Scores that replace the inlier model by one minus the own-ID probability, averaged over segments."""
    if not records:
        return []
    seg = no_h_segment_scores(cache.id_probs(records), [r.product_id for r in records])
    return _clip_scores(records, seg, "mean")


def _as_rows(scores: list[ClipScore]) -> list[dict]:
    return [{"machine_type": s.machine_type, "product_id": s.product_id, "label": s.label, "aggregate": s.aggregate}
            for s in scores]


def select_inlier_param(cfg: RunConfig, manifest: Manifest, cache: EmbeddingCache) -> tuple[int, dict]:
    """Pick the inlier hyperparameter maximizing the eval-val harmonic mean; ties keep the earlier grid value."""
    grid = list(cfg.p_grid) or [cfg.h_param]
    val_records = manifest.select(machine_type=cfg.machine_type, split="eval-val")
    if len(grid) == 1 or not val_records:
        return int(grid[0]), {}
    results = {}
    for p in grid:
        det = fit_detector(cfg, manifest, cache, int(p))
        rep = evaluate_scores(_as_rows(score_with_detector(det, val_records, cache)), cfg.pauc_p)
        results[int(p)] = rep.overall
    best = max(results, key=lambda p: (results[p], -grid.index(p)))
    return best, results


def run_machine(cfg: RunConfig, manifest: Manifest, store: FeatureStore, workdir, arm: str = "full",
                encoder: OEEncoder | None = None) -> tuple[dict, dict, OEEncoder]:
    """Train (unless given an encoder), select/fit inlier models, score eval-val and eval-test.

    Returns ``({split: [ClipScore]}, provenance, encoder)``.
    """
    train_cfg = cfg
    if arm == "no_mixup":
        train_cfg = replace(cfg, use_mixup=False)
    elif arm == "ids_only":
        train_cfg = replace(cfg, loss_arm="ids_only")
    if encoder is None:
        try:
            encoder = train_machine(train_cfg, manifest, store, workdir, arm)
        except Exception as exc:
            raise StageError(f"train:{cfg.machine_type}", exc) from exc
    cache = EmbeddingCache(encoder, store, cfg.n_segments, cfg.segment_s)
    splits = {s: manifest.select(machine_type=cfg.machine_type, split=s) for s in ("eval-val", "eval-test")}
    prov = {"machine_type": cfg.machine_type, "arm": arm, "config_hash": train_cfg.hash(),
            "best_epoch": getattr(encoder, "best_epoch_", None)}
    try:
        if arm == "no_h":
            scores = {s: score_no_h(recs, cache) for s, recs in splits.items()}
            prov.update({"h": None, "aggregator": "mean"})
        else:
            p, grid_results = select_inlier_param(cfg, manifest, cache)
            det = fit_detector(cfg, manifest, cache, p)
            out = arm_dir(workdir, arm, cfg.machine_type) / "inlier"
            for pid, model in sorted(det.models_.items()):
                save_inlier(model, out / f"id_{pid:02d}.bin")
            scores = {s: score_with_detector(det, recs, cache) for s, recs in splits.items()}
            prov.update({"h": cfg.h_type, "p": p, "p_grid_hm": {str(k): v for k, v in grid_results.items()},
                         "aggregator": cfg.aggregator})
    except Exception as exc:
        raise StageError(f"inlier:{cfg.machine_type}", exc) from exc
    return scores, prov, encoder


def run_arm(base: RunConfig, manifest: Manifest, store: FeatureStore, workdir, arm: str = "full",
            encoders: dict | None = None, machine_types=None) -> tuple[EvalReport, dict]:
    """Run one experimental arm over machine types; writes score CSVs and the report."""
    machine_types = machine_types or ([base.machine_type] if base.machine_type else manifest.machine_types)
    all_scores = {"eval-val": [], "eval-test": []}
    provenance = {"arm": arm, "seed": base.seed, "machines": {}}
    trained = {}
    for mt in machine_types:
        cfg = for_machine(base, mt)
        enc = (encoders or {}).get(mt)
        scores, prov, enc = run_machine(cfg, manifest, store, workdir, arm, encoder=enc)
        trained[mt] = enc
        provenance["machines"][mt] = prov
        for split, s in scores.items():
            all_scores[split].extend(s)
    out = Path(workdir) / arm
    for split, s in all_scores.items():
        scores_to_csv(s, out / f"scores_{split}.csv")
    try:
        report = evaluate_scores(_as_rows(all_scores["eval-test"]), base.pauc_p, provenance)
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    report.save(out / "report.json")
    (out / "report.txt").write_text(format_table({arm: report}) + "\n\n" + report.cell_table() + "\n")
    return report, trained


def try_load_encoders(workdir, arm: str, base: RunConfig, manifest: Manifest) -> dict | None:
    """Encoders saved by an earlier run with the same effective config, or None."""
    machine_types = [base.machine_type] if base.machine_type else manifest.machine_types
    out = {}
    for mt in machine_types:
        path = arm_dir(workdir, arm, mt) / "checkpoint.bin"
        if not path.exists():
            return None
        enc, header = load_encoder(workdir, arm, mt)
        if header["meta"].get("run_config_hash") != for_machine(base, mt).hash():
            return None
        out[mt] = enc
    return out


def run_pipeline(base: RunConfig, manifest: Manifest, workdir, arms=("full",), reuse_full: bool = False) -> dict:
    """Full serial method, plus any requested ablation arms sharing the same features and seed.

    With ``reuse_full`` the no_h arm picks up full-method checkpoints already
    present in ``workdir`` instead of retraining them.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "effective_config.json").write_text(
        json.dumps(base.to_dict(with_paths=False), indent=1, sort_keys=True) + "\n"
    )
    try:
        stats = compute_norm_stats(manifest, workdir)
    except Exception as exc:
        raise StageError("features", exc) from exc
    store = FeatureStore(manifest, stats)
    reports = {}
    order = list(dict.fromkeys(arms))
    full_encoders = None
    if "no_h" in order and "full" not in order and reuse_full:
        full_encoders = try_load_encoders(workdir, "full", base, manifest)
    if "no_h" in order and full_encoders is None:
        # no_h scores with the encoders trained for the full method
        order = ["full"] + [a for a in order if a != "full"]
    for arm in order:
        encoders = full_encoders if arm == "no_h" else None
        report, trained = run_arm(base, manifest, store, workdir, arm, encoders=encoders)
        if arm == "full":
            full_encoders = trained
        reports[arm] = report
    if len(reports) > 1:
        (workdir / "ablation.txt").write_text(format_table(reports) + "\n")
    return reports


def stats_from_header(header: dict) -> NormStats:
    return NormStats(**header["meta"]["norm_stats"])


def load_detector(workdir, arm: str, machine_type: str, cfg: RunConfig, encoder: OEEncoder) -> SerialDetector:
    inlier_dir = arm_dir(workdir, arm, machine_type) / "inlier"
    paths = sorted(inlier_dir.glob("id_*.bin"))
    if not paths:
        raise FileNotFoundError(f"no inlier models under {inlier_dir}")
    det = SerialDetector(encoder=encoder, inlier=cfg.h_type, inlier_param=cfg.h_param, aggregator=cfg.aggregator,
                         n_segments=cfg.n_segments, segment_s=cfg.segment_s)
    det.models_ = {int(p.stem.split("_")[1]): load_inlier(p) for p in paths}
    return det
