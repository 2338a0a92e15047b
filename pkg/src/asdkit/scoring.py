"""Clip-level anomaly scores: segment the clip, embed, score with the inlier model, aggregate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import MelConfig, segment_stack
from .inlier import make_inlier

AGGREGATORS = ("mean", "max", "mean_above_median")


def lower_median(scores) -> float:
    s = np.sort(np.asarray(scores, dtype=np.float64))
    return float(s[(s.size - 1) // 2])


def aggregate(scores, name: str) -> float:
    """Reduce segment scores to one clip score.

    ``mean_above_median`` averages the scores at or above the lower median,
    so the selected set is never empty.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no segment scores")
    if name == "mean":
        return float(s.mean())
    if name == "max":
        return float(s.max())
    if name == "mean_above_median":
        return float(s[s >= lower_median(s)].mean())
    raise ValueError(f"unknown aggregator {name!r}; choose from {AGGREGATORS}")


@dataclass
class ClipScore:
    clip_id: str
    segment_scores: np.ndarray
    aggregate: float
    aggregator: str
    machine_type: str = ""
    product_id: int = -1
    label: str = "unknown"
    model_refs: dict = field(default_factory=dict)


class SerialDetector(BaseEstimator):
    """Per-product-ID inlier models on top of a trained embedding encoder.

    ``fit`` receives whole-clip log-mels of normal clips and their product
    IDs, embeds each of the ``n_segments`` inference segments, and fits one
    inlier model per ID. ``segment_scores`` / ``anomaly_score`` score new
    clips against the model of their own ID.
    """

    def __init__(self, encoder=None, inlier="gmm", inlier_param=16, aggregator="mean_above_median",
                 n_segments=10, segment_s=2.0, covariance_type="full", random_state=0):
        self.encoder = encoder
        self.inlier = inlier
        self.inlier_param = inlier_param
        self.aggregator = aggregator
        self.n_segments = n_segments
        self.segment_s = segment_s
        self.covariance_type = covariance_type
        self.random_state = random_state

    def embed_clips(self, clips) -> np.ndarray:
        """Embeddings of shape (n_clips, n_segments, dim)."""
        if not len(clips):
            return np.zeros((0, self.n_segments, 0))
        mel = MelConfig(segment_s=self.segment_s, n_mels=clips[0].shape[1])
        segs = np.concatenate([segment_stack(c, self.n_segments, self.segment_s, mel) for c in clips])
        emb = self.encoder.transform(segs)
        return emb.reshape(len(clips), self.n_segments, -1)

    def fit_embeddings(self, embeddings, product_ids):
        embeddings = np.asarray(embeddings)
        product_ids = np.asarray(product_ids, dtype=int)
        self.models_ = {}
        for pid in np.unique(product_ids):
            fit_set = embeddings[product_ids == pid].reshape(-1, embeddings.shape[-1])
            model = make_inlier(self.inlier, self.inlier_param, self.random_state, self.covariance_type)
            self.models_[int(pid)] = model.fit(fit_set)
        return self

    def fit(self, clips, product_ids):
        return self.fit_embeddings(self.embed_clips(clips), product_ids)

    def segment_scores_from_embeddings(self, embeddings, product_ids) -> np.ndarray:
        check_is_fitted(self, "models_")
        embeddings = np.asarray(embeddings)
        out = np.empty(embeddings.shape[:2])
        for i, pid in enumerate(np.asarray(product_ids, dtype=int)):
            if int(pid) not in self.models_:
                raise KeyError(f"no inlier model for product ID {int(pid)}")
            out[i] = self.models_[int(pid)].anomaly_score(embeddings[i])
        return out

    def segment_scores(self, clips, product_ids) -> np.ndarray:
        return self.segment_scores_from_embeddings(self.embed_clips(clips), product_ids)

    def anomaly_score(self, clips, product_ids) -> np.ndarray:
        seg = self.segment_scores(clips, product_ids)
        return np.array([aggregate(s, self.aggregator) for s in seg])


def no_h_segment_scores(id_probs, product_ids) -> np.ndarray:
    """One minus the predicted probability of each clip's own product ID, per segment.

    ``id_probs`` has shape (n_clips, n_segments, K).
    """
    id_probs = np.asarray(id_probs)
    pids = np.asarray(product_ids, dtype=int)
    return 1.0 - id_probs[np.arange(len(pids)), :, pids]


def score_clip(clip_mel, encoder, inlier_model, aggregator: str, S: int = 10, T_s: float = 2.0,
               clip_id: str = "", **meta) -> ClipScore:
    """Anomaly score of one clip: aggregate inlier scores of its S segment embeddings."""
    if inlier_model is None:
        raise KeyError(f"missing inlier model for clip {clip_id}")
    mel = MelConfig(segment_s=T_s, n_mels=clip_mel.shape[1])
    emb = encoder.transform(segment_stack(clip_mel, S, T_s, mel))
    seg = np.asarray(inlier_model.anomaly_score(emb))
    return ClipScore(clip_id=clip_id, segment_scores=seg, aggregate=aggregate(seg, aggregator),
                     aggregator=aggregator, **meta)


def scores_to_csv(scores: list[ClipScore], path=None) -> str:
    """Write ``clip_id,machine_type,product_id,label,aggregate,seg_0..seg_{S-1}`` rows sorted by clip_id."""
    scores = sorted(scores, key=lambda s: s.clip_id)
    S = max((len(s.segment_scores) for s in scores), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip_id", "machine_type", "product_id", "label", "aggregate"] + [f"seg_{i}" for i in range(S)])
    for s in scores:
        w.writerow([s.clip_id, s.machine_type, s.product_id, s.label, repr(float(s.aggregate))]
                   + [repr(float(v)) for v in s.segment_scores])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["product_id"] = int(r["product_id"])
        r["aggregate"] = float(r["aggregate"])
    return rows
