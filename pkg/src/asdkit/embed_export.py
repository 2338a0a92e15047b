"""Per-segment embedding dumps for external projection and inlier-model debugging."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def export_embeddings(records, cache, out) -> int:
    """Write one CSV row per (clip, segment); returns the number of rows.

    ``cache`` is a :class:`asdkit.pipeline.EmbeddingCache`, so the exported
    vectors are exactly the ones the scorer sees.
    """
    records = sorted(records, key=lambda r: r.clip_id)
    emb = cache.embeddings(records)
    dim = emb.shape[-1] if emb.size else cache.encoder.network_.cfg.embedding_dim
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "segment", "machine_type", "product_id", "label"] + [f"e_{i}" for i in range(dim)])
        for r, clip_emb in zip(records, emb):
            for s, vec in enumerate(clip_emb):
                w.writerow([r.clip_id, s, r.machine_type, r.product_id, r.label] + [repr(float(v)) for v in vec])
                n += 1
    return n


def read_embeddings(path):
    """Load an export back as (metadata rows, embedding matrix)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_meta = header.index("label") + 1
    meta = [dict(zip(header[:n_meta], r[:n_meta])) for r in body]
    values = np.array([[float(v) for v in r[n_meta:]] for r in body]).reshape(len(body), len(header) - n_meta)
    return meta, values
