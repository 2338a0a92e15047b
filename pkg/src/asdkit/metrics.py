"""AUC, partial AUC and harmonic-mean roll-ups over (machine type, product ID) cells."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check_scores(normal_scores, anomaly_scores):
    n = np.asarray(normal_scores, dtype=np.float64).ravel()
    a = np.asarray(anomaly_scores, dtype=np.float64).ravel()
    if n.size == 0 or a.size == 0:
        raise ValueError("both normal and anomaly scores are required")
    return n, a


def auc(normal_scores, anomaly_scores) -> float:
    """P(anomaly score > normal score) with ties counted as one half."""
    n, a = _check_scores(normal_scores, anomaly_scores)
    ranks = rankdata(np.concatenate([n, a]))
    u = ranks[n.size:].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (n.size * a.size))


def roc_points(normal_scores, anomaly_scores):
    """ROC vertices from a descending threshold sweep; equal scores form a single step."""
    n, a = _check_scores(normal_scores, anomaly_scores)
    scores = np.concatenate([a, n])
    is_anom = np.concatenate([np.ones(a.size), np.zeros(n.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_anom = scores[order], is_anom[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(is_anom)[last_of_group]
    fp = np.cumsum(1 - is_anom)[last_of_group]
    fpr = np.r_[0.0, fp / n.size]
    tpr = np.r_[0.0, tp / a.size]
    return fpr, tpr


def pauc(normal_scores, anomaly_scores, p: float = 0.1, mcclish: bool = False) -> float:
    """Area under the ROC curve for FPR in [0, p], divided by p.

    With ``mcclish=True`` the McClish standardization (as used by
    ``sklearn.metrics.roc_auc_score(max_fpr=p)``) is returned instead, which
    maps the chance diagonal to 0.5.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    fpr, tpr = roc_points(normal_scores, anomaly_scores)
    stop = np.searchsorted(fpr, p, side="right")
    x = fpr[:stop]
    y = tpr[:stop]
    if x[-1] < p:
        x0, x1 = fpr[stop - 1], fpr[stop]
        y0, y1 = tpr[stop - 1], tpr[stop]
        x = np.r_[x, p]
        y = np.r_[y, y0 + (y1 - y0) * (p - x0) / (x1 - x0)]
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    if mcclish:
        lo = p * p / 2.0
        return 0.5 * (1.0 + (area - lo) / (p - lo))
    return area / p


def harmonic_mean(values) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("harmonic mean of nothing")
    if np.any(np.isnan(v)):
        return float("nan")
    if np.any(v <= 0):
        warnings.warn("harmonic mean over a non-positive cell; reporting 0", RuntimeWarning)
        return 0.0
    return float(v.size / np.sum(1.0 / v))


@dataclass
class EvalReport:
    """Per-cell AUC/pAUC and harmonic-mean summaries.

    ``cells`` maps (machine_type, product_id) to {"auc": ..., "pauc": ...}.
    """

    cells: dict
    per_machine: dict = field(default_factory=dict)
    overall: float = float("nan")
    provenance: dict = field(default_factory=dict)

    def machine_types(self) -> list[str]:
        seen = []
        for mt, _ in self.cells:
            if mt not in seen:
                seen.append(mt)
        return seen

    def has_nan(self) -> bool:
        vals = [v for c in self.cells.values() for v in c.values()] + list(self.per_machine.values()) + [self.overall]
        return any(isinstance(v, float) and math.isnan(v) for v in vals)

    def to_dict(self) -> dict:
        return {
            "cells": [
                {"machine_type": mt, "product_id": pid, "auc": c["auc"], "pauc": c["pauc"]}
                for (mt, pid), c in sorted(self.cells.items())
            ],
            "per_machine": dict(sorted(self.per_machine.items())),
            "overall": self.overall,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cells = {(c["machine_type"], int(c["product_id"])): {"auc": c["auc"], "pauc": c["pauc"]} for c in d["cells"]}
        return cls(cells=cells, per_machine=dict(d["per_machine"]), overall=d["overall"], provenance=d.get("provenance", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    def cell_table(self) -> str:
        lines = [f"{'machine':<10} {'id':>3} {'AUC [%]':>8} {'pAUC [%]':>9}"]
        for (mt, pid), c in sorted(self.cells.items()):
            lines.append(f"{mt:<10} {pid:>3} {100 * c['auc']:>8.2f} {100 * c['pauc']:>9.2f}")
        return "\n".join(lines)


def harmonic_rollup(cells: dict, provenance: dict | None = None) -> EvalReport:
    """Per machine type: HM over {auc, pauc} of its IDs; overall: HM over every cell."""
    per_machine = {}
    machines = []
    for mt, _ in sorted(cells):
        if mt not in machines:
            machines.append(mt)
    for mt in machines:
        vals = [v for (m, _), c in sorted(cells.items()) if m == mt for v in (c["auc"], c["pauc"])]
        per_machine[mt] = harmonic_mean(vals)
    overall = harmonic_mean(v for c in cells.values() for v in (c["auc"], c["pauc"]))
    return EvalReport(cells=dict(cells), per_machine=per_machine, overall=overall, provenance=dict(provenance or {}))


def evaluate_scores(rows, p: float = 0.1, provenance=None) -> EvalReport:
    """Build a report from score rows carrying machine_type, product_id, label and aggregate."""
    groups: dict = {}
    for r in rows:
        if r["label"] not in ("normal", "anomaly"):
            continue
        g = groups.setdefault((r["machine_type"], int(r["product_id"])), {"normal": [], "anomaly": []})
        g[r["label"]].append(float(r["aggregate"]))
    cells = {}
    for key, g in sorted(groups.items()):
        if not g["normal"] or not g["anomaly"]:
            raise ValueError(f"cell {key} needs both normal and anomaly clips")
        cells[key] = {"auc": auc(g["normal"], g["anomaly"]), "pauc": pauc(g["normal"], g["anomaly"], p)}
    return harmonic_rollup(cells, provenance)


def format_table(reports: dict, machine_types: list[str] | None = None) -> str:
    """Aligned text table, one row per named report, machine columns plus All / Har-mean, in percent."""
    if machine_types is None:
        machine_types = []
        for rep in reports.values():
            for mt in rep.machine_types():
                if mt not in machine_types:
                    machine_types.append(mt)
    name_w = max([len("Method")] + [len(n) for n in reports])
    cols = list(machine_types) + ["All / Har-mean"]
    widths = [max(len(c), 7) for c in cols]
    header = f"{'Method':<{name_w}} | " + " ".join(f"{c:>{w}}" for c, w in zip(cols, widths))
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        vals = [rep.per_machine.get(mt, float("nan")) for mt in machine_types] + [rep.overall]
        lines.append(f"{name:<{name_w}} | " + " ".join(f"{100 * v:>{w}.2f}" for v, w in zip(vals, widths)))
    return "\n".join(lines)
