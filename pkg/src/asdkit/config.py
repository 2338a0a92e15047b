"""Run configuration with per-machine-type defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .nnet import DEFAULT_BLOCKS, DESK_BLOCKS

# lr, batch size, lambda, inlier model, inlier parameter
TABLE_I = {
    "fan": (0.001, 32, 0.1, "gmm", 16),
    "gearbox": (0.001, 128, 10.0, "gmm", 64),
    "pump": (0.001, 128, 10.0, "gmm", 2),
    "valve": (0.0005, 128, 10.0, "gmm", 32),
    "slider": (0.001, 128, 10.0, "gmm", 2),
    "ToyCar": (0.001, 128, 10.0, "lof", 16),
    "ToyTrain": (0.0005, 32, 0.1, "lof", 8),
}
FALLBACK_MACHINE = "fan"
DEFAULT_AGGREGATOR = {"gmm": "mean_above_median", "lof": "mean"}

ARMS = ("full", "no_mixup", "no_h", "ids_only")
PATH_FIELDS = ("manifest", "workdir")
ALIASES = {"lambda": "lam"}
DESK_PRESET = {
    "epochs": 30,
    "conv_blocks": [list(b) for b in DESK_BLOCKS],
    "max_batch_size": 32,
    "p_grid": [2, 8, 16],
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    machine_type: str = ""
    lr: float | None = None
    batch_size: int | None = None
    lam: float | None = None
    h_type: str | None = None
    h_param: int | None = None
    aggregator: str | None = None
    epochs: int = 300
    seed: int = 0
    weight_decay: float = 0.01
    mixup_alpha: float = 0.2
    use_mixup: bool = True
    loss_arm: str = "full"
    conv_blocks: list = field(default_factory=lambda: [list(b) for b in DEFAULT_BLOCKS])
    head_hidden: int = 256
    activation: str = "relu"
    n_segments: int = 10
    segment_s: float = 2.0
    p_grid: list = field(default_factory=list)
    inlier_fit_split: str = "train-val"
    covariance_type: str = "full"
    pauc_p: float = 0.1
    manifest: str = ""
    workdir: str = "runs"
    desk: bool = False
    max_batch_size: int | None = None

    def resolved(self) -> "RunConfig":
        """Fill unset per-machine fields from the defaults table."""
        row = TABLE_I.get(self.machine_type, TABLE_I[FALLBACK_MACHINE])
        lr, bs, lam, h, p = row
        cfg = replace(
            self,
            lr=self.lr if self.lr is not None else lr,
            batch_size=self.batch_size if self.batch_size is not None else bs,
            lam=self.lam if self.lam is not None else lam,
            h_type=self.h_type or h,
            h_param=self.h_param if self.h_param is not None else p,
        )
        if cfg.max_batch_size is not None and cfg.batch_size > cfg.max_batch_size:
            cfg = replace(cfg, batch_size=cfg.max_batch_size)
        if cfg.aggregator is None:
            cfg = replace(cfg, aggregator=DEFAULT_AGGREGATOR[cfg.h_type])
        cfg.validate()
        return cfg

    def validate(self):
        if self.h_type not in (None, "gmm", "lof"):
            raise ConfigError(f"h_type must be gmm or lof, got {self.h_type!r}")
        if self.aggregator not in (None, "mean", "max", "mean_above_median"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.loss_arm not in ("full", "ids_only"):
            raise ConfigError(f"unknown loss_arm {self.loss_arm!r}")
        if self.batch_size is not None and (self.batch_size < 2 or self.batch_size % 2):
            raise ConfigError("batch_size must be even and >= 2")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.n_segments < 2:
            raise ConfigError("n_segments must be >= 2")
        if self.inlier_fit_split not in ("train-val", "train"):
            raise ConfigError("inlier_fit_split must be train-val or train")
        if not 0 < self.pauc_p <= 1:
            raise ConfigError("pauc_p must lie in (0, 1]")

    def to_dict(self, with_paths: bool = True) -> dict:
        d = asdict(self)
        if not with_paths:
            for k in PATH_FIELDS:
                d.pop(k)
        return d

    def hash(self) -> str:
        """Hash of everything except file locations, so relocated runs hash the same."""
        return hashlib.sha256(json.dumps(self.to_dict(with_paths=False), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path=None, overrides: dict | None = None, desk: bool = False) -> RunConfig:
    """Layer defaults < desk preset < config file < explicit overrides."""
    values: dict = {}
    if desk:
        values.update(DESK_PRESET)
        values["desk"] = True
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        values.update({ALIASES.get(k, k): v for k, v in data.items()})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def for_machine(cfg: RunConfig, machine_type: str) -> RunConfig:
    return replace(cfg, machine_type=machine_type).resolved()
