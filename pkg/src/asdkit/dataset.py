"""Corpus bookkeeping: manifests, DCASE-style directory scanning and synthetic corpora."""

from __future__ import annotations

import json
import logging
import os
import re
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SPLITS = ("train", "train-val", "eval-val", "eval-test")
LABELS = ("normal", "anomaly", "unknown")
TRAIN_VAL_FRACTION = 0.1


class CorpusError(ValueError):
    """Raised for unreadable or malformed corpora."""


@dataclass(frozen=True)
class ClipRecord:
    path: str
    machine_type: str
    product_id: int
    split: str
    label: str
    duration_s: float
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split {self.split!r} for {self.path}")
        if self.label not in LABELS:
            raise CorpusError(f"unknown label {self.label!r} for {self.path}")
        if self.label == "unknown" and self.split not in ("train", "train-val"):
            raise CorpusError(f"label 'unknown' not allowed in split {self.split}: {self.path}")

    @property
    def clip_id(self) -> str:
        return self.path

    @property
    def is_training(self) -> bool:
        return self.split in ("train", "train-val")


@dataclass
class Manifest:
    records: list[ClipRecord]
    machine_types: list[str]
    ids_per_type: int
    seed: int = 0
    base_dir: Path = field(default_factory=Path, repr=False, compare=False)

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        rates = {r.sample_rate_hz for r in self.records}
        if len(rates) > 1:
            raise CorpusError(f"mixed sample rates in manifest: {sorted(rates)}")
        for r in self.records:
            if not 0 <= r.product_id < self.ids_per_type:
                raise CorpusError(f"product_id {r.product_id} outside [0, {self.ids_per_type}): {r.path}")
            if r.machine_type not in self.machine_types:
                raise CorpusError(f"machine type {r.machine_type!r} not declared: {r.path}")

    def select(self, machine_type=None, split=None, product_id=None, label=None) -> list[ClipRecord]:
        def keep(r):
            if machine_type is not None and r.machine_type != machine_type:
                return False
            if split is not None:
                allowed = (split,) if isinstance(split, str) else tuple(split)
                if r.split not in allowed:
                    return False
            if product_id is not None and r.product_id != product_id:
                return False
            return label is None or r.label == label

        return sorted((r for r in self.records if keep(r)), key=lambda r: r.path)

    def resolve(self, record: ClipRecord) -> Path:
        return self.base_dir / record.path

    def to_dict(self, relative_to=None) -> dict:
        out_dir = Path(relative_to if relative_to is not None else self.base_dir).resolve()
        base = self.base_dir.resolve()
        records = []
        for r in sorted(self.records, key=lambda r: r.path):
            d = asdict(r)
            d["path"] = Path(os.path.relpath(base / r.path, out_dir)).as_posix()
            records.append(d)
        return {
            "machine_types": list(self.machine_types),
            "ids_per_type": self.ids_per_type,
            "seed": self.seed,
            "records": records,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict(relative_to=path.parent)
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
        records = [ClipRecord(**r) for r in payload["records"]]
        return cls(
            records=records,
            machine_types=list(payload["machine_types"]),
            ids_per_type=int(payload["ids_per_type"]),
            seed=int(payload["seed"]),
            base_dir=path.parent,
        )


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file into float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise CorpusError(f"expected mono audio: {path}")
            if wf.getsampwidth() != 2:
                raise CorpusError(f"expected 16-bit PCM: {path}")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise CorpusError(f"unreadable audio file {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def _wav_info(path) -> tuple[float, int]:
    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnframes() / wf.getframerate(), wf.getframerate()
    except (OSError, EOFError, wave.Error) as exc:
        raise CorpusError(f"unreadable audio file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Directory layouts

# <root>/<machine_type>/{train,test}/section_00_source_train_normal_0000_*.wav
_DCASE2021 = re.compile(
    r"^section_(?P<pid>\d+)_(?P<domain>source|target)_(?P<phase>train|test)_(?P<label>normal|anomaly)_\d+.*\.wav$"
)
# <root>/<machine_type>/{train,test}/normal_id_00_00000000.wav
_DCASE2020 = re.compile(r"^(?P<label>normal|anomaly)_id_(?P<pid>\d+)_\d+\.wav$")

LAYOUTS = {"dcase2021": _DCASE2021, "dcase2020": _DCASE2020}


def parse_clip_path(relpath: Path, layout: str) -> dict | None:
    """Parse machine type, product ID, phase and label from a corpus-relative path.

    Returns None for files that parse but fall outside the supported domain
    (target-domain recordings).
    """
    pattern = LAYOUTS.get(layout)
    if pattern is None:
        raise CorpusError(f"unknown layout {layout!r}; choose from {sorted(LAYOUTS)}")
    parts = relpath.parts
    if len(parts) < 3 or parts[-2] not in ("train", "test"):
        raise CorpusError(f"path does not follow <machine>/<train|test>/<file> layout: {relpath}")
    m = pattern.match(parts[-1])
    if m is None:
        raise CorpusError(f"file name does not parse under layout {layout}: {relpath}")
    if m.groupdict().get("domain") == "target":
        return None
    return {
        "machine_type": parts[-3],
        "product_id": int(m.group("pid")),
        "phase": parts[-2],
        "label": m.group("label"),
    }


def _allocate_quota(sizes: list[int], fraction: float) -> list[int]:
    """Split round(fraction * total) across strata by largest remainder, leaving one record per stratum."""
    total = sum(sizes)
    target = int(np.floor(fraction * total + 0.5))
    exact = [fraction * s for s in sizes]
    quota = [min(int(np.floor(e)), max(s - 1, 0)) for e, s in zip(exact, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - np.floor(exact[i])), i))
    remaining = target - sum(quota)
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if quota[i] < sizes[i] - 1:
                quota[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return quota


def assign_splits(entries: list[dict], ids_per_type: int, seed: int = 0) -> list[str]:
    """Assign a split name to each parsed entry.

    Training files are divided 90/10 into train / train-val, stratified per
    (machine_type, product_id). Evaluation files go to eval-val when their
    product ID lies in the lower half of the ID range and to eval-test
    otherwise (IDs 0-2 vs 3-5 for six IDs).
    """
    splits = [""] * len(entries)
    strata: dict[tuple, list[int]] = {}
    for i, e in enumerate(entries):
        if e["phase"] == "train":
            strata.setdefault((e["machine_type"], e["product_id"]), []).append(i)
        else:
            splits[i] = "eval-val" if e["product_id"] < max(ids_per_type // 2, 1) else "eval-test"

    keys = sorted(strata)
    members = [sorted(strata[k], key=lambda i: entries[i]["path"]) for k in keys]
    quotas = _allocate_quota([len(m) for m in members], TRAIN_VAL_FRACTION)
    rng = np.random.default_rng(seed)
    for idx, quota in zip(members, quotas):
        perm = rng.permutation(len(idx))
        chosen = {idx[j] for j in perm[:quota]}
        for i in idx:
            splits[i] = "train-val" if i in chosen else "train"
    return splits


def scan_corpus(root, layout: str = "dcase2021", seed: int = 0, machine_types=None) -> Manifest:
    """Walk a DCASE-style tree and build a manifest with deterministic splits."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"unreadable directory: {root}")
    if layout not in LAYOUTS:
        raise CorpusError(f"unknown layout {layout!r}; choose from {sorted(LAYOUTS)}")
    files = sorted(p for p in root.rglob("*.wav") if p.is_file())
    if not files:
        raise CorpusError(f"no audio files found under {root}")

    entries = []
    skipped = 0
    for f in files:
        rel = f.relative_to(root)
        info = parse_clip_path(rel, layout)
        if info is None:
            skipped += 1
            continue
        if machine_types is not None and info["machine_type"] not in machine_types:
            continue
        info["path"] = rel.as_posix()
        entries.append(info)
    if skipped:
        logger.info("skipped %d target-domain files", skipped)
    if not entries:
        raise CorpusError(f"no audio files found under {root}")

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        infos = list(pool.map(lambda e: _wav_info(root / e["path"]), entries))

    ids_per_type = max(e["product_id"] for e in entries) + 1
    splits = assign_splits(entries, ids_per_type, seed)
    records = [
        ClipRecord(
            path=e["path"],
            machine_type=e["machine_type"],
            product_id=e["product_id"],
            split=s,
            label=e["label"],
            duration_s=round(dur, 6),
            sample_rate_hz=rate,
        )
        for e, s, (dur, rate) in zip(entries, splits, infos)
    ]
    found_types = sorted({e["machine_type"] for e in entries})
    order = [m for m in machine_types if m in found_types] if machine_types else found_types
    return Manifest(records=records, machine_types=order, ids_per_type=ids_per_type, seed=seed, base_dir=root)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("ASD_NUM_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Synthetic corpora

DEFAULT_BASE_HZ = {
    "fan": 180.0,
    "gearbox": 260.0,
    "pump": 340.0,
    "valve": 420.0,
    "slider": 520.0,
    "ToyCar": 610.0,
    "ToyTrain": 730.0,
}


@dataclass
class SynthSpec:
    """Recipe for a desk-scale corpus of tonal machine sounds.

    Each (machine type, product ID) pair gets a fixed harmonic signature.
    Anomalous clips shift every partial by ``freq_shift`` and/or add
    transient bursts.
    """

    machine_types: list[str] = field(default_factory=lambda: ["fan", "pump", "ToyCar"])
    ids_per_type: int = 3
    n_train: int = 60
    n_eval_normal: int = 20
    n_eval_anomaly: int = 20
    clip_s: float = 10.0
    sample_rate_hz: int = SAMPLE_RATE
    base_hz: dict = field(default_factory=dict)
    id_step: float = 0.02
    n_harmonics: int = 6
    harmonic_spread: float = 0.1
    noise_floor: float = 0.1
    freq_jitter: float = 0.02
    freq_shift: float = 0.15
    bursts: bool = False
    burst_rate_hz: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if len(self.machine_types) < 2:
            raise CorpusError("synthetic corpus needs at least 2 machine types")
        if self.ids_per_type < 2:
            raise CorpusError("synthetic corpus needs at least 2 product IDs per type (K >= 2)")
        if self.clip_s <= 0 or self.sample_rate_hz <= 0:
            raise CorpusError("clip length and sample rate must be positive")

    def base_frequency(self, machine_type: str) -> float:
        if machine_type in self.base_hz:
            return float(self.base_hz[machine_type])
        if machine_type in DEFAULT_BASE_HZ:
            return DEFAULT_BASE_HZ[machine_type]
        return 200.0 + 110.0 * self.machine_types.index(machine_type)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Signature:
    f0: float
    harmonic_amps: tuple
    noise_floor: float
    am_rate_hz: float


def machine_signature(spec: SynthSpec, machine_type: str, product_id: int) -> Signature:
    type_index = spec.machine_types.index(machine_type)
    rng = np.random.default_rng([spec.seed, 1, type_index, product_id])
    amps = np.arange(1, spec.n_harmonics + 1) ** -0.5 * rng.uniform(spec.harmonic_spread, 1.0, spec.n_harmonics)
    amps = amps / np.sqrt(np.sum(amps**2))
    return Signature(
        f0=spec.base_frequency(machine_type) * (1.0 + spec.id_step * product_id),
        harmonic_amps=tuple(float(a) for a in amps),
        noise_floor=spec.noise_floor,
        am_rate_hz=float(rng.uniform(0.5, 3.0)),
    )


def render_clip(spec: SynthSpec, signature: Signature, clip_seed, anomaly: bool = False) -> np.ndarray:
    """Synthesize one clip; the same ``clip_seed`` gives the same noise and phases with or without anomaly."""
    rng = np.random.default_rng(clip_seed)
    n = int(round(spec.clip_s * spec.sample_rate_hz))
    t = np.arange(n) / spec.sample_rate_hz
    f0 = signature.f0 * (1.0 + rng.uniform(-spec.freq_jitter, spec.freq_jitter))
    phases = rng.uniform(0, 2 * np.pi, len(signature.harmonic_amps))
    am_phase = rng.uniform(0, 2 * np.pi)
    noise = rng.standard_normal(n)
    burst_times = rng.uniform(0, spec.clip_s, max(1, int(spec.burst_rate_hz * spec.clip_s)))
    if anomaly and spec.freq_shift:
        f0 = f0 * (1.0 + spec.freq_shift)

    nyquist = spec.sample_rate_hz / 2
    tone = np.zeros(n)
    for h, (amp, ph) in enumerate(zip(signature.harmonic_amps, phases), start=1):
        if h * f0 < nyquist:
            tone += amp * np.sin(2 * np.pi * h * f0 * t + ph)
    tone *= 1.0 + 0.2 * np.sin(2 * np.pi * signature.am_rate_hz * t + am_phase)
    x = tone + signature.noise_floor * noise

    if anomaly and spec.bursts:
        width = int(0.02 * spec.sample_rate_hz)
        env = np.exp(-np.arange(width) / (width / 5))
        for bt in burst_times:
            start = int(bt * spec.sample_rate_hz)
            seg = slice(start, min(start + width, n))
            x[seg] += 0.8 * env[: seg.stop - seg.start] * noise[seg] / max(signature.noise_floor, 1e-3)
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


def generate_synthetic(spec: SynthSpec, out) -> Manifest:
    """Write a DCASE-2021-style synthetic corpus to ``out`` and return its manifest.

    Training clips are normal only; evaluation clips are split between
    normal and anomalous recordings for every product ID.
    """
    out = Path(out)
    jobs = []
    for ti, mt in enumerate(spec.machine_types):
        for pid in range(spec.ids_per_type):
            sig = machine_signature(spec, mt, pid)
            for j in range(spec.n_train):
                name = f"{mt}/train/section_{pid:02d}_source_train_normal_{j:04d}.wav"
                jobs.append((name, sig, [spec.seed, 2, ti, pid, 0, j], False))
            for j in range(spec.n_eval_normal):
                name = f"{mt}/test/section_{pid:02d}_source_test_normal_{j:04d}.wav"
                jobs.append((name, sig, [spec.seed, 2, ti, pid, 1, j], False))
            for j in range(spec.n_eval_anomaly):
                name = f"{mt}/test/section_{pid:02d}_source_test_anomaly_{j:04d}.wav"
                jobs.append((name, sig, [spec.seed, 2, ti, pid, 2, j], True))

    def work(job):
        name, sig, seed, anomaly = job
        write_wav(out / name, render_clip(spec, sig, seed, anomaly), spec.sample_rate_hz)

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        list(pool.map(work, jobs))
    manifest = scan_corpus(out, "dcase2021", seed=spec.seed, machine_types=spec.machine_types)
    manifest.save(out / "manifest.json")
    return manifest
