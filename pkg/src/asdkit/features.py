"""Amplitude normalization, log-mel spectrograms and 2-second segmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Manifest, read_wav

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    machine_type: str
    mean: float
    std: float
    clamped: bool = False

    def __post_init__(self):
        if not self.std > 0:
            raise FeatureError(f"std must be positive, got {self.std}")

    def to_dict(self):
        return asdict(self)


def save_norm_stats(stats: dict, path) -> None:
    payload = {k: v.to_dict() for k, v in sorted(stats.items())}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_norm_stats(path) -> dict:
    payload = json.loads(Path(path).read_text())
    return {k: NormStats(**v) for k, v in payload.items()}


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 128.0
    hop_ms: float = 16.0
    n_mels: int = 224
    fmin_hz: float = 50.0
    fmax_hz: float = 7800.0
    segment_s: float = 2.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise FeatureError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.win_length < self.hop_length:
            raise FeatureError("window must be at least one hop long")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise FeatureError(f"waveform of {n_samples} samples is shorter than one window ({self.win_length})")
        return (n_samples - self.win_length) // self.hop_length + 1

    @property
    def segment_frames(self) -> int:
        return self.n_frames(int(round(self.segment_s * self.sample_rate_hz)))

    def duration_of(self, n_frames: int) -> float:
        return ((n_frames - 1) * self.hop_length + self.win_length) / self.sample_rate_hz

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeatureSegment:
    values: np.ndarray
    clip_id: str
    start_s: float


# ---------------------------------------------------------------------------
# Normalization


def norm_stats_from_waveforms(waveforms, machine_type: str) -> NormStats:
    """Mean and standard deviation over the concatenation of ``waveforms``."""
    waveforms = [np.asarray(w, dtype=np.float64) for w in waveforms]
    if not waveforms:
        raise FeatureError(f"no clips for machine type {machine_type!r}")
    n = sum(w.size for w in waveforms)
    mean = sum(w.sum() for w in waveforms) / n
    var = sum(((w - mean) ** 2).sum() for w in waveforms) / n
    std = float(np.sqrt(var))
    clamped = std < STD_FLOOR
    if clamped:
        warnings.warn(f"near-constant audio for {machine_type!r}; std clamped to {STD_FLOOR}", RuntimeWarning)
        std = STD_FLOOR
    return NormStats(machine_type=machine_type, mean=float(mean), std=std, clamped=clamped)


def fit_norm_stats(manifest: Manifest, machine_type: str) -> NormStats:
    records = manifest.select(machine_type=machine_type, split="train")
    if not records:
        raise FeatureError(f"no train clips for machine type {machine_type!r}")
    return norm_stats_from_waveforms((read_wav(manifest.resolve(r))[0] for r in records), machine_type)


# ---------------------------------------------------------------------------
# Spectrograms


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak weight 1."""
    n_fft = cfg.win_length
    fft_freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def logmel(waveform, cfg: MelConfig = MelConfig(), stats: NormStats | None = None) -> np.ndarray:
    """Log-mel spectrogram of a whole clip, shape (frames, n_mels).

    No padding is applied, so frames = (len - win) // hop + 1.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("expected a mono waveform")
    cfg.n_frames(x.size)
    if stats is not None:
        x = (x - stats.mean) / stats.std
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * _window(cfg.win_length), axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def inference_segments(clip_mel, S: int = 10, T_s: float = 2.0, cfg: MelConfig = MelConfig(), clip_id: str = "") -> list[FeatureSegment]:
    """Cut ``S`` evenly spaced, possibly overlapping ``T_s``-second segments.

    The first segment starts at 0 and the last one ends at the clip end.
    """
    if S < 2:
        raise FeatureError("need at least 2 segments")
    n_frames = clip_mel.shape[0]
    seg_frames = cfg.n_frames(int(round(T_s * cfg.sample_rate_hz)))
    duration = cfg.duration_of(n_frames)
    if seg_frames > n_frames:
        raise FeatureError(f"segment length {T_s} s exceeds clip duration {duration:.3f} s")
    slack = n_frames - seg_frames
    step_s = (duration - T_s) / (S - 1)
    out = []
    for i in range(S):
        start = int(round(i * slack / (S - 1)))
        out.append(FeatureSegment(clip_mel[start : start + seg_frames], clip_id, max(0.0, i * step_s)))
    return out


def segment_stack(clip_mel, S: int = 10, T_s: float = 2.0, cfg: MelConfig = MelConfig()) -> np.ndarray:
    return np.stack([s.values for s in inference_segments(clip_mel, S, T_s, cfg)])


def random_crop(clip_mel, T_s: float, rng: np.random.Generator, cfg: MelConfig = MelConfig(), clip_id: str = "") -> FeatureSegment:
    seg_frames = cfg.n_frames(int(round(T_s * cfg.sample_rate_hz)))
    n_frames = clip_mel.shape[0]
    if seg_frames > n_frames:
        raise FeatureError(f"clip of {cfg.duration_of(n_frames):.3f} s is shorter than {T_s} s")
    start = int(rng.integers(0, n_frames - seg_frames + 1))
    return FeatureSegment(clip_mel[start : start + seg_frames], clip_id, start * cfg.hop_length / cfg.sample_rate_hz)


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Normalize amplitudes with statistics learned in ``fit`` and emit log-mel spectrograms.

    ``transform`` takes a list of equal-length waveforms and returns an array
    of shape (n_clips, frames, n_mels).
    """

    def __init__(self, machine_type="", sample_rate_hz=16000, window_ms=128.0, hop_ms=16.0, n_mels=224,
                 fmin_hz=50.0, fmax_hz=7800.0, log_floor=1e-10, dtype="float32"):
        self.machine_type = machine_type
        self.sample_rate_hz = sample_rate_hz
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.n_mels = n_mels
        self.fmin_hz = fmin_hz
        self.fmax_hz = fmax_hz
        self.log_floor = log_floor
        self.dtype = dtype

    @property
    def config_(self) -> MelConfig:
        return MelConfig(self.sample_rate_hz, self.window_ms, self.hop_ms, self.n_mels,
                         self.fmin_hz, self.fmax_hz, 2.0, self.log_floor)

    def fit(self, X, y=None):
        self.stats_ = norm_stats_from_waveforms(X, self.machine_type)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        cfg = self.config_
        return np.stack([logmel(w, cfg, self.stats_).astype(self.dtype) for w in X])
