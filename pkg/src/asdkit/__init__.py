"""Serial outlier-exposure / inlier-modeling anomalous sound detection."""

from .features import LogMelExtractor, MelConfig, NormStats
from .inlier import GaussianMixtureScorer, LOFScorer
from .scoring import SerialDetector
from .training import OEEncoder

__all__ = [
    "GaussianMixtureScorer",
    "LOFScorer",
    "LogMelExtractor",
    "MelConfig",
    "NormStats",
    "OEEncoder",
    "SerialDetector",
]

__version__ = "0.1.0"
