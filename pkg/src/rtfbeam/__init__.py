"""Time-varying RTF estimation, MVDR beamforming, beampattern analysis and
a moving-speaker scenario simulator."""

from . import beamformer, covariance, metrics, pipeline, rtf, simulator, stft

__all__ = [
    "beamformer",
    "covariance",
    "metrics",
    "pipeline",
    "rtf",
    "simulator",
    "stft",
]

__version__ = "0.1.0"
