"""RTF-guided MVDR weights, filter-and-sum application, and beampatterns.

The MVDR beamformer here is a classical distortionless design steered by
the RTF trajectory: w = Phi_nn^{-1} a / (a^H Phi_nn^{-1} a). Beampatterns
are evaluated against far-field plane-wave steering vectors on a broadside
angle grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .covariance import DEFAULT_LOADING, HermitianMatrixField, hermitian_evd
from .rtf import RtfTrajectory
from .stft import ComplexSpectrogram, StftConfig

SPEED_OF_SOUND = 343.0
# heavier loading than the covariance-whitening default: the MVDR inverse is
# otherwise dominated by the smallest sample eigenvalues of a 30-frame
# covariance, which makes the weights hypersensitive to small RTF errors
MVDR_LOADING = 0.1


class BeamformerError(ValueError):
    pass


@dataclass
class BeamformerWeights:
    """Complex weights w(l,k), shape (M, F, L); applied as s = w^H y."""

    values: np.ndarray
    side: str = "left"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 3:
            raise BeamformerError("weights must have shape (M, F, L)")


@dataclass
class BeampatternGrid:
    angles_deg: np.ndarray  # (T,)
    narrowband: np.ndarray  # |B(k, theta, l)|, shape (F, T, L)
    wideband: np.ndarray  # P(theta, l) = sum_k |B|^2, shape (T, L)


def inverse_with_loading(
    field: HermitianMatrixField, loading: float = DEFAULT_LOADING
) -> np.ndarray:
    """(Phi + loading*mean(lambda)*I)^{-1} per bin, shape (F, M, M)."""
    evd = hermitian_evd(field)
    eps = loading * np.mean(np.abs(evd.eigenvalues), axis=1, keepdims=True)
    lam = evd.eigenvalues + eps
    if np.any(lam <= 0):
        raise BeamformerError("covariance not invertible even after loading")
    v = evd.eigenvectors
    return np.einsum("kij,kj,klj->kil", v, 1.0 / lam, v.conj())


def mvdr_weights(
    rtf: RtfTrajectory,
    phi_nn: HermitianMatrixField,
    loading: float = MVDR_LOADING,
) -> BeamformerWeights:
    """Distortionless MVDR weights per (k, l): w = Phi^{-1}a / (a^H Phi^{-1}a).

    Invalid RTF cells reuse the previous frame's weights; a bin with no
    valid cell at all falls back to reference-channel passthrough.
    """
    m, nbins, nframes = rtf.values.shape
    if phi_nn.num_bins != nbins or phi_nn.num_channels != m:
        raise BeamformerError("noise covariance shape does not match RTF")
    inv = inverse_with_loading(phi_nn, loading)

    a = rtf.values  # (M, F, L)
    num = np.einsum("kij,jkl->ikl", inv, a)  # Phi^{-1} a
    den = np.einsum("ikl,ikl->kl", a.conj(), num).real  # a^H Phi^{-1} a
    ok = rtf.valid & (den > 1e-300)

    w = np.empty_like(a)
    passthrough = np.zeros(m, dtype=np.complex128)
    passthrough[rtf.ref_channel] = 1.0
    dead_bins = ~np.any(ok, axis=1)
    if np.any(dead_bins):
        warnings.warn(
            f"{int(np.sum(dead_bins))} bins have no valid RTF; "
            "using reference passthrough weights"
        )
    prev = np.tile(passthrough[:, None], (1, nbins))  # (M, F)
    for l in range(nframes):
        cur = prev.copy()
        sel = ok[:, l]
        cur[:, sel] = num[:, sel, l] / den[sel, l]
        w[:, :, l] = cur
        prev = cur
    return BeamformerWeights(w, rtf.side)


def apply(weights: BeamformerWeights, spec: ComplexSpectrogram) -> ComplexSpectrogram:
    """Filter-and-sum: s_hat(l,k) = w^H(l,k) y(l,k)."""
    if weights.values.shape != spec.data.shape:
        raise BeamformerError(
            f"weights shape {weights.values.shape} != spectrogram {spec.data.shape}"
        )
    out = np.einsum("mkl,mkl->kl", weights.values.conj(), spec.data)
    return ComplexSpectrogram(out[None, :, :], spec.config)


def steering_vector(
    positions_m: np.ndarray,
    theta_deg: float,
    bin_index: int,
    config: StftConfig,
    speed_of_sound: float = SPEED_OF_SOUND,
    ref_element: int = 0,
) -> np.ndarray:
    """Far-field plane-wave steering vector for a linear array.

    h_m = exp(-j 2 pi f_k tau_m), tau_m = (x_m / c) sin(theta), normalized
    so the reference element equals 1. theta is measured from broadside.
    """
    x = np.asarray(positions_m, dtype=np.float64)
    f_k = bin_index * config.sample_rate_hz / config.window_len
    tau = (x - x[ref_element]) / speed_of_sound * np.sin(np.deg2rad(theta_deg))
    return np.exp(-2j * np.pi * f_k * tau)


def narrowband_beampattern(
    weights: BeamformerWeights,
    positions_m: np.ndarray,
    config: StftConfig,
    angles_deg: np.ndarray | None = None,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> BeampatternGrid:
    """|B(k, theta, l)| = |w^H(k,l) h(k, theta)| over the angle grid."""
    if angles_deg is None:
        angles_deg = np.arange(-90.0, 91.0, 1.0)
    angles_deg = np.asarray(angles_deg, dtype=np.float64)
    x = np.asarray(positions_m, dtype=np.float64)
    m, nbins, _ = weights.values.shape
    if x.shape != (m,):
        raise BeamformerError("geometry length must equal channel count")

    freqs = np.arange(nbins) * config.sample_rate_hz / config.window_len
    tau = (x - x[0])[None, :] / speed_of_sound * np.sin(np.deg2rad(angles_deg))[:, None]
    h = np.exp(-2j * np.pi * freqs[:, None, None] * tau[None, :, :])  # (F, T, M)
    b = np.abs(np.einsum("mkl,ktm->ktl", weights.values.conj(), h))
    wide = np.sum(b**2, axis=0)
    return BeampatternGrid(angles_deg, b, wide)


def wideband_beampower(grid: BeampatternGrid) -> BeampatternGrid:
    """Recompute P(theta, l) = sum_k |B(k, theta, l)|^2 from the stored B."""
    wide = np.sum(grid.narrowband**2, axis=0)
    return BeampatternGrid(grid.angles_deg, grid.narrowband, wide)


def delay_and_sum_weights(
    positions_m: np.ndarray,
    theta_deg: float,
    config: StftConfig,
    num_frames: int,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> BeamformerWeights:
    """Matched-filter weights w = h(theta)/M, constant over frames."""
    x = np.asarray(positions_m, dtype=np.float64)
    m = x.shape[0]
    nbins = config.num_bins
    w = np.empty((m, nbins, num_frames), dtype=np.complex128)
    for k in range(nbins):
        h = steering_vector(x, theta_deg, k, config, speed_of_sound)
        w[:, k, :] = (h / m)[:, None]
    return BeamformerWeights(w)
