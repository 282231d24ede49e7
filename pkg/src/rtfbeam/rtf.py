"""RTF estimation: batch covariance whitening and recursive PAST tracking.

Both paths produce reference-normalized steering vectors: the de-whitened
principal eigenvector divided by its entry at the reference microphone, so
the reference entry is exactly 1+0j wherever the estimate is valid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .covariance import HermitianMatrixField, hermitian_evd, whitened_mixture_covariance
from .stft import ComplexSpectrogram, StftConfig

DENOM_TOL = 1e-12
# flag a bin when the reference entry is this far below the vector norm:
# a valid RTF has |a_ref|/||a|| ~ 1/sqrt(M), so 0.1 only trips on estimates
# whose reference channel sits in the (near-)null of the de-whitened vector
REF_NULL_REL_TOL = 0.1
MSE_FLOOR_DB = -120.0
# chosen empirically on moving-speaker scenes: an effective memory of a few
# frames tracks DOA motion without inflating the estimate variance too much
DEFAULT_BETA = 0.7

_MAGIC = b"RTFB"
_VERSION = 1


class RtfError(ValueError):
    pass


@dataclass
class PastState:
    """Single-bin recursive tracker state for the principal eigenvector."""

    psi: np.ndarray  # complex (M,)
    delta: float
    beta: float

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.complex128)
        if not (0.0 < self.beta <= 1.0):
            raise RtfError(f"beta must be in (0, 1], got {self.beta}")
        if self.delta <= 0.0:
            raise RtfError(f"delta must be positive, got {self.delta}")


class OpCounter:
    """Counts complex multiply-add operations for complexity checks."""

    def __init__(self):
        self.multiply_adds = 0

    def add(self, n: int):
        self.multiply_adds += n


def past_init(
    num_channels: int,
    beta: float = DEFAULT_BETA,
    delta0: float = 1.0,
    psi0: np.ndarray | None = None,
    ref_channel: int = 0,
) -> PastState:
    if psi0 is None:
        psi0 = np.zeros(num_channels, dtype=np.complex128)
        psi0[ref_channel] = 1.0
    else:
        psi0 = np.asarray(psi0, dtype=np.complex128)
        if psi0.shape != (num_channels,):
            raise RtfError("psi0 has wrong length")
    return PastState(psi0, delta0, beta)


def past_update(state: PastState, y_w: np.ndarray, ops: OpCounter | None = None) -> PastState:
    """One recursion step of the principal-eigenvector tracker.

    alpha = psi^H y;  delta <- beta*delta + |alpha|^2;
    e = y - psi*alpha;  psi <- psi + e * conj(alpha)/delta.
    """
    y = np.asarray(y_w, dtype=np.complex128)
    if not np.all(np.isfinite(y)):
        raise RtfError("non-finite input to past_update")
    m = state.psi.shape[0]
    alpha = np.vdot(state.psi, y)
    if ops:
        ops.add(m)
    state.delta = state.beta * state.delta + abs(alpha) ** 2
    if ops:
        ops.add(2)
    e = y - state.psi * alpha
    if ops:
        ops.add(m)
    state.psi = state.psi + e * (np.conj(alpha) / state.delta)
    if ops:
        ops.add(m + 1)
    return state


@dataclass
class RtfTrajectory:
    """Per-bin, per-frame RTF estimates, shape (M, F, L), with validity mask."""

    values: np.ndarray  # complex (M, F, L)
    ref_channel: int
    side: str = "left"
    valid: np.ndarray = field(default=None)  # bool (F, L)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 3:
            raise RtfError("trajectory values must have shape (M, F, L)")
        if self.side not in ("left", "right"):
            raise RtfError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape[1:], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape[1:]:
                raise RtfError("valid mask shape must be (F, L)")

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]

    @property
    def num_frames(self) -> int:
        return self.values.shape[2]


def _normalize_dewhitened(
    b: np.ndarray, ref: int
) -> tuple[np.ndarray, np.ndarray]:
    """Divide (F, M) de-whitened vectors by the reference entry.

    Returns (rtf, valid); invalid bins get the trivial e_ref vector.
    """
    nbins, m = b.shape
    den = b[:, ref]
    norm = np.linalg.norm(b, axis=1)
    valid = (np.abs(den) >= DENOM_TOL) & (np.abs(den) >= REF_NULL_REL_TOL * norm)
    a = np.zeros_like(b)
    a[valid] = b[valid] / den[valid, None]
    a[~valid, ref] = 1.0
    a[valid, ref] = 1.0  # exact, not just within rounding
    return a, valid


def estimate_rtf_cw(
    phi_nn_sqrt: HermitianMatrixField,
    phi_ww: HermitianMatrixField,
    ref_channel: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch covariance-whitening RTF estimate per bin.

    a = (Phi_nn^{H/2} psi) / (e_ref^T Phi_nn^{H/2} psi), psi the principal
    eigenvector of the whitened mixture covariance. Returns (rtf (F, M),
    valid (F,)); bins whose reference entry vanishes are flagged invalid.
    """
    m = phi_ww.num_channels
    if not (0 <= ref_channel < m):
        raise RtfError(f"ref_channel {ref_channel} out of range [0, {m})")
    psi = hermitian_evd(phi_ww).principal_vectors  # (F, M)
    b = np.einsum("kij,kj->ki", phi_nn_sqrt.matrices, psi)
    return _normalize_dewhitened(b, ref_channel)


def cw_trajectory(
    spec: ComplexSpectrogram,
    phi_nn_sqrt: HermitianMatrixField,
    phi_yy: HermitianMatrixField,
    phi_nn_invsqrt: HermitianMatrixField,
    ref_channel: int,
    side: str = "left",
) -> RtfTrajectory:
    """Batch CW estimate broadcast over all frames of the spectrogram."""
    phi_ww = whitened_mixture_covariance(phi_yy, phi_nn_invsqrt)
    a, valid = estimate_rtf_cw(phi_nn_sqrt, phi_ww, ref_channel)
    values = np.repeat(a.T[:, :, None], spec.num_frames, axis=2)
    mask = np.repeat(valid[:, None], spec.num_frames, axis=1)
    mask[-1, :] = False  # Nyquist bin: real-signal STFT cannot carry RTF phase
    return RtfTrajectory(values, ref_channel, side, mask)


def track_rtf_past(
    spec_whitened: ComplexSpectrogram,
    phi_nn_sqrt: HermitianMatrixField,
    ref_channel: int,
    beta: float = DEFAULT_BETA,
    delta0: float = 1.0,
    start_frame: int = 0,
    side: str = "left",
) -> RtfTrajectory:
    """Run one PAST tracker per bin over the whitened frames, de-whitening
    each updated eigenvector into a reference-normalized RTF.

    Frames before `start_frame` emit the trivial RTF and are flagged
    invalid. A bin whose normalization fails at frame l holds the previous
    frame's value and is flagged invalid at (k, l). Causal: frame l depends
    only on frames <= l.
    """
    if not (0.0 < beta <= 1.0):
        raise RtfError(f"beta must be in (0, 1], got {beta}")
    if delta0 <= 0.0:
        raise RtfError("delta0 must be positive")
    m, nbins, nframes = spec_whitened.data.shape
    if not (0 <= ref_channel < m):
        raise RtfError(f"ref_channel {ref_channel} out of range [0, {m})")

    # per-bin state, vectorized: psi (F, M), delta (F,)
    psi = np.zeros((nbins, m), dtype=np.complex128)
    psi[:, ref_channel] = 1.0
    delta = np.full(nbins, float(delta0))

    trivial = np.zeros(m, dtype=np.complex128)
    trivial[ref_channel] = 1.0
    values = np.empty((m, nbins, nframes), dtype=np.complex128)
    valid = np.zeros((nbins, nframes), dtype=bool)
    prev = np.tile(trivial, (nbins, 1))

    yw = spec_whitened.data  # (M, F, L)
    sqrt_nn = phi_nn_sqrt.matrices
    for l in range(nframes):
        if l < start_frame:
            values[:, :, l] = trivial[:, None]
            continue
        y = yw[:, :, l].T  # (F, M)
        alpha = np.einsum("km,km->k", psi.conj(), y)
        delta = beta * delta + np.abs(alpha) ** 2
        e = y - psi * alpha[:, None]
        psi = psi + e * (alpha.conj() / delta)[:, None]

        b = np.einsum("kij,kj->ki", sqrt_nn, psi)
        a, ok = _normalize_dewhitened(b, ref_channel)
        a[~ok] = prev[~ok]  # zero-order hold on failed bins
        values[:, :, l] = a.T
        valid[:, l] = ok
        prev = a
    valid[-1, :] = False  # Nyquist bin: real-signal STFT cannot carry RTF phase
    return RtfTrajectory(values, ref_channel, side, valid)


def rtf_mse(estimate: RtfTrajectory, truth: RtfTrajectory) -> float:
    """Normalized MSE in dB: mean over valid (k,l) of ||a_hat - a||^2/||a||^2."""
    if estimate.values.shape != truth.values.shape:
        raise RtfError("estimate/truth shape mismatch")
    if estimate.ref_channel != truth.ref_channel:
        raise RtfError("estimate/truth reference channels differ")
    norm2 = np.sum(np.abs(truth.values) ** 2, axis=0)  # (F, L)
    mask = estimate.valid & truth.valid & (norm2 > 0)
    if not np.any(mask):
        raise RtfError("no valid cells for MSE computation")
    err2 = np.sum(np.abs(estimate.values - truth.values) ** 2, axis=0)
    mse = np.mean(err2[mask] / norm2[mask])
    if mse <= 10.0 ** (MSE_FLOOR_DB / 10.0):
        return MSE_FLOOR_DB
    return float(10.0 * np.log10(mse))


def save_trajectory(path, traj: RtfTrajectory, config: StftConfig) -> None:
    """Binary layout (little endian): magic 'RTFB', u32 version, u32 M, F, L,
    u32 ref_channel, u8 side (0=left, 1=right), u32 sample_rate, window_len,
    hop; then F*L u8 validity mask, then (M, F, L) row-major complex64."""
    m, f, l = traj.values.shape
    header = _MAGIC + struct.pack(
        "<IIIIIBIII",
        _VERSION,
        m,
        f,
        l,
        traj.ref_channel,
        0 if traj.side == "left" else 1,
        config.sample_rate_hz,
        config.window_len,
        config.hop,
    )
    if hasattr(path, "write"):
        fh = path
        fh.write(header)
        fh.write(traj.valid.astype(np.uint8).tobytes())
        fh.write(traj.values.astype(np.complex64).tobytes())
    else:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(traj.valid.astype(np.uint8).tobytes())
            fh.write(traj.values.astype(np.complex64).tobytes())


def load_trajectory(path) -> tuple[RtfTrajectory, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise RtfError(f"bad magic {magic!r} in trajectory file")
        fields = struct.unpack("<IIIIIBIII", fh.read(33))
        version, m, f, l, ref, side_code, rate, wlen, hop = fields
        if version != _VERSION:
            raise RtfError(f"unsupported trajectory version {version}")
        valid = np.frombuffer(fh.read(f * l), dtype=np.uint8).reshape(f, l).astype(bool)
        values = np.frombuffer(fh.read(m * f * l * 8), dtype=np.complex64)
        values = values.reshape(m, f, l).astype(np.complex128)
    side = "left" if side_code == 0 else "right"
    meta = {"sample_rate_hz": rate, "window_len": wlen, "hop": hop}
    return RtfTrajectory(values, ref, side, valid), meta
