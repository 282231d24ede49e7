"""Objective evaluation: SI-SDR, binaural sum loss, DOA tracking error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beamformer import BeampatternGrid
from .simulator import GroundTruth

SI_SDR_CLAMP_DB = 120.0
FLAT_PATTERN_RATIO = 1.01


class MetricsError(ValueError):
    pass


@dataclass
class EvalReport:
    scenario_id: str
    snr_db: float
    method: str
    si_sdr_left: float = float("nan")
    si_sdr_right: float = float("nan")
    si_sdr_input_left: float = float("nan")
    si_sdr_input_right: float = float("nan")
    rtf_mse_db: float = float("nan")
    doa_error_mean_deg: float = float("nan")
    doa_error_per_frame: list = field(default_factory=list)

    def csv_row(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "snr_db": self.snr_db,
            "method": self.method,
            "si_sdr_left": self.si_sdr_left,
            "si_sdr_right": self.si_sdr_right,
            "si_sdr_input_left": self.si_sdr_input_left,
            "si_sdr_input_right": self.si_sdr_input_right,
            "rtf_mse_db": self.rtf_mse_db,
            "doa_error_mean_deg": self.doa_error_mean_deg,
        }


def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SDR in dB, clamped to +/- 120 dB.

    Projects the estimate onto the reference, then takes the energy ratio
    of the projection to the residual.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise MetricsError("est and ref must have equal length")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise MetricsError("all-zero reference")
    scale = float(np.dot(est, ref)) / ref_energy
    target = scale * ref
    err = est - target
    p_target = float(np.dot(target, target))
    p_err = float(np.dot(err, err))
    if p_target <= 0:
        return -SI_SDR_CLAMP_DB
    if p_err <= p_target * 10.0 ** (-SI_SDR_CLAMP_DB / 10.0):
        return SI_SDR_CLAMP_DB
    return float(np.clip(10.0 * np.log10(p_target / p_err), -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def binaural_loss(
    est_left: np.ndarray,
    est_right: np.ndarray,
    ref_left: np.ndarray,
    ref_right: np.ndarray,
) -> float:
    """Sum of the negated left and right SI-SDRs (training-style loss)."""
    return -si_sdr(est_left, ref_left) - si_sdr(est_right, ref_right)


def doa_error(
    beampower: BeampatternGrid, truth: GroundTruth
) -> tuple[np.ndarray, float, int]:
    """Per-frame |argmax_theta P(theta,l) - doa_true(l)| over active frames.

    Returns (per-frame errors with NaN for excluded frames, mean over
    included frames, number of excluded flat/inactive frames).
    """
    p = beampower.wideband  # (T, L)
    nframes = p.shape[1]
    if truth.doa_per_frame.shape[0] != nframes:
        raise MetricsError("frame counts of beampower and ground truth differ")
    errors = np.full(nframes, np.nan)
    excluded = 0
    for l in range(nframes):
        if not truth.active_frames[l]:
            excluded += 1
            continue
        col = p[:, l]
        peak = np.max(col)
        trough = max(np.min(col), 1e-300)
        if peak / trough < FLAT_PATTERN_RATIO:
            excluded += 1
            continue
        est_deg = beampower.angles_deg[int(np.argmax(col))]
        diff = abs(est_deg - truth.doa_per_frame[l]) % 360.0
        errors[l] = min(diff, 360.0 - diff)
    included = errors[~np.isnan(errors)]
    if included.size == 0:
        raise MetricsError("no frames available for DOA error")
    return errors, float(np.mean(included)), excluded
