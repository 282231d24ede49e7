"""End-to-end glue: simulate a scene, estimate RTFs, beamform, evaluate.

The CLI and the batch evaluation sweep are thin wrappers around these
functions; they are also the entry points the verification suite drives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import beamformer, covariance, metrics, rtf, simulator, stft

METHODS = ("cw-batch", "past", "oracle", "none")


@dataclass
class SimBundle:
    scenario: simulator.Scenario
    config: stft.StftConfig
    clean: np.ndarray  # (M, N)
    noise: np.ndarray  # (M, N), unscaled babble
    mixture: np.ndarray  # (M, N) at the requested SNR
    truth: simulator.GroundTruth
    snr_db: float

    @property
    def noise_frames(self) -> int:
        """Frames fully inside the leading source-silent segment."""
        lead = int(round(self.scenario.lead_silence_s * self.scenario.sample_rate))
        return (lead - self.config.window_len) // self.config.hop + 1


def simulate(
    seed: int,
    snr_db: float,
    static: bool = False,
    config: stft.StftConfig | None = None,
    num_babblers: int = simulator.NUM_BABBLERS,
) -> SimBundle:
    """Render one scenario at the requested SNR; deterministic per seed."""
    scenario = simulator.sample_scenario(seed, static=static)
    if config is None:
        config = stft.StftConfig(sample_rate_hz=scenario.sample_rate)
    target = simulator.synthesize_target_signal([seed, 1], scenario)
    clean, truth = simulator.render_moving_source(target, scenario, config)
    babble = simulator.synthesize_babbler_signals(
        [seed, 2], num_babblers, scenario.duration_s, scenario.sample_rate
    )
    noise = simulator.render_babble(scenario, babble)
    mixture = simulator.mix_at_snr(clean, noise, snr_db)
    return SimBundle(scenario, config, clean, noise, mixture, truth, snr_db)


def remix(bundle: SimBundle, snr_db: float) -> SimBundle:
    """Same rendered scene at a different SNR (avoids re-rendering)."""
    mixture = simulator.mix_at_snr(bundle.clean, bundle.noise, snr_db)
    return SimBundle(
        bundle.scenario, bundle.config, bundle.clean, bundle.noise, mixture,
        bundle.truth, snr_db,
    )


@dataclass
class NoiseStats:
    phi_nn: covariance.HermitianMatrixField
    phi_nn_sqrt: covariance.HermitianMatrixField
    phi_nn_invsqrt: covariance.HermitianMatrixField


def noise_stats(
    mix_spec: stft.ComplexSpectrogram,
    noise_frames: int,
    loading: float = covariance.DEFAULT_LOADING,
) -> NoiseStats:
    phi_nn = covariance.estimate_noise_covariance(mix_spec, noise_frames)
    sqrt_nn, invsqrt_nn = covariance.sqrt_pair(phi_nn, loading)
    return NoiseStats(phi_nn, sqrt_nn, invsqrt_nn)


def estimate_trajectory(
    mix_spec: stft.ComplexSpectrogram,
    stats: NoiseStats,
    noise_frames: int,
    method: str,
    ref_channel: int,
    side: str,
    beta: float = rtf.DEFAULT_BETA,
    truth: simulator.GroundTruth | None = None,
) -> rtf.RtfTrajectory:
    """RTF trajectory by the chosen method ('oracle' needs ground truth)."""
    if method == "oracle":
        if truth is None:
            raise ValueError("oracle method requires ground truth")
        return truth.rtf_left if side == "left" else truth.rtf_right
    if method == "cw-batch":
        phi_yy = covariance.estimate_mixture_covariance(mix_spec, noise_frames)
        return rtf.cw_trajectory(
            mix_spec, stats.phi_nn_sqrt, phi_yy, stats.phi_nn_invsqrt,
            ref_channel, side,
        )
    if method == "past":
        whitened = covariance.whiten(mix_spec, stats.phi_nn_invsqrt)
        return rtf.track_rtf_past(
            whitened, stats.phi_nn_sqrt, ref_channel, beta,
            start_frame=noise_frames, side=side,
        )
    raise ValueError(f"unknown method {method!r} (expected one of {METHODS})")


def beamform_side(
    mix_spec: stft.ComplexSpectrogram,
    stats: NoiseStats,
    traj: rtf.RtfTrajectory,
    method: str,
    loading: float = beamformer.MVDR_LOADING,
) -> tuple[np.ndarray, beamformer.BeamformerWeights]:
    """Beamform one side; method 'none' passes the reference channel through."""
    m, nbins, nframes = mix_spec.data.shape
    if method == "none":
        w = np.zeros((m, nbins, nframes), dtype=np.complex128)
        w[traj.ref_channel] = 1.0
        weights = beamformer.BeamformerWeights(w, traj.side)
    else:
        weights = beamformer.mvdr_weights(traj, stats.phi_nn, loading)
    out_spec = beamformer.apply(weights, mix_spec)
    return stft.synthesize(out_spec), weights


def evaluate_bundle(
    bundle: SimBundle,
    method: str,
    beta: float = rtf.DEFAULT_BETA,
    loading: float = covariance.DEFAULT_LOADING,
    mvdr_loading: float = beamformer.MVDR_LOADING,
    with_doa: bool = False,
    angle_step_deg: float = 1.0,
) -> metrics.EvalReport:
    """Full pipeline on one bundle: estimate, beamform both sides, score."""
    mix_spec = stft.analyze(bundle.mixture, bundle.config)
    ln = bundle.noise_frames
    stats = noise_stats(mix_spec, ln, loading)
    m = bundle.scenario.num_mics

    report = metrics.EvalReport(
        scenario_id=f"seed{bundle.scenario.seed}",
        snr_db=bundle.snr_db,
        method=method,
    )
    out = {}
    for side, ref in (("left", 0), ("right", m - 1)):
        if method == "none":
            traj = rtf.RtfTrajectory(
                _trivial_rtf(m, mix_spec.num_bins, mix_spec.num_frames, ref),
                ref, side,
            )
        else:
            traj = estimate_trajectory(
                mix_spec, stats, ln, method, ref, side, beta, bundle.truth
            )
        signal, weights = beamform_side(mix_spec, stats, traj, method, mvdr_loading)
        out[side] = (traj, signal, weights)

    n = bundle.clean.shape[1]
    report.si_sdr_left = metrics.si_sdr(out["left"][1][:n], bundle.truth.clean_ref_left)
    report.si_sdr_right = metrics.si_sdr(out["right"][1][:n], bundle.truth.clean_ref_right)
    report.si_sdr_input_left = metrics.si_sdr(
        bundle.mixture[0], bundle.truth.clean_ref_left
    )
    report.si_sdr_input_right = metrics.si_sdr(
        bundle.mixture[-1], bundle.truth.clean_ref_right
    )
    if method != "none":
        report.rtf_mse_db = rtf.rtf_mse(out["left"][0], bundle.truth.rtf_left)
    if with_doa:
        angles = np.arange(-90.0, 90.0 + angle_step_deg, angle_step_deg)
        grid = beamformer.narrowband_beampattern(
            out["left"][2], bundle.scenario.mic_axis_offsets(), bundle.config, angles
        )
        errs, mean_err, _ = metrics.doa_error(grid, bundle.truth)
        report.doa_error_mean_deg = mean_err
        report.doa_error_per_frame = [float(e) for e in errs]
    return report


def _trivial_rtf(m: int, nbins: int, nframes: int, ref: int) -> np.ndarray:
    values = np.zeros((m, nbins, nframes), dtype=np.complex128)
    values[ref] = 1.0
    return values
