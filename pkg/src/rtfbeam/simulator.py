"""Moving-speaker scenario simulator with analytic free-field ground truth.

Geometry: an 8-mic linear array at room center, randomly rotated; a source
on a circular arc around the array center; 20 babblers near the walls.
Rendering is free-field (gain 1/r, pure propagation delay): static sources
use an exact FFT-domain fractional delay, moving sources a 32-tap
windowed-sinc interpolator with the trajectory sampled per STFT hop.
The analytic RTFs and DOA of the same geometry are returned as ground
truth for verifying the estimators.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .beamformer import SPEED_OF_SOUND
from .rtf import RtfTrajectory
from .stft import StftConfig

NUM_MICS = 8
MIC_SPACING_M = 0.05
ARRAY_HEIGHT_M = 1.3
ROOM_HEIGHT_M = 3.0
DEFAULT_DURATION_S = 4.0
DEFAULT_SAMPLE_RATE = 16000
LEAD_SILENCE_S = 0.5
NUM_BABBLERS = 20
# trajectory kept inside +/- this broadside angle: a linear array cannot
# disambiguate front/back, so arcs crossing endfire would fold the DOA
MAX_ABS_DOA_DEG = 80.0
SINC_HALF_TAPS = 16  # 32-tap interpolator
SNR_CAP_DB = 120.0


class SimulatorError(ValueError):
    pass


@dataclass
class Scenario:
    room_width: float
    room_length: float
    array_rotation_deg: float
    source_start_deg: float
    source_delta_deg: float
    source_radius: float
    babbler_positions: np.ndarray  # (B, 3)
    seed: int
    room_height: float = ROOM_HEIGHT_M
    num_mics: int = NUM_MICS
    mic_spacing: float = MIC_SPACING_M
    duration_s: float = DEFAULT_DURATION_S
    sample_rate: int = DEFAULT_SAMPLE_RATE
    lead_silence_s: float = LEAD_SILENCE_S

    def __post_init__(self):
        self.babbler_positions = np.asarray(self.babbler_positions, dtype=np.float64)
        if not (1.0 <= self.source_radius <= 1.5):
            raise SimulatorError("source radius must be in [1, 1.5] m")
        aperture = (self.num_mics - 1) * self.mic_spacing
        if aperture + 2 * self.source_radius > min(self.room_width, self.room_length):
            raise SimulatorError("array plus trajectory does not fit in room")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def array_center(self) -> np.ndarray:
        return np.array([self.room_width / 2, self.room_length / 2, ARRAY_HEIGHT_M])

    def array_axis(self) -> np.ndarray:
        phi = np.deg2rad(self.array_rotation_deg)
        return np.array([np.cos(phi), np.sin(phi), 0.0])

    def array_normal(self) -> np.ndarray:
        phi = np.deg2rad(self.array_rotation_deg)
        return np.array([-np.sin(phi), np.cos(phi), 0.0])

    def mic_positions(self) -> np.ndarray:
        """(M, 3) room coordinates; mic 0 is the left-most element."""
        offsets = (np.arange(self.num_mics) - (self.num_mics - 1) / 2) * self.mic_spacing
        return self.array_center[None, :] + offsets[:, None] * self.array_axis()[None, :]

    def mic_axis_offsets(self) -> np.ndarray:
        """Element coordinates along the array axis (for steering vectors)."""
        return np.arange(self.num_mics) * self.mic_spacing

    def source_doa_deg(self, t: float | np.ndarray) -> np.ndarray:
        """Broadside DOA of the source at time t (constant during the lead)."""
        t = np.asarray(t, dtype=np.float64)
        t0 = self.lead_silence_s
        frac = np.clip((t - t0) / max(self.duration_s - t0, 1e-12), 0.0, 1.0)
        return self.source_start_deg + frac * self.source_delta_deg

    def source_position(self, t: float | np.ndarray) -> np.ndarray:
        # positive DOA lies on the -axis side so that propagation delay grows
        # with the element coordinate, matching the far-field steering model
        # tau_m = (x_m / c) sin(theta)
        theta = np.deg2rad(self.source_doa_deg(t))
        u = self.array_axis()
        n = self.array_normal()
        pos = (
            self.array_center[None, :]
            - self.source_radius * np.sin(theta)[..., None] * u[None, :]
            + self.source_radius * np.cos(theta)[..., None] * n[None, :]
        )
        return pos if np.ndim(t) else pos[0]

    def to_json(self) -> str:
        d = {
            "room_width": self.room_width,
            "room_length": self.room_length,
            "room_height": self.room_height,
            "array_rotation_deg": self.array_rotation_deg,
            "source_start_deg": self.source_start_deg,
            "source_delta_deg": self.source_delta_deg,
            "source_radius": self.source_radius,
            "babbler_positions": self.babbler_positions.tolist(),
            "seed": self.seed,
            "num_mics": self.num_mics,
            "mic_spacing": self.mic_spacing,
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
            "lead_silence_s": self.lead_silence_s,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        d = json.loads(text)
        return cls(
            room_width=d["room_width"],
            room_length=d["room_length"],
            array_rotation_deg=d["array_rotation_deg"],
            source_start_deg=d["source_start_deg"],
            source_delta_deg=d["source_delta_deg"],
            source_radius=d["source_radius"],
            babbler_positions=np.asarray(d["babbler_positions"]),
            seed=d["seed"],
            room_height=d.get("room_height", ROOM_HEIGHT_M),
            num_mics=d.get("num_mics", NUM_MICS),
            mic_spacing=d.get("mic_spacing", MIC_SPACING_M),
            duration_s=d.get("duration_s", DEFAULT_DURATION_S),
            sample_rate=d.get("sample_rate", DEFAULT_SAMPLE_RATE),
            lead_silence_s=d.get("lead_silence_s", LEAD_SILENCE_S),
        )


@dataclass
class GroundTruth:
    doa_per_frame: np.ndarray  # degrees, (L,)
    rtf_left: RtfTrajectory
    rtf_right: RtfTrajectory
    clean_ref_left: np.ndarray
    clean_ref_right: np.ndarray
    active_frames: np.ndarray  # bool (L,)


def sample_scenario(seed: int, static: bool = False) -> Scenario:
    """Draw a random scenario; deterministic given the seed.

    static=True pins the source (delta = 0) for estimation-accuracy sweeps.
    """
    rng = np.random.default_rng(seed)
    width = rng.uniform(6.0, 9.0)
    length = rng.uniform(6.0, 9.0)
    rotation = rng.uniform(-45.0, 45.0)
    radius = rng.uniform(1.0, 1.5)
    if static:
        delta = 0.0
        start = rng.uniform(-MAX_ABS_DOA_DEG, MAX_ABS_DOA_DEG)
    else:
        delta = rng.uniform(45.0, 150.0) * rng.choice([-1.0, 1.0])
        lo = min(0.0, delta)
        hi = max(0.0, delta)
        start = rng.uniform(-MAX_ABS_DOA_DEG - lo, MAX_ABS_DOA_DEG - hi)

    # babblers 0.3 m off a random wall, random height
    margin = 0.3
    babblers = np.empty((NUM_BABBLERS, 3))
    for i in range(NUM_BABBLERS):
        wall = rng.integers(0, 4)
        along = rng.uniform(margin, (width if wall < 2 else length) - margin)
        if wall == 0:
            babblers[i, :2] = (along, margin)
        elif wall == 1:
            babblers[i, :2] = (along, length - margin)
        elif wall == 2:
            babblers[i, :2] = (margin, along)
        else:
            babblers[i, :2] = (width - margin, along)
        babblers[i, 2] = rng.uniform(1.2, 1.9)

    return Scenario(
        room_width=width,
        room_length=length,
        array_rotation_deg=rotation,
        source_start_deg=start,
        source_delta_deg=delta,
        source_radius=radius,
        babbler_positions=babblers,
        seed=int(seed),
    )


def _delay_exact(signal: np.ndarray, delay_samples: float, gain: float) -> np.ndarray:
    """Exact band-limited fractional delay via FFT phase ramp (static path)."""
    n = signal.shape[0]
    pad = int(np.ceil(delay_samples)) + 4 * SINC_HALF_TAPS
    nfft = n + pad
    spec = np.fft.rfft(signal, n=nfft)
    freqs = np.fft.rfftfreq(nfft)
    spec *= np.exp(-2j * np.pi * freqs * delay_samples)
    return gain * np.fft.irfft(spec, n=nfft)[:n]


def _sinc_kernel(frac: np.ndarray) -> np.ndarray:
    """Raised-cosine windowed sinc taps for per-sample fractions, (N, 32)."""
    j = np.arange(2 * SINC_HALF_TAPS)
    u = j[None, :] - (SINC_HALF_TAPS - 1) - frac[:, None]
    window = 0.5 + 0.5 * np.cos(np.pi * u / SINC_HALF_TAPS)
    window[np.abs(u) > SINC_HALF_TAPS] = 0.0
    return np.sinc(u) * window


def _delay_varying(
    signal: np.ndarray, delay_samples: np.ndarray, gain: np.ndarray
) -> np.ndarray:
    """Time-varying fractional delay: 32-tap windowed-sinc interpolation."""
    n = signal.shape[0]
    n0 = np.floor(delay_samples).astype(np.int64)
    frac = delay_samples - n0
    kern = _sinc_kernel(frac)  # (N, 32)
    j = np.arange(2 * SINC_HALF_TAPS)
    idx = np.arange(n)[:, None] - n0[:, None] + (SINC_HALF_TAPS - 1) - j[None, :]
    ok = (idx >= 0) & (idx < n)
    gathered = np.where(ok, signal[np.clip(idx, 0, n - 1)], 0.0)
    return gain * np.sum(kern * gathered, axis=1)


def _render_static(
    signal: np.ndarray, source_pos: np.ndarray, mic_positions: np.ndarray, fs: int
) -> np.ndarray:
    dists = np.linalg.norm(mic_positions - source_pos[None, :], axis=1)
    out = np.empty((mic_positions.shape[0], signal.shape[0]))
    for m, d in enumerate(dists):
        out[m] = _delay_exact(signal, d / SPEED_OF_SOUND * fs, 1.0 / d)
    return out


def _analytic_rtf(
    scenario: Scenario,
    frame_times: np.ndarray,
    config: StftConfig,
    ref_channel: int,
    side: str,
) -> RtfTrajectory:
    mics = scenario.mic_positions()
    pos = scenario.source_position(frame_times)  # (L, 3)
    dists = np.linalg.norm(pos[:, None, :] - mics[None, :, :], axis=2)  # (L, M)
    tau = dists / SPEED_OF_SOUND
    freqs = config.bin_frequencies_hz()  # (F,)
    dtau = tau - tau[:, ref_channel : ref_channel + 1]
    gains = dists[:, ref_channel : ref_channel + 1] / dists
    # a_m(k, l) = exp(-j 2 pi f_k (tau_m - tau_ref)) * d_ref / d_m
    values = gains.T[:, None, :] * np.exp(
        -2j * np.pi * freqs[None, :, None] * dtau.T[:, None, :]
    )
    return RtfTrajectory(values, ref_channel, side)


def render_moving_source(
    source: np.ndarray, scenario: Scenario, config: StftConfig | None = None
) -> tuple[np.ndarray, GroundTruth]:
    """Free-field render of the (possibly moving) target source.

    Returns the (M, N) multichannel clean signal and ground truth sampled
    at STFT frame centers: DOA, analytic left/right RTF trajectories, and
    the clean reference-mic signals.
    """
    if config is None:
        config = StftConfig(sample_rate_hz=scenario.sample_rate)
    source = np.asarray(source, dtype=np.float64)
    n = scenario.num_samples
    if source.shape != (n,):
        raise SimulatorError(f"source must have {n} samples, got {source.shape}")
    fs = scenario.sample_rate
    mics = scenario.mic_positions()

    # trajectory containment
    t_grid = np.linspace(0.0, scenario.duration_s, 64)
    pos_grid = scenario.source_position(t_grid)
    if (
        np.any(pos_grid[:, 0] < 0)
        or np.any(pos_grid[:, 0] > scenario.room_width)
        or np.any(pos_grid[:, 1] < 0)
        or np.any(pos_grid[:, 1] > scenario.room_length)
    ):
        raise SimulatorError("source trajectory exits the room")

    if scenario.source_delta_deg == 0.0:
        clean = _render_static(source, scenario.source_position(0.0), mics, fs)
    else:
        # positions at hop resolution, linearly interpolated per sample
        hop_times = np.arange(0, n + config.hop, config.hop) / fs
        hop_pos = scenario.source_position(hop_times)  # (H, 3)
        sample_t = np.arange(n) / fs
        clean = np.empty((scenario.num_mics, n))
        for m in range(scenario.num_mics):
            hop_d = np.linalg.norm(hop_pos - mics[m][None, :], axis=1)
            d = np.interp(sample_t, hop_times, hop_d)
            clean[m] = _delay_varying(source, d / SPEED_OF_SOUND * fs, 1.0 / d)

    num_frames = config.num_frames(n)
    frame_times = (np.arange(num_frames) * config.hop + config.window_len / 2) / fs
    doa = scenario.source_doa_deg(frame_times)
    rtf_left = _analytic_rtf(scenario, frame_times, config, 0, "left")
    rtf_right = _analytic_rtf(scenario, frame_times, config, scenario.num_mics - 1, "right")

    frame_energy = np.array(
        [
            np.sum(clean[0, l * config.hop : l * config.hop + config.window_len] ** 2)
            for l in range(num_frames)
        ]
    )
    active = frame_energy > 1e-4 * max(np.max(frame_energy), 1e-300)
    truth = GroundTruth(
        doa_per_frame=doa,
        rtf_left=rtf_left,
        rtf_right=rtf_right,
        clean_ref_left=clean[0].copy(),
        clean_ref_right=clean[-1].copy(),
        active_frames=active,
    )
    return clean, truth


def render_babble(scenario: Scenario, babbler_signals: np.ndarray) -> np.ndarray:
    """Sum of static free-field renderings of each babbler, (M, N)."""
    sigs = np.atleast_2d(np.asarray(babbler_signals, dtype=np.float64))
    count = sigs.shape[0]
    if count != scenario.babbler_positions.shape[0]:
        warnings.warn(
            f"{count} babbler signals for {scenario.babbler_positions.shape[0]} "
            "configured positions"
        )
    mics = scenario.mic_positions()
    out = np.zeros((scenario.num_mics, sigs.shape[1]))
    for i in range(count):
        pos = scenario.babbler_positions[i % scenario.babbler_positions.shape[0]]
        out += _render_static(sigs[i], pos, mics, scenario.sample_rate)
    return out


def mix_at_snr(
    clean: np.ndarray, noise: np.ndarray, snr_db: float, ref_channel: int = 0
) -> np.ndarray:
    """Scale noise so the ref-channel clean/noise power ratio equals snr_db."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise SimulatorError("clean and noise shapes differ")
    if snr_db >= SNR_CAP_DB:
        return clean.copy()
    p_clean = np.mean(clean[ref_channel] ** 2)
    p_noise = np.mean(noise[ref_channel] ** 2)
    if p_clean <= 0 or p_noise <= 0:
        raise SimulatorError("zero-power clean or noise at reference channel")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def synthesize_babbler_signals(
    seed: int,
    count: int = NUM_BABBLERS,
    duration_s: float = DEFAULT_DURATION_S,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> np.ndarray:
    """Speech-shaped noise: pink spectrum, 4 Hz amplitude modulation.

    Returns (count, N), unit RMS per signal, deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.empty((count, n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    shaping = np.where(freqs > 50.0, np.sqrt(50.0 / np.maximum(freqs, 50.0)), 1.0)
    shaping[0] = 0.0
    for i in range(count):
        white = rng.standard_normal(n)
        pink = np.fft.irfft(np.fft.rfft(white) * shaping, n=n)
        phase = rng.uniform(0, 2 * np.pi)
        mod = 1.0 + 0.5 * np.sin(2 * np.pi * 4.0 * t + phase)
        sig = pink * mod
        out[i] = sig / np.sqrt(np.mean(sig**2))
    return out


def synthesize_target_signal(seed: int, scenario: Scenario) -> np.ndarray:
    """Speech-shaped target with the leading noise-only segment zeroed."""
    sig = synthesize_babbler_signals(
        seed, 1, scenario.duration_s, scenario.sample_rate
    )[0]
    lead = int(round(scenario.lead_silence_s * scenario.sample_rate))
    sig[:lead] = 0.0
    return sig
