"""Deterministic signal primitives: STFT/iSTFT, separation metrics, WAV IO.

Everything here is plain numpy in float64 and free of learned state, so the
rest of the package (and the test oracles) can rely on it as a fixed point.
"""

import dataclasses
import math

import numpy as np
from scipy.io import wavfile

# Degenerate energy ratios are clamped to this range (dB) so losses and
# metrics stay finite on perfect / orthogonal estimates.
DB_CLAMP = 80.0

_WINDOWS = ("rect", "hann", "sqrt_hann")


class DspError(ValueError):
    """Invalid signal or transform configuration."""


@dataclasses.dataclass(frozen=True)
class AudioSignal:
    """Mono waveform with its sample rate. Samples are float64, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DspError(f"expected mono 1-D samples, got shape {samples.shape}")
        if samples.size < 1:
            raise DspError("signal must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise DspError("signal contains NaN/Inf")
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclasses.dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis framing parameters. Requires hop <= win <= fft."""

    win_length: int
    hop_length: int
    fft_size: int
    window: str = "sqrt_hann"
    center: bool = True

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.fft_size):
            raise DspError(
                f"need 0 < hop ({self.hop_length}) <= win ({self.win_length})"
                f" <= fft ({self.fft_size})"
            )
        if self.window not in _WINDOWS:
            raise DspError(f"unknown window {self.window!r}, choose from {_WINDOWS}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclasses.dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided complex T-F grid, shape (frames, bins) with bins = fft//2 + 1."""

    data: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2 or data.shape[1] != self.config.num_bins:
            raise DspError(
                f"spectrogram shape {data.shape} inconsistent with"
                f" {self.config.num_bins} one-sided bins"
            )
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclasses.dataclass(frozen=True)
class SeparationScore:
    """Per-utterance metrics (dB). Improvements are relative to the raw mixture."""

    si_sdr: float
    sdr: float
    si_sdri: float
    sdri: float


def make_window(name: str, length: int) -> np.ndarray:
    if name == "rect":
        return np.ones(length, dtype=np.float64)
    # periodic Hann, standard for STFT processing
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    if name == "hann":
        return hann
    if name == "sqrt_hann":
        return np.sqrt(hann)
    raise DspError(f"unknown window {name!r}")


def _padded_window(config: StftConfig) -> np.ndarray:
    """Analysis window centered in an fft_size-long frame (torch convention)."""
    win = make_window(config.window, config.win_length)
    if config.win_length == config.fft_size:
        return win
    left = (config.fft_size - config.win_length) // 2
    out = np.zeros(config.fft_size, dtype=np.float64)
    out[left : left + config.win_length] = win
    return out


def cola_deviation(config: StftConfig, num_hops: int = 16) -> float:
    """Max relative deviation of the overlap-added squared window from constant.

    Evaluated in the steady-state interior; 0 means the analysis/synthesis pair
    satisfies constant overlap-add exactly.
    """
    win = _padded_window(config)
    n = config.fft_size + num_hops * config.hop_length
    acc = np.zeros(n)
    for m in range(num_hops + 1):
        start = m * config.hop_length
        acc[start : start + config.fft_size] += win**2
    interior = acc[config.fft_size : -config.fft_size]
    if interior.size == 0 or interior.min() <= 0:
        return float("inf")
    return float((interior.max() - interior.min()) / interior.max())


def stft(signal: AudioSignal, config: StftConfig) -> ComplexSpectrogram:
    """Windowed one-sided DFT. center=True pads fft//2 samples (reflect) per side.

    Frame count: 1 + floor(T / hop) with center=True,
    1 + floor((T - fft) / hop) otherwise.
    """
    x = signal.samples
    win = _padded_window(config)
    n_fft, hop = config.fft_size, config.hop_length
    if config.center:
        x = np.pad(x, (n_fft // 2, n_fft // 2), mode="reflect")
        n_frames = 1 + len(signal) // hop
    else:
        if len(signal) < config.win_length:
            raise DspError(
                f"signal of {len(signal)} samples is shorter than the"
                f" {config.win_length}-sample window (center=False)"
            )
        n_frames = 1 + (len(signal) - n_fft) // hop
    frames = np.stack(
        [x[t * hop : t * hop + n_fft] * win for t in range(n_frames)], axis=0
    )
    return ComplexSpectrogram(np.fft.rfft(frames, n=n_fft, axis=1), config, signal.sample_rate)


def _natural_length(config: StftConfig, n_frames: int) -> int:
    if config.center:
        return (n_frames - 1) * config.hop_length
    return (n_frames - 1) * config.hop_length + config.fft_size


def istft(spec: ComplexSpectrogram, length: int) -> AudioSignal:
    """Normalized weighted overlap-add inverse; reconstructs to `length` samples.

    `length` may differ from the framing's natural length by at most one hop.
    """
    config = spec.config
    n_fft, hop = config.fft_size, config.hop_length
    n_frames = spec.num_frames
    natural = _natural_length(config, n_frames)
    if abs(length - natural) > hop:
        raise DspError(
            f"requested length {length} inconsistent with {n_frames} frames"
            f" (natural length {natural}, slack one hop of {hop})"
        )
    win = _padded_window(config)
    frames = np.fft.irfft(spec.data, n=n_fft, axis=1)
    total = (n_frames - 1) * hop + n_fft
    acc = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * hop
        acc[start : start + n_fft] += frames[t] * win
        norm[start : start + n_fft] += win**2
    offset = n_fft // 2 if config.center else 0
    acc = acc[offset : offset + length]
    norm = norm[offset : offset + length]
    if acc.size < length:
        acc = np.pad(acc, (0, length - acc.size))
        norm = np.pad(norm, (0, length - norm.size))
    live = norm > 1e-10
    if not np.all(live):
        raise DspError("window envelope has dead samples; config cannot reconstruct")
    return AudioSignal(acc / norm, spec.sample_rate)


def _ratio_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CLAMP
    if den <= 0.0:
        return DB_CLAMP
    return float(np.clip(10.0 * math.log10(num / den), -DB_CLAMP, DB_CLAMP))


def _as_pair(estimate: AudioSignal, target: AudioSignal):
    if len(estimate) != len(target):
        raise DspError(f"length mismatch: {len(estimate)} vs {len(target)}")
    if estimate.sample_rate != target.sample_rate:
        raise DspError(
            f"sample rate mismatch: {estimate.sample_rate} vs {target.sample_rate}"
        )
    return estimate.samples, target.samples


def si_sdr(estimate: AudioSignal, target: AudioSignal) -> float:
    """Scale-invariant SDR (dB): project the estimate onto the target, compare
    projection energy to residual energy. Clamped to +-80 dB."""
    est, tgt = _as_pair(estimate, target)
    tgt_energy = float(np.dot(tgt, tgt))
    if tgt_energy == 0.0:
        raise DspError("target has zero energy")
    scale = float(np.dot(est, tgt)) / tgt_energy
    projection = scale * tgt
    residual = est - projection
    return _ratio_db(float(np.dot(projection, projection)), float(np.dot(residual, residual)))


def sdr(estimate: AudioSignal, target: AudioSignal) -> float:
    """Plain (scale-sensitive) SNR of the error signal, in dB, clamped to +-80."""
    est, tgt = _as_pair(estimate, target)
    tgt_energy = float(np.dot(tgt, tgt))
    if tgt_energy == 0.0:
        raise DspError("target has zero energy")
    err = tgt - est
    return _ratio_db(tgt_energy, float(np.dot(err, err)))


def improvement(metric_estimate: float, metric_mixture: float) -> float:
    """Metric gain of the estimate over the unprocessed mixture (dB)."""
    return metric_estimate - metric_mixture


def score_separation(
    estimate: AudioSignal, mixture: AudioSignal, target: AudioSignal
) -> SeparationScore:
    si = si_sdr(estimate, target)
    sd = sdr(estimate, target)
    return SeparationScore(
        si_sdr=si,
        sdr=sd,
        si_sdri=improvement(si, si_sdr(mixture, target)),
        sdri=improvement(sd, sdr(mixture, target)),
    )


def read_wav(path) -> AudioSignal:
    """Read a mono RIFF WAV (PCM16 or IEEE float32)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise DspError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported sample format {data.dtype}")
    return AudioSignal(samples, int(rate))


def write_wav(path, signal: AudioSignal, encoding: str = "float32") -> None:
    """Write a mono WAV; encoding is 'float32' (default) or 'pcm16'."""
    if encoding == "float32":
        wavfile.write(path, signal.sample_rate, signal.samples.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(signal.samples, -1.0, 1.0 - 1.0 / 32768.0)
        wavfile.write(path, signal.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise DspError(f"unsupported encoding {encoding!r}")
