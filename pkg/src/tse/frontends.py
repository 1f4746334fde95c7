"""Shared encoder/decoder pairs for both model families.

The time-domain pair is a learned filterbank (strided Conv1d with ReLU,
transposed Conv1d back). The T-F pair lifts the stacked real/imaginary STFT
channels with a 3x3 Conv2d and projects back to 2 channels before the iSTFT.
One frontend instance serves both the mixture and the reference path, so
weight sharing holds by construction.
"""

import dataclasses

import torch
import torch.nn as nn

from .dsp import DspError, StftConfig, make_window

TIME = "time"
TF = "tf"


@dataclasses.dataclass
class FeatureMap:
    """Learned representation plus its layout tag.

    data is (batch, channels, frames) for TIME and
    (batch, channels, freq, frames) for TF.
    """

    data: torch.Tensor
    layout: str
    frame_rate: float

    def __post_init__(self):
        if self.layout == TIME:
            if self.data.ndim != 3:
                raise ValueError(f"TIME layout needs 3-D data, got {tuple(self.data.shape)}")
        elif self.layout == TF:
            if self.data.ndim != 4:
                raise ValueError(f"TF layout needs 4-D data, got {tuple(self.data.shape)}")
        else:
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[-1]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def check_same_layout(a: FeatureMap, b: FeatureMap) -> None:
    if a.layout != b.layout:
        raise ValueError(f"layout mismatch: {a.layout} vs {b.layout}")
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")


@dataclasses.dataclass(frozen=True)
class TimeFrontendConfig:
    kernel: int = 16
    stride: int = 8
    channels: int = 256

    def __post_init__(self):
        if not (0 < self.stride <= self.kernel):
            raise ValueError(f"need 0 < stride <= kernel, got {self.stride}/{self.kernel}")
        if self.channels < 1:
            raise ValueError("channels must be positive")

    def num_frames(self, length: int) -> int:
        if length < self.kernel:
            raise DspError(f"signal of {length} samples shorter than kernel {self.kernel}")
        return (length - self.kernel) // self.stride + 1


@dataclasses.dataclass(frozen=True)
class TfFrontendConfig:
    stft: StftConfig = StftConfig(128, 64, 128)
    conv_kernel: int = 3
    channels: int = 128
    decoder_channels: int = 256

    def __post_init__(self):
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd for same padding")


class TimeFrontend(nn.Module):
    """Learned filterbank: x -> ReLU(Conv1d(x)); inverse is a transposed conv."""

    def __init__(self, config: TimeFrontendConfig):
        super().__init__()
        self.config = config
        self.conv = nn.Conv1d(1, config.channels, config.kernel, stride=config.stride)
        self.deconv = nn.ConvTranspose1d(
            config.channels, 1, config.kernel, stride=config.stride
        )

    def encode(self, wave: torch.Tensor, sample_rate: float = 8000.0) -> FeatureMap:
        if wave.ndim != 2:
            raise ValueError(f"expected (batch, samples), got {tuple(wave.shape)}")
        if wave.shape[-1] < self.config.kernel:
            raise DspError(
                f"signal of {wave.shape[-1]} samples shorter than kernel {self.config.kernel}"
            )
        feats = torch.relu(self.conv(wave.unsqueeze(1)))
        return FeatureMap(feats, TIME, sample_rate / self.config.stride)

    def decode(self, features: FeatureMap, length: int) -> torch.Tensor:
        if features.layout != TIME:
            raise ValueError(f"expected TIME features, got {features.layout}")
        wave = self.deconv(features.data).squeeze(1)
        if wave.shape[-1] < length:
            wave = torch.nn.functional.pad(wave, (0, length - wave.shape[-1]))
        return wave[..., :length]


class TfFrontend(nn.Module):
    """Complex STFT channel lift: RI-stacked spectrogram -> C channels and back."""

    def __init__(self, config: TfFrontendConfig):
        super().__init__()
        self.config = config
        pad = config.conv_kernel // 2
        self.conv = nn.Conv2d(2, config.channels, config.conv_kernel, padding=pad, bias=False)
        self.deconv = nn.ConvTranspose2d(
            config.decoder_channels, 2, config.conv_kernel, padding=pad
        )
        window = torch.from_numpy(
            make_window(config.stft.window, config.stft.win_length)
        ).float()
        self.register_buffer("window", window, persistent=False)

    def _stft(self, wave: torch.Tensor) -> torch.Tensor:
        cfg = self.config.stft
        spec = torch.stft(
            wave,
            n_fft=cfg.fft_size,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window=self.window,
            center=cfg.center,
            pad_mode="reflect",
            return_complex=True,
        )
        # (B, F, L) complex -> (B, 2, F, L) real
        return torch.stack([spec.real, spec.imag], dim=1)

    def encode(self, wave: torch.Tensor, sample_rate: float = 8000.0) -> FeatureMap:
        if wave.ndim != 2:
            raise ValueError(f"expected (batch, samples), got {tuple(wave.shape)}")
        ri = self._stft(wave)
        return FeatureMap(self.conv(ri), TF, sample_rate / self.config.stft.hop_length)

    def decode(self, features: FeatureMap, length: int) -> torch.Tensor:
        if features.layout != TF:
            raise ValueError(f"expected TF features, got {features.layout}")
        if features.channels != self.config.decoder_channels:
            raise ValueError(
                f"decoder expects {self.config.decoder_channels} channels,"
                f" got {features.channels}"
            )
        ri = self.deconv(features.data)
        spec = torch.complex(ri[:, 0], ri[:, 1])
        cfg = self.config.stft
        return torch.istft(
            spec,
            n_fft=cfg.fft_size,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window=self.window,
            center=cfg.center,
            length=length,
        )
