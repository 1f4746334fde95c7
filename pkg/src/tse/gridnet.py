"""Mapping separator over time-frequency grids.

Each block runs three residual stages on a (batch, channels, freq, frames)
grid: a full-band stage that models along frequency with a bidirectional
LSTM, a sub-band stage that models along time the same way, and a
frame-level self-attention stage. No mask is produced; the stack regresses
the target representation directly.
"""

import dataclasses
import math

import torch
import torch.nn as nn

from .frontends import TF, FeatureMap
from .fusion import _HeadProjection


@dataclasses.dataclass(frozen=True)
class GridBlockConfig:
    kernel: int = 1  # unfold kernel along the sequence axis
    stride: int = 1
    hidden: int = 256  # bidirectional LSTM width (per direction)
    attn_channels: int = 128
    heads: int = 4
    blocks: int = 6

    def __post_init__(self):
        if not (0 < self.stride <= self.kernel):
            raise ValueError(f"need 0 < stride <= kernel, got {self.stride}/{self.kernel}")
        if self.attn_channels % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide attn_channels ({self.attn_channels})"
            )
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")


def padded_length(size: int, kernel: int, stride: int) -> int:
    """Smallest length >= size that the (kernel, stride) unfold tiles exactly."""
    return math.ceil((size - kernel) / stride) * stride + kernel


@dataclasses.dataclass
class PaddedGrid:
    """Zero-padded grid plus the original (freq, frames) extents."""

    data: torch.Tensor
    orig_freq: int
    orig_frames: int


def pad_grid(features: FeatureMap, kernel: int, stride: int) -> PaddedGrid:
    if features.layout != TF:
        raise ValueError(f"grid ops need TF features, got {features.layout}")
    x = features.data
    f, l = x.shape[2], x.shape[3]
    fp = padded_length(f, kernel, stride)
    lp = padded_length(l, kernel, stride)
    x = torch.nn.functional.pad(x, (0, lp - l, 0, fp - f))
    return PaddedGrid(x, f, l)


def unpad_grid(grid: PaddedGrid, frame_rate: float = 0.0) -> FeatureMap:
    return FeatureMap(
        grid.data[:, :, : grid.orig_freq, : grid.orig_frames], TF, frame_rate
    )


class ChannelNorm(nn.Module):
    """Normalize across channels at every grid position, per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return self.weight * (x - mean) / torch.sqrt(var + self.eps) + self.bias


class SequenceModule(nn.Module):
    """Unfold -> BLSTM -> transposed conv along one axis of the grid.

    Input (batch', channels, steps) with steps already padded to the unfold
    tiling; output has identical shape so it can feed a residual add.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, stride: int):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.rnn = nn.LSTM(channels * kernel, hidden, batch_first=True, bidirectional=True)
        self.deconv = nn.ConvTranspose1d(2 * hidden, channels, kernel, stride=stride)

    def forward(self, x):
        windows = torch.nn.functional.unfold(
            x.unsqueeze(-1), (self.kernel, 1), stride=(self.stride, 1)
        )  # (N, C*kernel, windows)
        out, _ = self.rnn(windows.transpose(1, 2))
        return self.deconv(out.transpose(1, 2))


class CrossFrameAttention(nn.Module):
    """Multi-head self-attention over frames; tokens are flattened (channels, freq)."""

    def __init__(self, dim: int, config: GridBlockConfig):
        super().__init__()
        if dim % config.heads != 0:
            raise ValueError(f"heads ({config.heads}) must divide width ({dim})")
        self.heads = config.heads
        self.qk_dim = config.attn_channels // config.heads
        self.v_dim = dim // config.heads
        self.q = nn.ModuleList(
            _HeadProjection(dim, self.qk_dim) for _ in range(config.heads)
        )
        self.k = nn.ModuleList(
            _HeadProjection(dim, self.qk_dim) for _ in range(config.heads)
        )
        self.v = nn.ModuleList(
            _HeadProjection(dim, self.v_dim) for _ in range(config.heads)
        )
        self.proj = _HeadProjection(dim, dim)

    @staticmethod
    def _tokens(x):
        b, c, f, l = x.shape
        return x.permute(0, 3, 1, 2).reshape(b, l, c * f)

    def forward(self, x, return_weights=False):
        freq = x.shape[2]
        heads, maps = [], []
        for q_proj, k_proj, v_proj in zip(self.q, self.k, self.v):
            q = self._tokens(q_proj(x))
            k = self._tokens(k_proj(x))
            v = self._tokens(v_proj(x))
            weights = torch.softmax(
                torch.matmul(q, k.transpose(1, 2)) / math.sqrt(q.shape[-1]), dim=-1
            )
            if return_weights:
                maps.append(weights)
            out = torch.matmul(weights, v)
            b, l, _ = out.shape
            heads.append(out.reshape(b, l, self.v_dim, freq).permute(0, 2, 3, 1))
        out = x + self.proj(torch.cat(heads, dim=1))
        return (out, maps) if return_weights else out


class GridBlock(nn.Module):
    """Full-band stage, sub-band temporal stage, then cross-frame attention."""

    def __init__(self, dim: int, config: GridBlockConfig):
        super().__init__()
        self.config = config
        self.intra_norm = ChannelNorm(dim)
        self.intra = SequenceModule(dim, config.hidden, config.kernel, config.stride)
        self.sub_norm = ChannelNorm(dim)
        self.sub = SequenceModule(dim, config.hidden, config.kernel, config.stride)
        self.attn = CrossFrameAttention(dim, config)

    def intra_full_band(self, grid: PaddedGrid) -> PaddedGrid:
        x = grid.data
        b, c, fp, lp = x.shape
        n = self.intra_norm(x)
        seq = n.permute(0, 3, 1, 2).reshape(b * lp, c, fp)
        out = self.intra(seq).reshape(b, lp, c, fp).permute(0, 2, 3, 1)
        return PaddedGrid(x + out, grid.orig_freq, grid.orig_frames)

    def sub_band_temporal(self, grid: PaddedGrid) -> PaddedGrid:
        x = grid.data
        b, c, fp, lp = x.shape
        n = self.sub_norm(x)
        seq = n.permute(0, 2, 1, 3).reshape(b * fp, c, lp)
        out = self.sub(seq).reshape(b, fp, c, lp).permute(0, 2, 1, 3)
        return PaddedGrid(x + out, grid.orig_freq, grid.orig_frames)

    def forward(self, features: FeatureMap) -> FeatureMap:
        grid = pad_grid(features, self.config.kernel, self.config.stride)
        grid = self.intra_full_band(grid)
        grid = self.sub_band_temporal(grid)
        x = unpad_grid(grid, features.frame_rate)
        return FeatureMap(self.attn(x.data), TF, features.frame_rate)


class GridSeparator(nn.Module):
    """Stack of grid blocks; with zero blocks it is the identity map."""

    def __init__(self, dim: int, config: GridBlockConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(GridBlock(dim, config) for _ in range(config.blocks))

    def forward(self, features: FeatureMap) -> FeatureMap:
        if features.layout != TF:
            raise ValueError(f"grid separator needs TF features, got {features.layout}")
        out = features
        for block in self.blocks:
            out = block(out)
        return out
