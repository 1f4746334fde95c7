"""Dual-path masking separator: chunking, intra/inter-chunk transformers, mask head.

Long feature sequences are split into 50%-overlapping chunks; transformers
alternate between modeling within a chunk and across chunks, repeated R
times. Overlap-add plus a rectified head turns the result into a
non-negative mask over the mixture encoding.
"""

import dataclasses

import torch
import torch.nn as nn

from .frontends import TIME, FeatureMap
from .fusion import sinusoidal_encoding


@dataclasses.dataclass
class ChunkedFeature:
    """(batch, channels, chunk_len, num_chunks) grid plus inversion bookkeeping."""

    data: torch.Tensor
    chunk_len: int
    hop: int
    orig_frames: int

    @property
    def num_chunks(self) -> int:
        return self.data.shape[-1]


@dataclasses.dataclass(frozen=True)
class SepformerConfig:
    chunk_len: int = 250
    layers: int = 8
    heads: int = 8
    ffn_dim: int = 1024
    repeats: int = 2
    dim: int = 256

    def __post_init__(self):
        if self.chunk_len < 2:
            raise ValueError(f"chunk_len must be >= 2, got {self.chunk_len}")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")

    @property
    def hop(self) -> int:
        return self.chunk_len // 2


class GlobalLayerNorm(nn.Module):
    """Normalize over channels and frames jointly, learned per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return self.weight * (x - mean) / torch.sqrt(var + self.eps) + self.bias


def segment(features: FeatureMap, chunk_len: int, hop: int = 0) -> ChunkedFeature:
    """Split (batch, channels, frames) into overlapping chunks, zero-padding the tail."""
    if features.layout != TIME:
        raise ValueError(f"segmentation needs TIME features, got {features.layout}")
    if chunk_len < 2:
        raise ValueError(f"chunk_len must be >= 2, got {chunk_len}")
    hop = hop or chunk_len // 2
    x = features.data
    frames = x.shape[-1]
    if frames < chunk_len:
        pad = chunk_len - frames
    else:
        remainder = (frames - chunk_len) % hop
        pad = (hop - remainder) % hop
    x = torch.nn.functional.pad(x, (0, pad))
    chunks = x.unfold(-1, chunk_len, hop)  # (B, C, S, K)
    return ChunkedFeature(chunks.permute(0, 1, 3, 2).contiguous(), chunk_len, hop, frames)


def overlap_add(chunks: ChunkedFeature, frame_rate: float = 0.0) -> FeatureMap:
    """Invert `segment`, averaging overlapped positions so the round trip is exact."""
    b, c, k, s = chunks.data.shape
    total = (s - 1) * chunks.hop + k
    folded = torch.nn.functional.fold(
        chunks.data.reshape(b, c * k, s),
        output_size=(1, total),
        kernel_size=(1, k),
        stride=(1, chunks.hop),
    ).squeeze(2)  # (B, C, total)
    ones = torch.ones(1, k, s, device=chunks.data.device, dtype=chunks.data.dtype)
    counts = torch.nn.functional.fold(
        ones.reshape(1, k, s), output_size=(1, total), kernel_size=(1, k),
        stride=(1, chunks.hop),
    ).squeeze(2)
    out = folded / counts
    return FeatureMap(out[..., : chunks.orig_frames], TIME, frame_rate)


class _TransformerBranch(nn.Module):
    """Positional encoding + transformer encoder + terminal projection.

    The terminal linear lets the whole branch collapse to an exact zero
    contribution when its weights are zeroed, which keeps the surrounding
    residual an identity.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, layers: int):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim_feedforward=ffn_dim, dropout=0.0,
            batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (batch', seq, dim)
        pe = sinusoidal_encoding(x.shape[1], x.shape[2], x.device).to(x.dtype)
        return self.proj(self.encoder(x + pe))


class DualPath(nn.Module):
    """R repeats of residual intra-chunk and inter-chunk transformer passes."""

    def __init__(self, config: SepformerConfig):
        super().__init__()
        self.config = config
        self.intra = nn.ModuleList(
            _TransformerBranch(config.dim, config.heads, config.ffn_dim, config.layers)
            for _ in range(config.repeats)
        )
        self.inter = nn.ModuleList(
            _TransformerBranch(config.dim, config.heads, config.ffn_dim, config.layers)
            for _ in range(config.repeats)
        )

    def forward(self, chunks: ChunkedFeature) -> ChunkedFeature:
        x = chunks.data  # (B, C, K, S)
        b, c, k, s = x.shape
        for intra, inter in zip(self.intra, self.inter):
            # within-chunk pass: each chunk is a length-K sequence
            seq = x.permute(0, 3, 2, 1).reshape(b * s, k, c)
            x = x + intra(seq).reshape(b, s, k, c).permute(0, 3, 2, 1)
            # across-chunk pass: each chunk position is a length-S sequence
            seq = x.permute(0, 2, 3, 1).reshape(b * k, s, c)
            x = x + inter(seq).reshape(b, k, s, c).permute(0, 3, 1, 2)
        return ChunkedFeature(x, chunks.chunk_len, chunks.hop, chunks.orig_frames)


class MaskHead(nn.Module):
    """Overlap-add then a rectified pointwise map producing a non-negative mask."""

    def __init__(self, dim: int, out_channels: int):
        super().__init__()
        self.act = nn.PReLU()
        self.proj = nn.Conv1d(dim, out_channels, 1, bias=False)

    def forward(self, chunks: ChunkedFeature, frame_rate: float = 0.0) -> FeatureMap:
        merged = overlap_add(chunks, frame_rate)
        mask = torch.relu(self.proj(self.act(merged.data)))
        return FeatureMap(mask, TIME, frame_rate)
