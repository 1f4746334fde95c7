"""Cross-attention reference conditioning and feature fusion.

The mixture encoding supplies queries, the reference encoding supplies keys
and values, so the conditioned output always has the mixture's frame count
regardless of the reference length. Two block styles cover the two model
families: a transformer-encoder style for (batch, channels, frames) features
and a grid-attention style for (batch, channels, freq, frames) features.
Fusion of the conditioned features back into the mixture stream is either
feature-wise linear modulation or channel concatenation.
"""

import dataclasses
import math

import torch
import torch.nn as nn

from .frontends import TF, TIME, FeatureMap, check_same_layout

TIME_TRANSFORMER = "time_transformer"
TF_GRID_ATTENTION = "tf_grid_attention"


@dataclasses.dataclass(frozen=True)
class CmhaConfig:
    layers: int
    heads: int
    ffn_dim: int
    model_dim: int
    style: str = TIME_TRANSFORMER
    attn_channels: int = 0  # TF style query/key width; 0 means model_dim
    query_pos_encoding: bool = True

    def __post_init__(self):
        if self.style not in (TIME_TRANSFORMER, TF_GRID_ATTENTION):
            raise ValueError(f"unknown attention style {self.style!r}")
        qk = self.attn_channels or self.model_dim
        if qk % self.heads != 0 or self.model_dim % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide model_dim ({self.model_dim})"
                f" and attn_channels ({qk})"
            )
        if self.layers < 1:
            raise ValueError("need at least one layer")


def sinusoidal_encoding(length: int, dim: int, device=None) -> torch.Tensor:
    """Standard fixed sin/cos position table, shape (length, dim)."""
    position = torch.arange(length, device=device).unsqueeze(1).float()
    div = torch.exp(
        torch.arange(0, dim, 2, device=device).float() * (-math.log(10000.0) / dim)
    )
    pe = torch.zeros(length, dim, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return pe


class CrossAttentionBlock(nn.Module):
    """Pre-norm transformer block with cross-attention instead of self-attention.

    Keys and values come straight from the (un-normalized, un-encoded)
    reference stream, which keeps the block exactly permutation-invariant in
    the reference frame order.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim)
        )

    def forward(self, query, reference, query_pos=None, return_weights=False):
        q = self.norm_q(query)
        if query_pos is not None:
            q = q + query_pos
        attn_out, weights = self.attn(
            q, reference, reference, need_weights=return_weights
        )
        x = query + attn_out
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


class TimeCrossAttention(nn.Module):
    """Stacked cross-attention blocks over (batch, channels, frames) features."""

    def __init__(self, config: CmhaConfig):
        super().__init__()
        if config.style != TIME_TRANSFORMER:
            raise ValueError("TimeCrossAttention requires the time_transformer style")
        self.config = config
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(config.model_dim, config.heads, config.ffn_dim)
            for _ in range(config.layers)
        )

    def forward(self, mixture: FeatureMap, reference: FeatureMap, return_weights=False):
        check_same_layout(mixture, reference)
        if mixture.layout != TIME:
            raise ValueError("time-style attention needs TIME features")
        x = mixture.data.transpose(1, 2)  # (B, L1, D)
        r = reference.data.transpose(1, 2)  # (B, L2, D)
        pos = None
        if self.config.query_pos_encoding:
            pos = sinusoidal_encoding(x.shape[1], x.shape[2], x.device)
        maps = []
        for block in self.blocks:
            x, w = block(x, r, pos, return_weights)
            if return_weights:
                maps.append(w)
        out = FeatureMap(x.transpose(1, 2), TIME, mixture.frame_rate)
        return (out, maps) if return_weights else out


class _HeadProjection(nn.Module):
    """1x1 conv + PReLU + per-channel norm, the grid-attention projection stack."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.act = nn.PReLU()
        self.norm = nn.GroupNorm(out_ch, out_ch, eps=1e-5)

    def forward(self, x):
        return self.norm(self.act(self.conv(x)))


class GridCrossAttention(nn.Module):
    """Cross-attention over frames of a (batch, channels, freq, frames) grid.

    Each frame is scored as one token whose content is the flattened
    (channels x freq) slice, so conditioning aligns reference frames to
    mixture frames while full-band structure rides along in the values.
    """

    def __init__(self, config: CmhaConfig):
        super().__init__()
        if config.style != TF_GRID_ATTENTION:
            raise ValueError("GridCrossAttention requires the tf_grid_attention style")
        self.config = config
        d = config.model_dim
        e = config.attn_channels or d
        self.qk_dim = e // config.heads
        self.v_dim = d // config.heads
        layers = []
        for _ in range(config.layers):
            layers.append(
                nn.ModuleDict(
                    {
                        "q": nn.ModuleList(
                            _HeadProjection(d, self.qk_dim) for _ in range(config.heads)
                        ),
                        "k": nn.ModuleList(
                            _HeadProjection(d, self.qk_dim) for _ in range(config.heads)
                        ),
                        "v": nn.ModuleList(
                            _HeadProjection(d, self.v_dim) for _ in range(config.heads)
                        ),
                        "proj": _HeadProjection(d, d),
                        "ffn": nn.Sequential(
                            nn.Conv2d(d, config.ffn_dim, 1),
                            nn.PReLU(),
                            nn.Conv2d(config.ffn_dim, d, 1),
                        ),
                    }
                )
            )
        self.layers = nn.ModuleList(layers)

    @staticmethod
    def _tokens(x):
        # (B, C, F, L) -> (B, L, C*F)
        b, c, f, l = x.shape
        return x.permute(0, 3, 1, 2).reshape(b, l, c * f)

    def forward(self, mixture: FeatureMap, reference: FeatureMap, return_weights=False):
        check_same_layout(mixture, reference)
        if mixture.layout != TF:
            raise ValueError("grid attention needs TF features")
        x, r = mixture.data, reference.data
        freq = x.shape[2]
        if r.shape[2] != freq:
            raise ValueError(f"frequency mismatch: {freq} vs {r.shape[2]}")
        maps = []
        for layer in self.layers:
            heads = []
            layer_maps = []
            for q_proj, k_proj, v_proj in zip(layer["q"], layer["k"], layer["v"]):
                q = self._tokens(q_proj(x))  # (B, L1, qk*F)
                k = self._tokens(k_proj(r))  # (B, L2, qk*F)
                v = self._tokens(v_proj(r))  # (B, L2, v*F)
                scores = torch.matmul(q, k.transpose(1, 2)) / math.sqrt(q.shape[-1])
                weights = torch.softmax(scores, dim=-1)
                if return_weights:
                    layer_maps.append(weights)
                out = torch.matmul(weights, v)  # (B, L1, v*F)
                b, l1, _ = out.shape
                heads.append(
                    out.reshape(b, l1, self.v_dim, freq).permute(0, 2, 3, 1)
                )
            merged = torch.cat(heads, dim=1)  # (B, D, F, L1)
            x = x + layer["proj"](merged)
            x = x + layer["ffn"](x)
            if return_weights:
                maps.append(layer_maps)
        out = FeatureMap(x, TF, mixture.frame_rate)
        return (out, maps) if return_weights else out


def build_cross_attention(config: CmhaConfig) -> nn.Module:
    if config.style == TIME_TRANSFORMER:
        return TimeCrossAttention(config)
    return GridCrossAttention(config)


FILM = "film"
CONCAT = "concat"


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    method: str
    dim: int
    layout: str = TIME

    def __post_init__(self):
        if self.method not in (FILM, CONCAT):
            raise ValueError(f"unknown fusion method {self.method!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.layout not in (TIME, TF):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def output_dim(self) -> int:
        return self.dim if self.method == FILM else 2 * self.dim


class FilmFusion(nn.Module):
    """gamma(conditioner) * features + beta(conditioner), channel-wise affine maps."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        conv = nn.Conv1d if config.layout == TIME else nn.Conv2d
        self.scale = conv(config.dim, config.dim, 1)
        self.shift = conv(config.dim, config.dim, 1)

    def forward(self, features: FeatureMap, conditioner: FeatureMap) -> FeatureMap:
        check_same_layout(features, conditioner)
        if features.layout != self.config.layout:
            raise ValueError(
                f"fusion built for {self.config.layout} features, got {features.layout}"
            )
        if features.data.shape != conditioner.data.shape:
            raise ValueError(
                f"shape mismatch: {tuple(features.data.shape)}"
                f" vs {tuple(conditioner.data.shape)}"
            )
        fused = self.scale(conditioner.data) * features.data + self.shift(conditioner.data)
        return FeatureMap(fused, features.layout, features.frame_rate)


class ConcatFusion(nn.Module):
    """Channel concatenation; doubles the feature width."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config

    def forward(self, features: FeatureMap, conditioner: FeatureMap) -> FeatureMap:
        check_same_layout(features, conditioner)
        if features.data.shape != conditioner.data.shape:
            raise ValueError(
                f"shape mismatch: {tuple(features.data.shape)}"
                f" vs {tuple(conditioner.data.shape)}"
            )
        fused = torch.cat([features.data, conditioner.data], dim=1)
        return FeatureMap(fused, features.layout, features.frame_rate)


def build_fusion(config: FusionConfig) -> nn.Module:
    return FilmFusion(config) if config.method == FILM else ConcatFusion(config)
