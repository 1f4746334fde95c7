"""End-to-end extractors, configuration serialization, parameter accounting,
and checkpoint IO.

Three families share the encoder / condition / fuse / separate / decode
pipeline:
  time_sepformer  - learned filterbank, cross-attention conditioning, dual-path
                    transformer separator, multiplicative mask before decoding.
  tf_gridnet      - STFT channel lift, grid-style cross-attention, stacked grid
                    blocks, direct mapping (no mask) before the iSTFT decoder.
  pooled_baseline - time pipeline whose conditioner is a mean-pooled reference
                    embedding broadcast over mixture frames (the conventional
                    fixed-embedding topology, kept for ablations).
"""

import dataclasses
import hashlib
import io
import json
import zipfile

import numpy as np
import torch
import torch.nn as nn

from .dsp import AudioSignal, DspError, StftConfig
from .dualpath import DualPath, GlobalLayerNorm, MaskHead, SepformerConfig, segment
from .frontends import (
    TF,
    TIME,
    FeatureMap,
    TfFrontend,
    TfFrontendConfig,
    TimeFrontend,
    TimeFrontendConfig,
)
from .fusion import (
    CONCAT,
    FILM,
    TF_GRID_ATTENTION,
    TIME_TRANSFORMER,
    CmhaConfig,
    FusionConfig,
    build_cross_attention,
    build_fusion,
)
from .gridnet import GridBlockConfig, GridSeparator

TIME_SEPFORMER = "time_sepformer"
TF_GRIDNET = "tf_gridnet"
POOLED_BASELINE = "pooled_baseline"

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or config-mismatched checkpoint file."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    family: str
    sample_rate: int = 8000
    seed: int = 0
    time_frontend: TimeFrontendConfig | None = None
    tf_frontend: TfFrontendConfig | None = None
    cmha: CmhaConfig | None = None
    fusion: FusionConfig | None = None
    sepformer: SepformerConfig | None = None
    gridnet: GridBlockConfig | None = None

    def __post_init__(self):
        if self.family in (TIME_SEPFORMER, POOLED_BASELINE):
            if self.time_frontend is None or self.sepformer is None:
                raise ValueError(f"{self.family} needs time_frontend and sepformer configs")
            if self.tf_frontend is not None or self.gridnet is not None:
                raise ValueError(f"{self.family} cannot carry T-F configs")
            if self.fusion is None or self.fusion.layout != TIME:
                raise ValueError(f"{self.family} needs a TIME-layout fusion config")
            if self.fusion.dim != self.time_frontend.channels:
                raise ValueError(
                    f"fusion dim {self.fusion.dim} != encoder channels"
                    f" {self.time_frontend.channels}"
                )
            if self.family == TIME_SEPFORMER:
                if self.cmha is None or self.cmha.style != TIME_TRANSFORMER:
                    raise ValueError("time_sepformer needs a time_transformer cmha config")
                if self.cmha.model_dim != self.time_frontend.channels:
                    raise ValueError("cmha model_dim must match encoder channels")
        elif self.family == TF_GRIDNET:
            if self.tf_frontend is None or self.gridnet is None:
                raise ValueError("tf_gridnet needs tf_frontend and gridnet configs")
            if self.time_frontend is not None or self.sepformer is not None:
                raise ValueError("tf_gridnet cannot carry time-domain configs")
            if self.cmha is None or self.cmha.style != TF_GRID_ATTENTION:
                raise ValueError("tf_gridnet needs a tf_grid_attention cmha config")
            if self.fusion is None or self.fusion.layout != TF:
                raise ValueError("tf_gridnet needs a TF-layout fusion config")
            if self.fusion.dim != self.tf_frontend.channels:
                raise ValueError("fusion dim must match encoder channels")
            if self.cmha.model_dim != self.tf_frontend.channels:
                raise ValueError("cmha model_dim must match encoder channels")
            if self.tf_frontend.decoder_channels != self.fusion.output_dim:
                raise ValueError(
                    f"decoder expects {self.tf_frontend.decoder_channels} channels but"
                    f" fusion produces {self.fusion.output_dim}"
                )
        else:
            raise ValueError(f"unknown family {self.family!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        def sub(cls, value, **nested):
            if value is None:
                return None
            value = dict(value)
            for key, inner_cls in nested.items():
                if value.get(key) is not None:
                    value[key] = inner_cls(**value[key])
            return cls(**value)

        return ModelConfig(
            family=raw["family"],
            sample_rate=raw.get("sample_rate", 8000),
            seed=raw.get("seed", 0),
            time_frontend=sub(TimeFrontendConfig, raw.get("time_frontend")),
            tf_frontend=sub(TfFrontendConfig, raw.get("tf_frontend"), stft=StftConfig),
            cmha=sub(CmhaConfig, raw.get("cmha")),
            fusion=sub(FusionConfig, raw.get("fusion")),
            sepformer=sub(SepformerConfig, raw.get("sepformer")),
            gridnet=sub(GridBlockConfig, raw.get("gridnet")),
        )

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig.from_dict(json.loads(text))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


class PooledConditioner(nn.Module):
    """Mean-pool the reference encoding into one vector, map it, broadcast it."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim)

    def forward(self, mixture: FeatureMap, reference: FeatureMap) -> FeatureMap:
        pooled = reference.data.mean(dim=-1)  # (B, N)
        emb = self.proj(pooled).unsqueeze(-1).expand_as(mixture.data)
        return FeatureMap(emb, TIME, mixture.frame_rate)


class TimeDomainExtractor(nn.Module):
    """Masking pipeline over a learned filterbank."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frontend = TimeFrontend(config.time_frontend)
        if config.family == POOLED_BASELINE:
            self.conditioner = PooledConditioner(config.time_frontend.channels)
        else:
            self.conditioner = build_cross_attention(config.cmha)
        self.fusion = build_fusion(config.fusion)
        width = config.fusion.output_dim
        self.norm = GlobalLayerNorm(width)
        self.bottleneck = nn.Conv1d(width, config.sepformer.dim, 1, bias=False)
        self.separator = DualPath(config.sepformer)
        self.mask_head = MaskHead(config.sepformer.dim, config.time_frontend.channels)

    def forward(self, mixture: torch.Tensor, reference: torch.Tensor,
                return_internals: bool = False):
        rate = float(self.config.sample_rate)
        e_m = self.frontend.encode(mixture, rate)
        e_r = self.frontend.encode(reference, rate)
        e_spk = self.conditioner(e_m, e_r)
        fused = self.fusion(e_m, e_spk)
        x = self.bottleneck(self.norm(fused.data))
        chunks = segment(
            FeatureMap(x, TIME, e_m.frame_rate), self.config.sepformer.chunk_len
        )
        mask = self.mask_head(self.separator(chunks), e_m.frame_rate)
        masked = FeatureMap(e_m.data * mask.data, TIME, e_m.frame_rate)
        estimate = self.frontend.decode(masked, mixture.shape[-1])
        if return_internals:
            return estimate, {"mask": mask.data, "masked": masked.data}
        return estimate


class TfExtractor(nn.Module):
    """Mapping pipeline over complex STFT features; no mask is applied."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frontend = TfFrontend(config.tf_frontend)
        self.conditioner = build_cross_attention(config.cmha)
        self.fusion = build_fusion(config.fusion)
        self.separator = GridSeparator(config.fusion.output_dim, config.gridnet)

    @staticmethod
    def _scale(wave: torch.Tensor) -> torch.Tensor:
        return wave.std(dim=-1, keepdim=True).clamp_min(1e-8)

    def forward(self, mixture: torch.Tensor, reference: torch.Tensor,
                return_internals: bool = False):
        rate = float(self.config.sample_rate)
        scale = self._scale(mixture)
        e_m = self.frontend.encode(mixture / scale, rate)
        e_r = self.frontend.encode(reference / self._scale(reference), rate)
        e_spk = self.conditioner(e_m, e_r)
        fused = self.fusion(e_m, e_spk)
        e_o = self.separator(fused)
        estimate = self.frontend.decode(e_o, mixture.shape[-1]) * scale
        if return_internals:
            return estimate, {"separator_output": e_o.data}
        return estimate


def build(config: ModelConfig) -> nn.Module:
    """Instantiate a model with seeded initialization."""
    torch.manual_seed(config.seed)
    if config.family == TF_GRIDNET:
        return TfExtractor(config)
    return TimeDomainExtractor(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def extract(model: nn.Module, mixture: AudioSignal, reference: AudioSignal) -> AudioSignal:
    """Run one extraction; deterministic given weights and inputs."""
    rate = model.config.sample_rate
    if mixture.sample_rate != rate or reference.sample_rate != rate:
        raise DspError(
            f"model expects {rate} Hz, got mixture {mixture.sample_rate} Hz"
            f" / reference {reference.sample_rate} Hz"
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mix = torch.from_numpy(mixture.samples).float().unsqueeze(0)
            ref = torch.from_numpy(reference.samples).float().unsqueeze(0)
            est = model(mix, ref)
    finally:
        model.train(was_training)
    return AudioSignal(est.squeeze(0).numpy().astype(np.float64), rate)


def _flatten_optimizer(optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into arrays and JSON-able structure."""
    state = optimizer.state_dict()
    arrays = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                arrays[f"opt/{idx}/{key}"] = value.detach().cpu().numpy()
            else:
                arrays[f"opt/{idx}/{key}"] = np.asarray(value)
    meta = {"param_groups": state["param_groups"], "state_keys": {
        str(idx): sorted(entry.keys()) for idx, entry in state["state"].items()
    }}
    return arrays, meta


def save_checkpoint(path, model: nn.Module, step: int = 0, optimizer=None,
                    extra: dict | None = None) -> None:
    """Write named weight arrays plus a JSON header to a single npz archive."""
    arrays = {
        f"param/{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "digest": model.config.digest(),
        "step": int(step),
        "config": model.config.to_dict(),
        "extra": extra or {},
    }
    if optimizer is not None:
        opt_arrays, opt_meta = _flatten_optimizer(optimizer)
        arrays.update(opt_arrays)
        meta["optimizer"] = opt_meta
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Load raw arrays and the parsed header, with corruption diagnostics."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no header")
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} header is corrupt: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {meta.get('format_version')!r}"
        )
    return arrays, meta


def load_checkpoint(path, model: nn.Module, optimizer=None) -> dict:
    """Restore weights (and optionally optimizer state) after verifying the digest."""
    arrays, meta = read_checkpoint(path)
    if meta["digest"] != model.config.digest():
        raise CheckpointError(
            f"checkpoint {path} was written for a different config"
            f" (digest {meta['digest'][:12]}..., model {model.config.digest()[:12]}...)"
        )
    reference = model.state_dict()
    state = {}
    for name, tensor in reference.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint {path} is missing array {name}")
        state[name] = torch.from_numpy(arrays[key].copy()).to(tensor.dtype)
    model.load_state_dict(state)
    if optimizer is not None:
        if "optimizer" not in meta:
            raise CheckpointError(f"checkpoint {path} carries no optimizer state")
        opt_state = {"param_groups": meta["optimizer"]["param_groups"], "state": {}}
        for idx, keys in meta["optimizer"]["state_keys"].items():
            entry = {}
            for key in keys:
                entry[key] = torch.from_numpy(arrays[f"opt/{idx}/{key}"].copy())
            opt_state["state"][int(idx)] = entry
        optimizer.load_state_dict(opt_state)
    if "rng/torch" in arrays:
        torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    return meta


# ---------------------------------------------------------------------------
# Config factories


def full_time_config(cmha_layers: int = 4, fusion: str = FILM, seed: int = 0) -> ModelConfig:
    """Full-scale time-domain model (256-channel filterbank, dual-path R=2)."""
    return ModelConfig(
        family=TIME_SEPFORMER,
        seed=seed,
        time_frontend=TimeFrontendConfig(16, 8, 256),
        cmha=CmhaConfig(cmha_layers, 8, 1024, 256),
        fusion=FusionConfig(fusion, 256, layout=TIME),
        sepformer=SepformerConfig(250, 8, 8, 1024, 2, 256),
    )


def full_tf_config(unfold_kernel: int = 1, attn_channels: int = 128,
                   fusion: str = CONCAT, seed: int = 0) -> ModelConfig:
    """Full-scale T-F model (128-channel lift, 6 grid blocks)."""
    width = FusionConfig(fusion, 128, layout=TF).output_dim
    return ModelConfig(
        family=TF_GRIDNET,
        seed=seed,
        tf_frontend=TfFrontendConfig(StftConfig(128, 64, 128), 3, 128, width),
        cmha=CmhaConfig(1, 4, 512, 128, style=TF_GRID_ATTENTION, attn_channels=attn_channels),
        fusion=FusionConfig(fusion, 128, layout=TF),
        gridnet=GridBlockConfig(unfold_kernel, 1, 256, attn_channels, 4, 6),
    )


def tiny_time_config(fusion: str = FILM, seed: int = 0) -> ModelConfig:
    """Desk-scale time-domain model for overfit and smoke experiments."""
    return ModelConfig(
        family=TIME_SEPFORMER,
        seed=seed,
        time_frontend=TimeFrontendConfig(16, 8, 64),
        cmha=CmhaConfig(1, 4, 128, 64),
        fusion=FusionConfig(fusion, 64, layout=TIME),
        sepformer=SepformerConfig(50, 2, 4, 128, 1, 64),
    )


def tiny_tf_config(fusion: str = CONCAT, seed: int = 0) -> ModelConfig:
    """Desk-scale T-F model for overfit and smoke experiments."""
    width = FusionConfig(fusion, 16, layout=TF).output_dim
    return ModelConfig(
        family=TF_GRIDNET,
        seed=seed,
        tf_frontend=TfFrontendConfig(StftConfig(128, 64, 128), 3, 16, width),
        cmha=CmhaConfig(1, 2, 32, 16, style=TF_GRID_ATTENTION, attn_channels=16),
        fusion=FusionConfig(fusion, 16, layout=TF),
        gridnet=GridBlockConfig(1, 1, 32, 16, 2, 2),
    )


def baseline_config(seed: int = 0) -> ModelConfig:
    """Pooled-embedding conditioning over the tiny time-domain pipeline."""
    return ModelConfig(
        family=POOLED_BASELINE,
        seed=seed,
        time_frontend=TimeFrontendConfig(16, 8, 64),
        fusion=FusionConfig(FILM, 64, layout=TIME),
        sepformer=SepformerConfig(50, 2, 4, 128, 1, 64),
    )
