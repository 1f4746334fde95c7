"""Training loop: negative SI-SDR objective, plateau LR halving, 4 s crops,
per-epoch reference resampling, deterministic resume.

Batches average per-example losses instead of padding to a common length, so
arbitrary-length clips train without masking bookkeeping. Every random
choice (shuffle order, crop offsets, reference assignment) derives from
(seed, epoch, example index), which makes a resumed run reproduce an
uninterrupted one exactly.
"""

import dataclasses
import json
import pathlib
import time

import numpy as np
import torch

from . import datagen
from .dsp import DB_CLAMP, read_wav
from .models import load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/step where it happened."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    plateau_patience: int = 3
    lr_factor: float = 0.5
    segment_seconds: float = 4.0
    batch_size: int = 2
    max_epochs: int = 10
    grad_clip: float = 5.0  # 0 disables clipping
    seed: int = 0


def si_sdr_loss(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative scale-invariant SDR in dB, clamped to +-80, batched over dim 0."""
    if estimate.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(estimate.shape)} vs {tuple(target.shape)}")
    target_energy = (target * target).sum(dim=-1, keepdim=True)
    if (target_energy == 0).any():
        raise ValueError("target has zero energy")
    scale = (estimate * target).sum(dim=-1, keepdim=True) / target_energy
    projection = scale * target
    residual = estimate - projection
    num = (projection * projection).sum(dim=-1)
    den = (residual * residual).sum(dim=-1)
    ratio_db = 10.0 * torch.log10((num + 1e-30) / (den + 1e-30))
    return -ratio_db.clamp(-DB_CLAMP, DB_CLAMP).mean()


def crop_offset(length: int, segment: int, example_index: int, epoch: int,
                seed: int) -> int:
    """Deterministic crop start for (example, epoch, seed)."""
    if length <= segment:
        return 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, example_index]))
    return int(rng.integers(0, length - segment + 1))


def truncate_segment(mixture: np.ndarray, target: np.ndarray, segment: int,
                     example_index: int, epoch: int, seed: int):
    """Aligned random crop of mixture and target; shorter clips pass through."""
    if mixture.shape != target.shape:
        raise ValueError("mixture/target length mismatch")
    if mixture.shape[-1] <= segment:
        return mixture, target
    start = crop_offset(mixture.shape[-1], segment, example_index, epoch, seed)
    return mixture[..., start : start + segment], target[..., start : start + segment]


class PlateauScheduler:
    """Halve the learning rate when validation has not improved for `patience` epochs."""

    def __init__(self, optimizer, patience: int, factor: float):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = float("inf")
        self.stale = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; returns True if the LR was cut."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.stale = 0
            return True
        return False

    def state(self) -> dict:
        return {"best": self.best, "stale": self.stale}

    def load_state(self, state: dict) -> None:
        self.best = state["best"]
        self.stale = state["stale"]


def _load_example(record: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mixture = read_wav(record["mixture_path"]).samples
    target = read_wav(record["target_path"]).samples
    reference = read_wav(record["reference_path"]).samples
    return mixture, target, reference


def _example_loss(model, mixture, target, reference):
    mix = torch.from_numpy(np.ascontiguousarray(mixture)).float().unsqueeze(0)
    tgt = torch.from_numpy(np.ascontiguousarray(target)).float().unsqueeze(0)
    ref = torch.from_numpy(np.ascontiguousarray(reference)).float().unsqueeze(0)
    return si_sdr_loss(model(mix, ref), tgt)


def evaluate_split(model, records: list[dict]) -> float:
    """Mean loss over full-length clips; no cropping, no gradients."""
    model.eval()
    losses = []
    with torch.no_grad():
        for record in records:
            losses.append(_example_loss(model, *_load_example(record)).item())
    model.train()
    return float(np.mean(losses)) if losses else float("nan")


def train(model, corpus_root, cfg: TrainConfig, out_dir, resume_from=None) -> list[dict]:
    """Run the full loop; writes metrics.jsonl plus best/last checkpoints."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, spec, _speakers = datagen.load_manifest(corpus_root)
    train_records = [r for r in records if r["split"] == "train"]
    dev_records = [r for r in records if r["split"] == "dev"]
    if not train_records:
        raise ValueError("manifest has no training examples")
    segment = int(round(cfg.segment_seconds * spec.sample_rate))

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    scheduler = PlateauScheduler(optimizer, cfg.plateau_patience, cfg.lr_factor)
    start_epoch = 0
    best_val = float("inf")
    history: list[dict] = []
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer=optimizer)
        extra = meta["extra"]
        scheduler.load_state(extra["scheduler"])
        start_epoch = extra["epoch"] + 1
        best_val = extra["best_val"]
        history = extra.get("history", [])

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode) as metrics_file:
        for epoch in range(start_epoch, cfg.max_epochs):
            t0 = time.monotonic()
            epoch_records = datagen.resample_references(train_records, spec, epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7919, epoch])
            ).permutation(len(epoch_records))
            model.train()
            batch_losses = []
            step_in_epoch = 0
            for batch_start in range(0, len(order), cfg.batch_size):
                optimizer.zero_grad()
                batch = order[batch_start : batch_start + cfg.batch_size]
                losses = []
                for idx in batch:
                    record = epoch_records[int(idx)]
                    mixture, target, reference = _load_example(record)
                    mixture, target = truncate_segment(
                        mixture, target, segment, record["index"], epoch, cfg.seed
                    )
                    losses.append(_example_loss(model, mixture, target, reference))
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch},"
                        f" step {step_in_epoch} (lr {scheduler.lr:g})"
                    )
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                batch_losses.append(loss.item())
                step_in_epoch += 1

            val_loss = evaluate_split(model, dev_records)
            entry = {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": val_loss,
                "lr": scheduler.lr,
                "wall_s": time.monotonic() - t0,
            }
            history.append(entry)
            metrics_file.write(json.dumps(entry) + "\n")
            metrics_file.flush()

            improved = val_loss < best_val if np.isfinite(val_loss) else False
            if improved:
                best_val = val_loss
            if np.isfinite(val_loss):
                scheduler.step(val_loss)
            extra = {
                "epoch": epoch,
                "best_val": best_val,
                "scheduler": scheduler.state(),
                "history": history,
            }
            save_checkpoint(out_dir / "last.npz", model,
                            step=(epoch + 1) * len(train_records),
                            optimizer=optimizer, extra=extra)
            if improved or not dev_records:
                save_checkpoint(out_dir / "best.npz", model,
                                step=(epoch + 1) * len(train_records),
                                optimizer=optimizer, extra=extra)
    return history
