"""Minibatch training with Adam and cross-entropy; model selection on validation song accuracy."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import features as F
from .data import DatasetError, DatasetManifest, SplitSpec
from .evaluation import evaluate
from .models import (Checkpoint, ModelConfig, build_model, canonical_kind)
from .nn.optim import Adam
from .nn.tensor import cross_entropy
from .pipeline import ChunkDataset, FeatureCache, fit_stats, iter_records, load_partition, model_inputs


class TrainingError(RuntimeError):
    """Training diverged or could not start."""


@dataclass
class TrainConfig:
    """Optimisation settings. ``patience=None`` disables early stopping.

    ``target_accuracy`` optionally ends training once validation song
    accuracy reaches it; ``None`` keeps the full epoch budget.
    """

    batch_size: int = 256
    epochs: int = 200
    lr: float = 0.005
    dropout: float = 0.5
    seed: int = 0
    kind: str = "late_fusion"
    patience: int | None = 20
    target_accuracy: float | None = None
    eval_batch_size: int = 64

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batchnorm, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1 or None, got {self.patience}")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_chunk_acc: float
    val_song_acc: float
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[EpochReport] = field(default_factory=list)
    best_epoch: int = 0


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one chunk is dropped (batchnorm needs two)."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def _snapshot(model, opt):
    return ([p.data.copy() for p in model.parameters()],
            [b.copy() for _, b in model.named_buffers()],
            copy.deepcopy(opt.state))


def _restore(model, opt, snap):
    params, buffers, state = snap
    for p, v in zip(model.parameters(), params):
        p.data[...] = v
    for (_, b), v in zip(model.named_buffers(), buffers):
        b[...] = v
    opt.state = state


def fit(model_cfg: ModelConfig, train_ds: ChunkDataset, valid_ds: ChunkDataset, cfg: TrainConfig,
        class_names: list[str], stats: dict | None = None,
        feature_config: F.FeatureConfig | None = None,
        log: Callable[[EpochReport], None] | None = None) -> TrainResult:
    """Train a fresh model on in-memory chunk datasets.

    The returned checkpoint holds the parameters from the epoch with the best
    validation song accuracy (earliest epoch on ties).
    """
    if len(train_ds) < 2:
        raise DatasetError("empty split: training needs at least two chunks")
    if len(valid_ds) == 0:
        raise DatasetError("empty split: validation partition has no chunks")
    model_cfg = copy.deepcopy(model_cfg)
    model_cfg.kind = cfg.kind
    model_cfg.seed = cfg.seed
    model_cfg.backbone.dropout = cfg.dropout
    model_cfg.backbone.n_classes = len(class_names)
    model = build_model(model_cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])

    reports, best, best_acc, best_epoch, stale = [], None, -1.0, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, seen = 0.0, 0
        for bi, idx in enumerate(minibatches(len(train_ds), cfg.batch_size, rng)):
            loss = cross_entropy(model(**train_ds.batch(idx)), train_ds.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                worst = max(float(np.abs(p.data).max()) for p in model.parameters())
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {bi}; "
                                    f"max |param| = {worst:.3g}, lr = {cfg.lr}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        ev = evaluate(model, valid_ds, cfg.eval_batch_size)
        report = EpochReport(epoch, total / seen, ev.chunk_accuracy, ev.song_accuracy,
                             time.perf_counter() - t0)
        reports.append(report)
        if log is not None:
            log(report)
        if ev.song_accuracy > best_acc:
            best, best_acc, best_epoch, stale = _snapshot(model, opt), ev.song_accuracy, epoch, 0
        else:
            stale += 1
        if cfg.patience is not None and stale >= cfg.patience:
            break
        if cfg.target_accuracy is not None and ev.song_accuracy >= cfg.target_accuracy:
            break
    _restore(model, opt, best)
    model.eval()
    meta = {"best_epoch": best_epoch, "epochs_run": len(reports), "train": dict(cfg.__dict__)}
    ckpt = Checkpoint(model, list(class_names), dict(stats or {}),
                      feature_config or F.FeatureConfig(), opt.state, meta)
    return TrainResult(ckpt, reports, best_epoch)


def train(manifest: DatasetManifest, split: SplitSpec, cache: FeatureCache, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None,
          log: Callable[[EpochReport], None] | None = None) -> TrainResult:
    """Fit normalization on the training split, then train ``cfg.kind`` from cached features."""
    model_cfg = model_cfg or ModelConfig(cfg.kind)
    if not split.songs("train"):
        raise DatasetError("empty split: no training songs")
    stats = fit_stats(lambda: iter_records(manifest, split, "train", cache))
    inputs = model_inputs(cfg.kind)
    fc = cache.cfg
    model_cfg = copy.deepcopy(model_cfg)
    model_cfg.backbone.n_mels = fc.n_mels
    model_cfg.backbone.chunk_len = fc.chunk_len
    model_cfg.tempo.fourier_bins = fc.tempo_window // 2 + 1
    model_cfg.tempo.ac_bins = fc.tempo_window
    train_ds = load_partition(manifest, split, "train", cache, stats, inputs)
    valid_ds = load_partition(manifest, split, "valid", cache, stats, inputs)
    _check_bins(model_cfg, train_ds)
    return fit(model_cfg, train_ds, valid_ds, cfg, list(manifest.classes), stats, fc, log)


def _check_bins(model_cfg: ModelConfig, ds: ChunkDataset) -> None:
    tc = model_cfg.tempo
    expected = {"mel": model_cfg.backbone.n_mels, "fourier": tc.fourier_bins,
                "autocorrelation": tc.ac_bins}
    for name, arr in ds.inputs.items():
        if arr.shape[1] != expected[name]:
            raise DatasetError(f"cached {name} has {arr.shape[1]} bins, model expects {expected[name]}")


def with_overrides(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
