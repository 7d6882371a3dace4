"""Minibatch training with class rebalancing, plus dataset-to-array preparation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import adam_step
from .loss import LossBreakdown, total_loss
from .model import Paad, normalize_lidar

log = logging.getLogger(__name__)


@dataclass
class Arrays:
    """Network-ready tensors for a list of frames under one model configuration."""

    images: np.ndarray     # (N, H, W) float32 in [0, 1]
    lidar: np.ndarray      # (N, L) float32 normalized
    paths: np.ndarray      # (N, h, w) float32 raster
    labels: np.ndarray     # (N, T) float32

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> dict:
        return dict(images=self.images[idx], lidar=self.lidar[idx], paths=self.paths[idx],
                    labels=self.labels[idx])


def prepare(frames, model: Paad) -> Arrays:
    n = len(frames)
    c = model.config
    images = np.empty((n,) + c.image_shape, dtype=np.float32)
    lidar = np.empty((n, c.lidar_len), dtype=np.float32)
    paths = np.empty((n,) + c.path_shape, dtype=np.float32)
    labels = np.empty((n, c.horizon), dtype=np.float32)
    for i, f in enumerate(frames):
        images[i] = f.image_float()
        lidar[i] = normalize_lidar(f.lidar)
        paths[i] = model.path_raster(f.path)
        labels[i] = f.labels
    return Arrays(images, lidar, paths, labels)


def split_by_episode(episodes: np.ndarray, test_fraction: float, rng: np.random.Generator):
    """Disjoint (train_idx, test_idx) with whole episodes on each side."""
    ids = np.unique(episodes)
    n_test = max(1, int(round(test_fraction * len(ids)))) if len(ids) > 1 else 0
    test_ids = set(rng.permutation(ids)[:n_test].tolist())
    mask = np.array([e in test_ids for e in episodes], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def rebalance(indices: np.ndarray, anomalous: np.ndarray, rng: np.random.Generator,
              ratio: float = 1.0) -> np.ndarray:
    """Under-sample normal and over-sample anomalous frames to ``ratio`` anomalous:normal.

    The result has the same length as ``indices``; only the given indices are
    ever drawn from.
    """
    indices = np.asarray(indices)
    anomalous = np.asarray(anomalous, dtype=bool)
    pos, neg = indices[anomalous], indices[~anomalous]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("rebalancing needs both normal and anomalous frames")
    n = len(indices)
    n_pos = int(round(n * ratio / (1.0 + ratio)))
    n_neg = n - n_pos
    take_pos = rng.choice(pos, n_pos, replace=n_pos > len(pos))
    take_neg = rng.choice(neg, n_neg, replace=n_neg > len(neg))
    return rng.permutation(np.concatenate([take_pos, take_neg]))


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float | None = None       # default 0.1 * N
    sigma_hyper: float = 1.0
    rebalance_ratio: float | None = 1.0
    max_steps: int | None = None
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    steps: int
    bce: float
    recon_nll: float
    kl: float
    total: float
    mean_bce: float
    seconds: float


@dataclass
class TrainResult:
    epochs: list[EpochLog] = field(default_factory=list)
    steps: int = 0


def train(model: Paad, data: Arrays, settings: TrainSettings, indices=None,
          on_epoch=None) -> TrainResult:
    """Minimize the mixed objective with Adam over ``indices`` of ``data``."""
    rng = np.random.default_rng(settings.seed)
    indices = np.arange(len(data)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise ValueError("training set is empty")
    anomalous = data.labels[indices].any(axis=1)
    if anomalous.all() or not anomalous.any():
        raise ValueError("training set holds a single class")
    active = model.active_param_names()
    result = TrainResult()
    d = model.config.latent_dim
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        if settings.rebalance_ratio is not None:
            order = rebalance(indices, anomalous, rng, settings.rebalance_ratio)
        else:
            order = rng.permutation(indices)
        N = len(order)
        sums = np.zeros(5)
        nb = 0
        for start in range(0, N, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            noise = rng.standard_normal((len(idx), d)).astype(model.dtype)
            model.params.clear_grad()
            lb = total_loss(data.batch(idx), model, settings.alpha, settings.sigma_hyper,
                            noise=noise, dataset_size=N, grad=True)
            adam_step(model.params, settings.lr, settings.beta1, settings.beta2, settings.eps,
                      names=active)
            result.steps += 1
            sums += (lb.bce, lb.recon_nll, lb.kl, lb.total, lb.mean_bce)
            nb += 1
            if settings.max_steps and result.steps >= settings.max_steps:
                break
        m = sums / max(nb, 1)
        entry = EpochLog(epoch, result.steps, *m, time.perf_counter() - t0)
        result.epochs.append(entry)
        log.info("epoch %d steps %d bce %.4f recon %.2f kl %.2f mean_bce %.4f (%.1fs)",
                 epoch, result.steps, entry.bce, entry.recon_nll, entry.kl, entry.mean_bce,
                 entry.seconds)
        if on_epoch:
            on_epoch(entry)
        if settings.max_steps and result.steps >= settings.max_steps:
            break
    return result


def predict_arrays(model: Paad, data: Arrays, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.training = False
    out = []
    try:
        for s in range(0, len(data), batch_size):
            b = data.batch(slice(s, s + batch_size))
            out.append(model.forward(b["images"], b["lidar"], b["paths"])[1])
    finally:
        model.training = was
    return np.concatenate(out) if out else np.zeros((0, model.config.horizon), np.float32)


def evaluate_loss(model: Paad, data: Arrays, settings: TrainSettings, idx) -> LossBreakdown:
    """Loss at the current parameters on fixed indices with seeded noise (no update)."""
    rng = np.random.default_rng(settings.seed)
    noise = rng.standard_normal((len(idx), model.config.latent_dim)).astype(model.dtype)
    return total_loss(data.batch(idx), model, settings.alpha, settings.sigma_hyper, noise=noise,
                      dataset_size=len(idx))
