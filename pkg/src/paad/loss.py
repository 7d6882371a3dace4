"""Training objective: weighted BCE on the failure profile plus the LiDAR negative ELBO."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigurationError, DimensionError, NumericError
from .model import LidarPosterior, Paad

PROB_CLAMP = 1e-7
LOG_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    """Loss terms, each already scaled to a dataset-sum estimate.

    ``total == alpha * bce + recon_nll + kl``. ``mean_bce`` is the plain
    per-datapoint average of the BCE over the batch.
    """

    bce: float
    recon_nll: float
    kl: float
    total: float
    alpha: float
    mean_bce: float = float("nan")


def bce(pred, label) -> float:
    """Mean over the horizon of the binary cross-entropy."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"bce: prediction {p.shape} vs label {y.shape}")
    return float(np.mean(_bce_terms(p, y), axis=-1))


def _bce_terms(p, y):
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def gaussian_recon_nll(x, mean, sigma_hyper=1.0):
    """Negative log N(x | mean, sigma^2 I) without the normalization constant.

    Works on single vectors or (B, L) batches (returns one value per row).
    """
    if sigma_hyper <= 0:
        raise ConfigurationError("reconstruction sigma must be positive")
    x = np.asarray(x)
    mean = np.asarray(mean)
    if x.shape != mean.shape:
        raise DimensionError(f"recon: data {x.shape} vs mean {mean.shape}")
    diff = x.astype(np.float64) - mean
    return np.sum(diff * diff, axis=-1) / (2.0 * sigma_hyper ** 2)


def kl_to_standard_normal(post: LidarPosterior):
    """KL(N(mu, diag sigma^2) || N(0, I)) per row."""
    mu = np.asarray(post.mu, dtype=np.float64)
    sigma = np.asarray(post.sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise NumericError("KL: sigma must be strictly positive")
    var = sigma * sigma
    return 0.5 * np.sum(mu * mu + var - 1.0 - np.log(np.maximum(var, LOG_CLAMP)), axis=-1)


def total_loss(batch, model: Paad, alpha: float | None = None, sigma_hyper: float = 1.0,
               noise=None, dataset_size: int | None = None, grad: bool = False) -> LossBreakdown:
    """Loss on a minibatch, scaled by N/B to estimate the dataset sum.

    ``batch`` needs ``images``, ``lidar`` (normalized), ``paths`` and
    ``labels``. ``alpha`` defaults to 0.1 * N. With ``grad=True`` the
    gradients of ``total`` are accumulated into ``model.params``.
    """
    labels = np.asarray(batch["labels"], dtype=np.float64)
    B = labels.shape[0]
    N = dataset_size or B
    if alpha is None:
        alpha = 0.1 * N
    scale = N / B
    recon_on = model.config.uses_reconstruction
    was = model.training
    model.training = True
    try:
        if recon_on and noise is None:
            raise ConfigurationError("reconstruction branch needs reparameterization noise")
        logits, probs, extras, cache = model.forward(batch["images"], batch["lidar"],
                                                     batch["paths"], noise=noise)
    finally:
        model.training = was
    if probs.shape != labels.shape:
        raise DimensionError(f"predictions {probs.shape} vs labels {labels.shape}")

    T = labels.shape[1]
    per_bce = np.mean(_bce_terms(probs.astype(np.float64), labels), axis=1)
    bce_sum = scale * float(per_bce.sum())
    recon_sum = kl_sum = 0.0
    if recon_on:
        post = extras["posterior"]
        x = np.asarray(batch["lidar"], dtype=np.float64)
        recon_sum = scale * float(gaussian_recon_nll(x, extras["recon_mean"], sigma_hyper).sum())
        kl_sum = scale * float(kl_to_standard_normal(post).sum())
    out = LossBreakdown(bce=bce_sum, recon_nll=recon_sum, kl=kl_sum,
                        total=alpha * bce_sum + recon_sum + kl_sum, alpha=alpha,
                        mean_bce=float(per_bce.mean()))
    if grad:
        dt = model.dtype
        # d/dlogit of clamped BCE through the sigmoid; zero where the clamp is active
        p = probs.astype(np.float64)
        active = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
        dlogits = (alpha * scale / T) * (p - labels) * active
        kwargs = {}
        if recon_on:
            post = extras["posterior"]
            mu = post.mu.astype(np.float64)
            sigma = post.sigma.astype(np.float64)
            x = np.asarray(batch["lidar"], dtype=np.float64)
            drecon = scale * (extras["recon_mean"] - x) / sigma_hyper ** 2
            kwargs = dict(dmu=(scale * mu).astype(dt),
                          dsigma=(scale * (sigma - 1.0 / sigma)).astype(dt),
                          drecon=drecon.astype(dt),
                          noise=np.asarray(noise, dtype=dt))
        model.backward(dlogits.astype(dt), cache, **kwargs)
    return out
