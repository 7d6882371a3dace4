import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paad import diffcore as dc
from paad.loss import bce, gaussian_recon_nll, kl_to_standard_normal, total_loss
from paad.model import LidarPosterior, Paad

from conftest import random_batch, randomize_biases, small_config


def test_bce_examples():
    assert bce(np.full(10, 0.5), np.arange(10) % 2) == pytest.approx(math.log(2))
    assert bce(np.array([1.0, 0.0]), np.array([1, 0])) == pytest.approx(0.0, abs=1e-6)
    assert bce(np.array([0.9]), np.array([1])) == pytest.approx(-math.log(0.9))
    with pytest.raises(dc.DimensionError):
        bce(np.array([0.5, 0.5]), np.array([1]))


def test_recon_nll_examples():
    x = np.array([0.1, 0.2, 0.3])
    assert gaussian_recon_nll(x, x) == 0.0
    assert gaussian_recon_nll(np.array([2.0, 0.0]), np.zeros(2)) == pytest.approx(2.0)
    assert gaussian_recon_nll(np.array([1.0]), np.zeros(1), 0.5) == pytest.approx(2.0)
    with pytest.raises(dc.ConfigurationError):
        gaussian_recon_nll(x, x, 0.0)


def test_kl_examples():
    assert kl_to_standard_normal(LidarPosterior(np.zeros(4), np.ones(4))) == 0.0
    assert kl_to_standard_normal(LidarPosterior(np.array([1.0]), np.array([1.0]))) == 0.5
    expect = 0.5 * (4 - 1 - math.log(4))
    assert kl_to_standard_normal(LidarPosterior(np.zeros(1), np.array([2.0]))) == pytest.approx(expect)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.lists(st.floats(0.05, 4), min_size=5,
                                                                    max_size=5))
def test_kl_non_negative(mu, sigma):
    kl = kl_to_standard_normal(LidarPosterior(np.array(mu), np.array(sigma[:len(mu)])))
    assert kl >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_recon_nll_monotone_in_error(a, b):
    lo, hi = sorted((a, b))
    assert gaussian_recon_nll(np.array([lo]), np.zeros(1)) <= gaussian_recon_nll(np.array([hi]),
                                                                                np.zeros(1))


def _setup(seed=0, **kw):
    cfg = small_config(init_seed=seed, **kw)
    m = Paad(cfg).astype(np.float64)
    rng = np.random.default_rng(seed)
    randomize_biases(m, rng)
    return m, random_batch(cfg, rng), rng.standard_normal((3, cfg.latent_dim)), rng


def test_total_matches_independently_summed_components():
    m, batch, noise, _ = _setup(1)
    lb = total_loss(batch, m, alpha=3.0, noise=noise, dataset_size=12)
    m.training = True
    _, probs, ex, _ = m.forward(batch["images"], batch["lidar"], batch["paths"], noise)
    m.training = False
    y = batch["labels"]
    p = np.clip(probs, 1e-7, 1 - 1e-7)
    per = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p), axis=1)
    rec = np.sum((batch["lidar"] - ex["recon_mean"]) ** 2, axis=1) / 2
    mu, s = ex["posterior"].mu, ex["posterior"].sigma
    kl = 0.5 * np.sum(mu ** 2 + s ** 2 - 1 - np.log(s ** 2), axis=1)
    scale = 12 / 3
    assert lb.bce == pytest.approx(scale * per.sum(), rel=1e-12)
    assert lb.recon_nll == pytest.approx(scale * rec.sum(), rel=1e-12)
    assert lb.kl == pytest.approx(scale * kl.sum(), rel=1e-12)
    assert lb.total == pytest.approx(3.0 * lb.bce + lb.recon_nll + lb.kl, rel=1e-12)


def test_alpha_defaults_to_tenth_of_dataset_size():
    m, batch, noise, _ = _setup(2)
    assert total_loss(batch, m, noise=noise, dataset_size=50).alpha == 5.0
    assert total_loss(batch, m, noise=noise).alpha == pytest.approx(0.3)


def test_reconstruction_off_leaves_only_weighted_bce():
    m, batch, _, _ = _setup(3, reconstruction=False)
    lb = total_loss(batch, m, alpha=2.0)
    assert lb.recon_nll == 0 and lb.kl == 0 and lb.total == 2.0 * lb.bce


def test_all_terms_zero_gives_zero_total():
    m, batch, noise, _ = _setup(4)
    for n in m.params.names():
        m.params.values[n][:] = 0
    # a very confident head that matches the labels, a decoder that echoes the scan,
    # and a posterior exactly at the prior
    y = np.zeros((3, m.config.horizon))
    batch = dict(batch, labels=y)
    m.params.values["head.fc1.b"][:] = -50.0
    m.params.values["lidar.dec1.b"][:] = 0.25
    batch["lidar"] = np.full_like(batch["lidar"], 0.25)
    lb = total_loss(batch, m, alpha=1.0, noise=noise)
    # the probability clamp at 1e-7 leaves -log(1 - 1e-7) per datapoint
    floor = -3 * math.log1p(-1e-7)
    assert lb.kl == 0 and lb.recon_nll == 0
    assert lb.bce == pytest.approx(floor, rel=1e-6)
    assert lb.total == pytest.approx(floor, rel=1e-6)


@pytest.mark.parametrize("mode", [dict(), dict(attention="mlp"), dict(fusion_mode="lidar_only"),
                                  dict(reconstruction=False), dict(path_view="bev")])
def test_total_loss_gradients_match_finite_differences(mode):
    m, batch, noise, rng = _setup(5, **mode)
    m.params.clear_grad()
    total_loss(batch, m, alpha=2.0, noise=noise, dataset_size=10, grad=True)
    for n in m.active_param_names():
        res = dc.gradcheck(lambda: total_loss(batch, m, alpha=2.0, noise=noise,
                                              dataset_size=10).total,
                           m.params.values[n], m.params.grads[n], 4, rng)
        assert res.max_rel_error < 1e-3, (n, res)


def test_reconstruction_needs_noise():
    m, batch, _, _ = _setup(6)
    with pytest.raises(dc.ConfigurationError):
        total_loss(batch, m)
