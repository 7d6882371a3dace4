import numpy as np
import pytest

from paad.model import Paad
from paad.train import (Arrays, TrainSettings, evaluate_loss, prepare, rebalance,
                        split_by_episode, train)

from conftest import small_config


def test_rebalance_hits_ratio_and_stays_inside_indices():
    rng = np.random.default_rng(0)
    idx = np.arange(100, 200)
    anomalous = np.zeros(100, bool)
    anomalous[:10] = True
    out = rebalance(idx, anomalous, rng, ratio=1.0)
    assert len(out) == 100 and set(out) <= set(idx)
    assert np.sum(out < 110) == 50
    with pytest.raises(ValueError):
        rebalance(idx, np.zeros(100, bool), rng)


def test_split_is_by_whole_episode_and_disjoint():
    episodes = np.repeat(np.arange(10), 7)
    tr, te = split_by_episode(episodes, 0.2, np.random.default_rng(1))
    assert not set(tr) & set(te) and len(tr) + len(te) == 70
    assert not set(episodes[tr]) & set(episodes[te])
    assert len(set(episodes[te])) == 2


def test_rebalancing_never_draws_evaluation_frames():
    rng = np.random.default_rng(2)
    episodes = np.repeat(np.arange(6), 20)
    anomalous = rng.random(120) < 0.2
    tr, te = split_by_episode(episodes, 0.34, rng)
    drawn = rebalance(tr, anomalous[tr], rng)
    assert not set(drawn) & set(te)


def _arrays(cfg, n, rng, positives=True):
    labels = np.zeros((n, cfg.horizon), np.float32)
    if positives:
        labels[: n // 4, 5:] = 1
    return Arrays(rng.random((n,) + cfg.image_shape).astype(np.float32),
                  rng.random((n, cfg.lidar_len)).astype(np.float32),
                  (rng.random((n,) + cfg.path_shape) > 0.9).astype(np.float32), labels)


def test_training_rejects_empty_or_single_class_sets():
    cfg = small_config()
    rng = np.random.default_rng(3)
    m = Paad(cfg)
    with pytest.raises(ValueError, match="single class"):
        train(m, _arrays(cfg, 8, rng, positives=False), TrainSettings(epochs=1))
    with pytest.raises(ValueError, match="empty"):
        train(m, _arrays(cfg, 8, rng), TrainSettings(epochs=1), indices=[])


def test_training_reduces_loss_and_leaves_ablated_params_alone():
    cfg = small_config(fusion_mode="camera_only")
    rng = np.random.default_rng(4)
    m = Paad(cfg)
    data = _arrays(cfg, 16, rng)
    frozen = m.params["lidar.enc.w"].copy()
    s = TrainSettings(epochs=30, batch_size=8, lr=2e-3)
    before = evaluate_loss(m, data, s, np.arange(16)).mean_bce
    res = train(m, data, s)
    after = evaluate_loss(m, data, s, np.arange(16)).mean_bce
    assert after < before and res.steps == 60 and len(res.epochs) == 30
    np.testing.assert_array_equal(m.params["lidar.enc.w"], frozen)
    assert res.epochs[-1].recon_nll == 0 and res.epochs[-1].kl == 0


def test_max_steps_stops_early():
    cfg = small_config()
    m = Paad(cfg)
    res = train(m, _arrays(cfg, 16, np.random.default_rng(5)),
                TrainSettings(epochs=10, batch_size=4, max_steps=6))
    assert res.steps == 6


def test_prepare_builds_network_ready_arrays(short_episode):
    m = Paad()
    a = prepare(short_episode[:5], m)
    assert a.images.shape == (5, 60, 80) and a.images.max() <= 1.0
    assert a.lidar.shape == (5, 1081) and a.lidar.max() <= 1.0
    assert a.paths.shape == (5, 30, 80) and a.labels.shape == (5, 10)
