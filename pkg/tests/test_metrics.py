from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paad.metrics import InputError, evaluate, f1_at_half, kde_bounded, pr_auc, silverman_bandwidth


def f1_oracle(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p > 0.5 and y)
    fp = sum(1 for p, y in zip(preds, labels) if p > 0.5 and not y)
    fn = sum(1 for p, y in zip(preds, labels) if p <= 0.5 and y)
    P = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    R = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    F = 2 * P * R / (P + R) if P + R else Fraction(0)
    return P, R, F


def ap_oracle(preds, labels):
    """Average precision by enumerating every distinct score as a threshold, exactly."""
    n_pos = sum(labels)
    prev_recall, total = Fraction(0), Fraction(0)
    for t in sorted(set(preds), reverse=True):
        chosen = [y for p, y in zip(preds, labels) if p >= t]
        tp = sum(chosen)
        recall = Fraction(tp, n_pos)
        total += Fraction(tp, len(chosen)) * (recall - prev_recall)
        prev_recall = recall
    return total


def instance(rng):
    n = int(rng.integers(2, 17))
    # coarse scores make ties common
    preds = list(rng.integers(0, 8, n) / 7.0) if rng.random() < 0.5 else list(rng.random(n))
    labels = list(rng.integers(0, 2, n))
    if len(set(labels)) == 1:
        labels[0] = 1 - labels[0]
    return preds, labels


def test_f1_examples():
    assert f1_at_half([0.9, 0.1], [1, 0]).f1 == 1.0
    r = f1_at_half([0.4, 0.3], [1, 0])
    assert r.recall == 0 and r.f1 == 0 and r.degenerate
    r = f1_at_half([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)


def test_threshold_is_strict():
    assert f1_at_half([0.5], [1]).recall == 0.0


def test_f1_input_errors():
    with pytest.raises(InputError):
        f1_at_half([], [])
    with pytest.raises(InputError):
        f1_at_half([0.2, 0.4], [1])
    with pytest.raises(InputError):
        f1_at_half([0.2], [2])


def test_pr_auc_examples():
    assert pr_auc([0.9, 0.1], [1, 0]).auc == 1.0
    assert pr_auc([0.1, 0.9], [1, 0]).auc == 0.5
    with pytest.raises(InputError):
        pr_auc([0.3, 0.4], [1, 1])


def test_metrics_match_exhaustive_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, labels = instance(rng)
        P, R, F = f1_oracle(preds, labels)
        got = f1_at_half(preds, labels)
        assert got.precision == float(P) and got.recall == float(R)
        assert got.f1 == pytest.approx(float(F), rel=1e-15, abs=0)
        assert pr_auc(preds, labels).auc == pytest.approx(float(ap_oracle(preds, labels)),
                                                          rel=1e-12, abs=1e-15)


def test_curve_points_one_per_distinct_threshold_and_recall_monotone():
    rng = np.random.default_rng(1)
    preds, labels = instance(rng)
    c = pr_auc(preds, labels)
    assert len(c.rows()) == len(set(preds))
    assert np.all(np.diff(c.thresholds) > 0)
    assert np.all(np.diff(c.recall) <= 0)
    assert 0 <= c.auc <= 1


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=2, max_size=16))
def test_pr_auc_invariant_under_monotone_transform(pairs):
    preds = [p for p, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if len(set(labels)) < 2:
        labels[0] = 1 - labels[0]
    a = pr_auc(preds, labels).auc
    b = pr_auc(np.log(preds) * 3 + 1, labels).auc
    assert a == pytest.approx(b, abs=1e-12)


def test_kde_integrates_to_one_and_is_non_negative():
    rng = np.random.default_rng(2)
    for samples in (rng.random(50), rng.beta(0.3, 3, 400), np.array([1e-9, 1 - 1e-9, 0.5])):
        d = kde_bounded(samples, 200)
        assert np.all(d.density >= 0)
        assert abs(d.integral() - 1.0) <= 1e-3
        assert np.all((d.grid > 0) & (d.grid < 1)) and len(d.grid) == 200


def test_kde_symmetric_samples_give_symmetric_density():
    rng = np.random.default_rng(3)
    s = rng.random(60)
    d = kde_bounded(np.concatenate([s, 1 - s]))
    np.testing.assert_allclose(d.density, d.density[::-1], atol=1e-6)


def test_kde_mode_near_concentrated_mass():
    rng = np.random.default_rng(4)
    s = np.clip(rng.normal(0.9, 0.02, 500), 0.01, 0.99)
    d = kde_bounded(s)
    hist, edges = np.histogram(s, bins=40, range=(0, 1))
    hist_mode = (edges[np.argmax(hist)] + edges[np.argmax(hist) + 1]) / 2
    assert abs(d.grid[np.argmax(d.density)] - 0.9) <= 0.05
    assert abs(hist_mode - 0.9) <= 0.05


def test_kde_needs_two_samples():
    with pytest.raises(InputError):
        kde_bounded([0.3])


def test_silverman_rule():
    z = np.random.default_rng(5).standard_normal(100)
    iqr = np.subtract(*np.percentile(z, [75, 25]))
    assert silverman_bandwidth(z) == pytest.approx(0.9 * min(z.std(ddof=1), iqr / 1.34) * 100 ** -0.2)


def test_evaluate_report_fields_finite():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 2, (30, 10))
    preds = np.clip(labels * 0.6 + rng.random((30, 10)) * 0.4, 0, 1)
    r = evaluate(preds, labels)
    for v in (r.precision, r.recall, r.f1, r.pr_auc):
        assert np.isfinite(v)
    assert r.n_points == 300 and r.n_positive == labels.sum()
    for d in (r.kde_normal, r.kde_failure):
        assert abs(d.integral() - 1) <= 1e-3
