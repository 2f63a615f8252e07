import math

import numpy as np
import pytest

from sfuda import losses
from sfuda.numerics import check_gradient, l2_normalize, l2_normalize_backward

from .oracles import infonce


def test_negative_loss_example():
    logits = np.log([[0.3, 0.7]])
    lv = losses.classification_loss(logits, [0], [1.0], "negative", complementary=[1])
    assert lv.value == pytest.approx(-math.log(0.3), abs=1e-12)
    assert lv.value == pytest.approx(1.203973, abs=1e-6)


def test_zero_weight_sample_contributes_nothing():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 4))
    for mode in losses.CLASSIFICATION_MODES:
        lv = losses.classification_loss(logits, [0, 1, 2], [0.0, 1.0, 0.5], mode, complementary=[3, 3, 3])
        np.testing.assert_array_equal(lv.grads["logits"][0], 0.0)
        alone = losses.classification_loss(logits[1:], [1, 2], [1.0, 0.5], mode, complementary=[3, 3])
        assert lv.value == pytest.approx(alone.value * 2 / 3, abs=1e-14)


def test_negative_loss_zero_when_complementary_has_no_mass():
    lv = losses.classification_loss([[0.0, -1000.0]], [0], [1.0], "negative", complementary=[1])
    assert lv.value == 0.0


def test_positive_loss_is_weighted_cross_entropy():
    logits = np.array([[2.0, 0.5, -1.0]])
    p = np.exp(logits) / np.exp(logits).sum()
    lv = losses.classification_loss(logits, [1], [0.4], "positive")
    assert lv.value == pytest.approx(-0.4 * math.log(p[0, 1]), abs=1e-12)


def test_complementary_never_equals_label():
    rng = np.random.default_rng(0)
    labels = rng.integers(5, size=100_000)
    comp = losses.draw_complementary(labels, 5, rng)
    assert not np.any(comp == labels)
    # uniform over the four other classes
    counts = np.bincount((comp - labels) % 5, minlength=5)[1:]
    assert counts.min() > 0.23 * len(labels) and counts.max() < 0.27 * len(labels)


def test_negative_mode_needs_two_classes():
    with pytest.raises(ValueError):
        losses.classification_loss([[1.0]], [0], [1.0], "negative", rng=np.random.default_rng(0))


def test_classification_loss_linear_in_weight():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1, 3))
    a = losses.classification_loss(logits, [0], [0.3], "positive_plus_negative", complementary=[2]).value
    b = losses.classification_loss(logits, [0], [0.6], "positive_plus_negative", complementary=[2]).value
    assert b == pytest.approx(2 * a, rel=1e-13)


def test_contrastive_examples():
    q = np.array([1.0, 0.0])
    assert losses.contrastive_loss(q, q, np.array([[0.0, 1.0]]), [False], 0.07).value == pytest.approx(0.0, abs=1e-12)
    keys = np.array([[0.0, 1.0], [0.0, -1.0]])
    lv = losses.contrastive_loss(q, q, keys, [True, True], 1.0)
    assert lv.value == pytest.approx(math.log(1 + 2 / math.e), abs=1e-12)
    assert lv.value == pytest.approx(0.551445, abs=1e-6)


def test_contrastive_matches_direct_formula():
    rng = np.random.default_rng(2)
    for _ in range(50):
        q, k = l2_normalize(rng.normal(size=(2, 5)))
        keys = l2_normalize(rng.normal(size=(12, 5)))
        mask = rng.random(12) < 0.5
        tau = float(rng.uniform(0.05, 1.0))
        got = losses.contrastive_loss(q, k, keys, mask, tau).value
        assert got == pytest.approx(infonce(q, k, keys[mask], tau), rel=1e-10)


def test_contrastive_masked_negative_is_inert():
    rng = np.random.default_rng(3)
    q, k = l2_normalize(rng.normal(size=(2, 4)))
    keys = l2_normalize(rng.normal(size=(6, 4)))
    mask = np.array([True, False, True, True, False, True])
    base = losses.contrastive_loss(q, k, keys, mask, 0.07)
    extra = np.vstack([keys, l2_normalize(rng.normal(size=(1, 4)))])
    more = losses.contrastive_loss(q, k, extra, np.append(mask, False), 0.07)
    assert base.value == more.value
    np.testing.assert_array_equal(base.grads["query"], more.grads["query"])


def test_contrastive_input_checks():
    q = np.array([1.0, 0.0])
    with pytest.raises(ValueError):
        losses.contrastive_loss(q, q, np.zeros((0, 2)), [], 0.0)
    with pytest.raises(ValueError):
        losses.contrastive_loss(np.array([2.0, 0.0]), q, np.zeros((0, 2)), [], 0.1)


def test_contrastive_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(30):
        q, k = l2_normalize(rng.normal(size=(2, 3)))
        keys = l2_normalize(rng.normal(size=(4, 3)))
        tau = 0.5
        base = losses.contrastive_loss(q, k, keys, [True] * 4, tau).value
        # increase the positive similarity: move k toward q
        closer = l2_normalize(k + 0.1 * (q - k))
        assert losses.contrastive_loss(q, closer, keys, [True] * 4, tau).value < base
        far = keys.copy()
        far[0] = l2_normalize(keys[0] + 0.1 * (q - keys[0]))
        assert losses.contrastive_loss(q, k, far, [True] * 4, tau).value > base


def test_diversity_examples():
    assert losses.diversity_loss(np.zeros((3, 2))).value == pytest.approx(-math.log(2), abs=1e-15)
    assert losses.diversity_loss(np.tile([1000.0, 0.0], (4, 1))).value == 0.0
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 3))
    a = losses.diversity_loss(logits)
    b = losses.diversity_loss(logits[::-1])
    assert a.value == pytest.approx(b.value, abs=1e-15)


def test_diversity_lower_bound():
    rng = np.random.default_rng(5)
    for _ in range(100):
        c = int(rng.integers(2, 8))
        val = losses.diversity_loss(rng.normal(scale=3, size=(int(rng.integers(1, 10)), c))).value
        assert val >= -math.log(c) - 1e-12


def test_total_loss_combination():
    cls = losses.LossValue(1.0, {"logits": np.ones((2, 2))})
    ctr = losses.LossValue(0.5, {"z": np.ones((2, 3))})
    div = losses.LossValue(-0.25, {"logits": np.full((2, 2), 2.0)})
    tot = losses.total_loss(cls, ctr, div)
    assert tot.value == 1.25
    np.testing.assert_array_equal(tot.grads["logits"], 3.0)
    only = losses.total_loss(cls, ctr, div, 2.0, 0.0, 0.0)
    assert only.value == 2.0 and "z" not in only.grads
    np.testing.assert_array_equal(only.grads["logits"], 2.0)


def _random_classification(rng, mode):
    b, c = int(rng.integers(1, 8)), int(rng.integers(2, 7))
    logits = rng.normal(scale=2, size=(b, c))
    labels = rng.integers(c, size=b)
    comp = losses.draw_complementary(labels, c, rng)
    w = rng.uniform(0, 1, size=b)
    lv = losses.classification_loss(logits, labels, w, mode, complementary=comp)
    fn = lambda v: losses.classification_loss(v.reshape(b, c), labels, w, mode, complementary=comp).value
    return fn, lv.grads["logits"], logits


@pytest.mark.parametrize("mode", losses.CLASSIFICATION_MODES)
def test_classification_gradients(mode):
    rng = np.random.default_rng(10)
    for _ in range(30):
        fn, grad, point = _random_classification(rng, mode)
        assert check_gradient(fn, grad, point).max_relative_error < 1e-4


def test_contrastive_gradients_on_sphere():
    rng = np.random.default_rng(11)
    for _ in range(30):
        p = int(rng.integers(2, 8))
        raw_q = rng.normal(size=p)
        k = l2_normalize(rng.normal(size=p))
        keys = l2_normalize(rng.normal(size=(int(rng.integers(0, 6)), p)))
        mask = rng.random(len(keys)) < 0.7
        tau = float(rng.uniform(0.1, 1.0))
        q = l2_normalize(raw_q)
        lv = losses.contrastive_loss(q, k, keys, mask, tau)
        # differentiate along the unnormalised direction of q so every probe stays unit-norm
        analytic = l2_normalize_backward(raw_q, lv.grads["query"])
        fn = lambda v: losses.contrastive_loss(l2_normalize(v), k, keys, mask, tau).value
        assert check_gradient(fn, analytic, raw_q).max_relative_error < 1e-4


def test_diversity_gradients():
    rng = np.random.default_rng(12)
    for _ in range(30):
        b, c = int(rng.integers(1, 8)), int(rng.integers(2, 7))
        logits = rng.normal(scale=2, size=(b, c))
        lv = losses.diversity_loss(logits)
        fn = lambda v: losses.diversity_loss(v.reshape(b, c)).value
        assert check_gradient(fn, lv.grads["logits"], logits).max_relative_error < 1e-4
