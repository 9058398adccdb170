import math

import numpy as np
import pytest

from dualseg.gradcheck import check_gradients
from dualseg.losses import (
    LossWeights,
    consistency_loss,
    pseudo_label_loss,
    supervised_ce,
    total_loss,
    weight_regularizer,
)
from dualseg.pseudo import PseudoLabelBatch, threshold_labels
from dualseg.tensor import ContractError, Tape, Tensor


def _nll_oracle(logits, w, labels, select):
    total, n = 0.0, 0
    for idx in zip(*np.nonzero(select)):
        z = logits[idx] * w[idx[0]]
        lse = max(z) + math.log(sum(math.exp(v - max(z)) for v in z))
        total += lse - z[labels[idx]]
        n += 1
    return total / n


class TestConsistency:
    def test_identical_zero(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2, 3)))
        loss, empty = consistency_loss(x, x, 2)
        assert loss.item() == 0.0 and not empty

    def test_all_ones_difference(self):
        a = np.random.default_rng(1).standard_normal((3, 2, 2, 4))
        loss, _ = consistency_loss(Tensor(a + 1.0), Tensor(a), 3)
        assert loss.item() == pytest.approx(16.0, abs=1e-12)

    def test_empty_batch(self):
        loss, empty = consistency_loss(Tensor(np.zeros((0, 2, 2, 2))), Tensor(np.zeros((0, 2, 2, 2))), 0)
        assert loss.item() == 0.0 and empty


class TestSupervisedCE:
    def test_uniform_logits(self):
        loss = supervised_ce(Tensor(np.zeros((2, 3, 3, 4))), Tensor(np.ones((2, 4))), np.zeros((2, 3, 3), int))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-14)

    def test_forced_arithmetic(self):
        logits = Tensor(np.array([math.log(3.0), 0.0]).reshape(1, 1, 1, 2))
        loss = supervised_ce(logits, Tensor(np.ones((1, 2))), np.zeros((1, 1, 1), int))
        assert loss.item() == pytest.approx(math.log(4 / 3), abs=1e-14)

    def test_random_vs_recompute(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((2, 3, 3, 4))
        w = rng.uniform(0.5, 1.5, (2, 4))
        y = rng.integers(0, 4, (2, 3, 3))
        got = supervised_ce(Tensor(logits), Tensor(w), y).item()
        assert got == pytest.approx(_nll_oracle(logits, w, y, np.ones(y.shape, bool)), abs=1e-10)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            supervised_ce(Tensor(np.zeros((1, 1, 1, 2))), Tensor(np.ones((1, 2))), np.array([[[2]]]))


class TestPseudoLabelLoss:
    def test_hand_two_pixel(self):
        logits = np.array([[0.5, -0.25], [0.1, 0.7]]).reshape(1, 1, 2, 2)
        w = np.array([[2.0, 1.0]])
        plb = threshold_labels(np.array([[0.97, 0.03], [0.01, 0.99]]).reshape(1, 1, 2, 2), 0.95)
        got, empty = pseudo_label_loss(Tensor(logits), Tensor(w), plb)
        # pixel 1: z = [1.0, -0.25], label 0; pixel 2: z = [0.2, 0.7], label 1
        p1 = -math.log(math.exp(1.0) / (math.exp(1.0) + math.exp(-0.25)))
        p2 = -math.log(math.exp(0.7) / (math.exp(0.2) + math.exp(0.7)))
        assert not empty
        assert got.item() == pytest.approx((p1 + p2) / 2, abs=1e-10)

    def test_margin_limit(self):
        logits = np.zeros((1, 1, 1, 3))
        logits[..., 1] = 60.0
        plb = threshold_labels(np.array([0.0, 1.0, 0.0]).reshape(1, 1, 1, 3), 0.95)
        assert pseudo_label_loss(Tensor(logits), Tensor(np.ones((1, 3))), plb)[0].item() < 1e-20

    def test_empty_mask(self):
        plb = threshold_labels(np.full((1, 2, 2, 2), 0.5), 0.95)
        loss, empty = pseudo_label_loss(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones((1, 2))), plb)
        assert loss.item() == 0.0 and empty

    def test_only_masked_pixels_count(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((2, 2, 2, 3))
        p = np.full((2, 2, 2, 3), 1 / 3)
        p[0, 0, 0] = [0.0, 0.0, 1.0]
        p[1, 1, 0] = [1.0, 0.0, 0.0]
        plb = threshold_labels(p, 0.95)
        got = pseudo_label_loss(Tensor(logits), Tensor(np.ones((2, 3))), plb)[0].item()
        assert got == pytest.approx(_nll_oracle(logits, np.ones((2, 3)), plb.labels, plb.mask), abs=1e-12)

    def test_bad_label_at_masked_pixel(self):
        plb = PseudoLabelBatch(np.ones((1, 1, 1, 2)), np.array([[[5]]]), np.array([[[True]]]), 0.95)
        with pytest.raises(ContractError):
            pseudo_label_loss(Tensor(np.zeros((1, 1, 1, 2))), Tensor(np.ones((1, 2))), plb)


class TestRegularizer:
    def test_ones(self):
        assert weight_regularizer(Tensor(np.ones((2, 3)))).item() == 0.0

    def test_zeros(self):
        assert weight_regularizer(Tensor(np.zeros((2, 3)))).item() == 6.0

    def test_random(self):
        w = np.random.default_rng(4).standard_normal((3, 4))
        assert weight_regularizer(Tensor(w)).item() == pytest.approx(((w - 1) ** 2).sum(), rel=1e-15)


class TestTotal:
    def test_defaults_sum(self):
        assert total_loss(1.0, 1.0, 1.0, 1.0, LossWeights()) == pytest.approx(1.41, abs=1e-15)

    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_tensor_matches_float(self):
        rng = np.random.default_rng(5)
        parts = rng.uniform(0, 3, 4)
        lw = LossWeights(*rng.uniform(0, 1, 3))
        t = total_loss(*(Tensor(v) for v in parts), lw).item()
        assert t == pytest.approx(total_loss(*parts, lw), abs=1e-14)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)


def test_weighted_ce_gradient_includes_class_weights():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.standard_normal((2, 2, 2, 3)), requires_grad=True)
    w = Tensor(rng.uniform(0.5, 1.5, (2, 3)), requires_grad=True)
    y = rng.integers(0, 3, (2, 2, 2))
    assert check_gradients(lambda: supervised_ce(logits, w, y), [logits, w]).max_rel_err < 1e-4


def test_consistency_gradient_scales_with_batch():
    rng = np.random.default_rng(7)
    a = Tensor(rng.standard_normal((2, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2, 2, 2)))
    with Tape() as tape:
        tape.backward(consistency_loss(a, b, 2)[0])
    np.testing.assert_allclose(a.grad, (a.data - b.data), rtol=1e-15)
