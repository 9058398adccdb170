import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualseg.pseudo import consensus, softmax_np, threshold_labels, variance_study
from dualseg.tensor import ShapeError


class TestConsensus:
    def test_idempotent(self):
        p = softmax_np(np.random.default_rng(0).standard_normal((2, 3, 3, 4)))
        assert np.array_equal(consensus(p, p), p)

    def test_symmetric_pair(self):
        np.testing.assert_array_equal(consensus([1.0, 0.0], [0.0, 1.0]), [0.5, 0.5])

    def test_shapes(self):
        with pytest.raises(ShapeError):
            consensus(np.zeros(2), np.zeros(3))


class TestThreshold:
    def test_confident(self):
        plb = threshold_labels(np.array([[0.98, 0.02]]), 0.95)
        assert plb.labels.tolist() == [0] and plb.mask.tolist() == [True]

    def test_boundary_is_ignored(self):
        plb = threshold_labels(np.array([[0.95, 0.05]]), 0.95)
        assert plb.labels.tolist() == [2] and plb.mask.tolist() == [False]
        assert plb.ignore_index == 2

    def test_tie_goes_to_lowest_index(self):
        plb = threshold_labels(np.array([[0.5, 0.5]]), 0.4)
        assert plb.labels.tolist() == [0]

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            threshold_labels(np.array([[0.5, 0.5]]), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mask_fraction_monotone_in_tau(self, seed):
        p = softmax_np(3.0 * np.random.default_rng(seed).standard_normal((2, 4, 4, 4)))
        fracs = [threshold_labels(p, tau).mask_fraction for tau in np.linspace(0.05, 0.99, 25)]
        assert all(a >= b for a, b in zip(fracs, fracs[1:]))


class TestVarianceStudy:
    def test_independent_halves(self):
        assert 0.45 <= variance_study(rho=0.0, trials=20_000).ratio <= 0.55

    def test_perfect_correlation(self):
        r = variance_study(rho=1.0, trials=5_000)
        assert r.ratio == pytest.approx(1.0, abs=1e-12)

    def test_closed_form_consistency(self):
        r = variance_study(rho=0.5, trials=10_000, seed=3)
        assert r.var_avg == pytest.approx(r.closed_form, rel=1e-9)

    def test_deterministic(self):
        assert variance_study(trials=1000, seed=4) == variance_study(trials=1000, seed=4)

    def test_trials_positive(self):
        with pytest.raises(ValueError):
            variance_study(trials=0)
