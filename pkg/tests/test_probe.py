"""Frozen-feature probe tests: solver optimality against an independent
optimizer, trunk-only feature extraction, and the low-shot protocol."""

import numpy as np
import pytest
import scipy.optimize

from msn import tensor as T
from msn.data import synth_dataset
from msn.encoder import EncoderConfig, init_params
from msn.masking import MaskSpec
from msn.probe import (FeatureBank, ProbeConfig, _objective_and_grad,
                       extract_features, fit_logistic, l2_rows, lowshot_eval,
                       mask_invariance, probe_accuracy)
from msn.tensor import ParameterError

TINY = EncoderConfig(image_size=16, patch_size=4, depth=1, hidden_dim=16,
                     heads=2, head_output_dim=8)


def toy_problem(rng, n=60, d=6, classes=3):
    x = rng.normal(size=(n, d))
    w_true = rng.normal(size=(d, classes)) * 2.0
    y = np.argmax(x @ w_true + 0.3 * rng.normal(size=(n, classes)), axis=1)
    return x, y


class TestSolver:
    def test_matches_independent_optimizer(self, rng):
        # same objective handed to scipy L-BFGS must land at the same optimum
        x, y = toy_problem(rng)
        bank = FeatureBank(x, y)
        lam = 1e-2
        res = fit_logistic(bank, ProbeConfig(lam, max_iters=2000, tol=1e-8))
        assert res.converged

        onehot = np.zeros((len(y), 3))
        onehot[np.arange(len(y)), y] = 1.0

        def fun(wflat):
            o, g = _objective_and_grad(wflat.reshape(6, 3), x, onehot, lam)
            return o, g.ravel()

        ref = scipy.optimize.minimize(fun, np.zeros(18), jac=True,
                                      method="L-BFGS-B",
                                      options={"gtol": 1e-10, "maxiter": 2000})
        assert abs(res.objective - ref.fun) < 1e-8
        np.testing.assert_allclose(res.weights.ravel(), ref.x, atol=1e-4)

    def test_gradient_small_at_reported_optimum(self, rng):
        x, y = toy_problem(rng)
        res = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-2, 2000, 1e-8))
        onehot = np.zeros((len(y), 3))
        onehot[np.arange(len(y)), y] = 1.0
        _, g = _objective_and_grad(res.weights, x, onehot, 1e-2)
        assert np.linalg.norm(g) < 1e-8

    def test_deterministic(self, rng):
        x, y = toy_problem(rng)
        a = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-3))
        b = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-3))
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_separable_data_fits(self, rng):
        x = np.concatenate([rng.normal(size=(20, 4)) + 4.0,
                            rng.normal(size=(20, 4)) - 4.0])
        y = np.array([0] * 20 + [1] * 20)
        res = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-3))
        assert probe_accuracy(res, x, y) == 1.0

    def test_stronger_l2_shrinks_weights(self, rng):
        x, y = toy_problem(rng)
        small = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-4, 2000, 1e-8))
        big = fit_logistic(FeatureBank(x, y), ProbeConfig(1.0, 2000, 1e-8))
        assert np.linalg.norm(big.weights) < np.linalg.norm(small.weights)

    def test_nonconsecutive_class_ids(self):
        x = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        y = np.array([2, 2, 7, 7])
        res = fit_logistic(FeatureBank(x, y), ProbeConfig(1e-3))
        assert set(res.classes) == {2, 7}
        assert probe_accuracy(res, x, y) == 1.0

    def test_rejects_nonpositive_l2(self):
        with pytest.raises(ParameterError):
            ProbeConfig(0.0)


class TestFeatureExtraction:
    def setup_method(self):
        self.params = init_params(TINY, T.Rng(0))
        self.ds = synth_dataset(3, 6, 16, T.Rng(1))

    def test_shape_and_labels(self):
        bank = extract_features(self.params, TINY, self.ds)
        assert bank.features.shape == (18, TINY.hidden_dim)
        assert list(bank.labels) == [r.label for r in self.ds]

    def test_deterministic(self):
        a = extract_features(self.params, TINY, self.ds)
        b = extract_features(self.params, TINY, self.ds)
        np.testing.assert_array_equal(a.features, b.features)

    def test_batch_size_does_not_change_features(self):
        a = extract_features(self.params, TINY, self.ds, batch=4)
        b = extract_features(self.params, TINY, self.ds, batch=256)
        np.testing.assert_allclose(a.features, b.features, atol=1e-12)

    def test_projection_head_is_unused(self):
        # scrambling every head parameter must not move trunk features
        scrambled = self.params.copy()
        gen = np.random.default_rng(0)
        for name, p in scrambled.tensors.items():
            if name.startswith("head."):
                p.data[...] = gen.normal(size=p.data.shape)
        a = extract_features(self.params, TINY, self.ds)
        b = extract_features(scrambled, TINY, self.ds)
        np.testing.assert_array_equal(a.features, b.features)

    def test_masked_extraction_deterministic_and_distinct(self):
        spec = MaskSpec("random", ratio=0.5)
        a = extract_features(self.params, TINY, self.ds, mask=spec, seed=3)
        b = extract_features(self.params, TINY, self.ds, mask=spec, seed=3)
        c = extract_features(self.params, TINY, self.ds, mask=spec, seed=4)
        full = extract_features(self.params, TINY, self.ds)
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.array_equal(a.features, c.features)
        assert not np.array_equal(a.features, full.features)

    def test_none_mask_spec_is_full_sequence(self):
        spec = MaskSpec("none")
        a = extract_features(self.params, TINY, self.ds, mask=spec)
        full = extract_features(self.params, TINY, self.ds)
        np.testing.assert_array_equal(a.features, full.features)


class TestLowShotProtocol:
    def setup_method(self):
        self.params = init_params(TINY, T.Rng(0))
        self.ds = synth_dataset(3, 20, 16, T.Rng(1))

    def test_report_statistics(self):
        rep = lowshot_eval(self.params, TINY, self.ds, k=2, seeds=[0, 1, 2])
        assert rep.k == 2 and rep.seeds == [0, 1, 2]
        assert len(rep.per_seed_top1) == 3
        assert abs(rep.mean_top1 - np.mean(rep.per_seed_top1)) < 1e-12
        assert abs(rep.std_top1 - np.std(rep.per_seed_top1)) < 1e-12
        for a in rep.per_seed_top1:
            assert 0.0 <= a <= 1.0

    def test_deterministic(self):
        a = lowshot_eval(self.params, TINY, self.ds, k=2, seeds=[0, 1])
        b = lowshot_eval(self.params, TINY, self.ds, k=2, seeds=[0, 1])
        assert a.per_seed_top1 == b.per_seed_top1

    def test_reuses_supplied_bank(self):
        bank = extract_features(self.params, TINY, self.ds)
        a = lowshot_eval(self.params, TINY, self.ds, k=2, seeds=[5], bank=bank)
        b = lowshot_eval(self.params, TINY, self.ds, k=2, seeds=[5])
        assert a.per_seed_top1 == b.per_seed_top1


class TestMaskInvariance:
    def setup_method(self):
        self.params = init_params(TINY, T.Rng(0))
        self.ds = synth_dataset(3, 4, 16, T.Rng(1))

    def test_zero_ratio_is_exactly_one(self):
        assert mask_invariance(self.params, TINY, self.ds, 0.0) == 1.0

    def test_masked_similarity_below_one(self):
        sim = mask_invariance(self.params, TINY, self.ds, 0.75, seed=1)
        assert -1.0 <= sim < 1.0

    def test_deterministic(self):
        a = mask_invariance(self.params, TINY, self.ds, 0.5, seed=2)
        b = mask_invariance(self.params, TINY, self.ds, 0.5, seed=2)
        assert a == b

    def test_rejects_bad_ratio(self):
        with pytest.raises(ParameterError):
            mask_invariance(self.params, TINY, self.ds, 1.0)


class TestRowNormalize:
    def test_unit_norms(self, rng):
        x = rng.normal(size=(5, 7))
        n = np.linalg.norm(l2_rows(x), axis=1)
        np.testing.assert_allclose(n, 1.0, atol=1e-12)

    def test_zero_row_maps_to_zero(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0]])
        out = l2_rows(x)
        np.testing.assert_array_equal(out[0], [0.0, 0.0])
        np.testing.assert_allclose(out[1], [0.6, 0.8])