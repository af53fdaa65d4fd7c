"""Loss tests: CE/CCC oracles, smoothing, class weights, combination linearity."""

import math

import numpy as np
import pytest

from serkit.autodiff import Tensor
from serkit.errors import ConfigError, DataError, NumericError
from serkit.losses import (
    DimTargets,
    LossConfig,
    ccc,
    ccc_loss_multi,
    class_weights_from_counts,
    smooth_labels,
    total_loss,
    weighted_cross_entropy,
)


class TestSmoothLabels:
    def test_zero_epsilon_is_identity(self):
        onehot = np.eye(7)[[0, 3, 6]]
        np.testing.assert_array_equal(smooth_labels(onehot, 0.0), onehot)

    def test_standard_smoothing_values(self):
        out = smooth_labels(np.eye(7)[[0]], 0.1)[0]
        assert out[0] == pytest.approx(0.9 + 0.1 / 7)
        np.testing.assert_allclose(out[1:], 0.1 / 7)

    def test_mixup_row_stays_on_simplex(self):
        row = np.array([[0.5, 0.5, 0, 0, 0, 0, 0.0]])
        out = smooth_labels(row, 0.1)
        np.testing.assert_allclose(out, 0.9 * row + 0.1 / 7, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            rows = rng.dirichlet(np.ones(7), size=4)
            out = smooth_labels(rows, rng.uniform(0.0, 0.99))
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_epsilon_rejected(self):
        with pytest.raises(ConfigError):
            smooth_labels(np.eye(7)[[0]], 1.0)
        with pytest.raises(ConfigError):
            smooth_labels(np.eye(7)[[0]], -0.01)


class TestWeightedCrossEntropy:
    def test_uniform_probs_give_ln7(self):
        probs = Tensor(np.full((3, 7), 1.0 / 7))
        targets = np.eye(7)[[0, 2, 5]]
        loss = weighted_cross_entropy(probs, targets, np.ones(7))
        assert loss.item() == pytest.approx(math.log(7.0), abs=1e-12)

    def test_perfect_prediction_is_zero(self):
        onehot = np.eye(7)[[1, 4]]
        loss = weighted_cross_entropy(Tensor(onehot), onehot, np.ones(7))
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_brute_force_oracle_with_weights(self):
        rng = np.random.default_rng(11)
        probs = rng.dirichlet(np.ones(7), size=3)
        targets = rng.dirichlet(np.ones(7), size=3)
        weights = np.array([2.0, 1, 1, 1, 1, 1, 1])
        loss = weighted_cross_entropy(Tensor(probs), targets, weights).item()

        expected = 0.0
        for b in range(3):
            for i in range(7):
                expected -= weights[i] * targets[b, i] * math.log(max(probs[b, i], 1e-12))
        expected /= 3
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_monotone_in_true_class_probability(self):
        """Raising p_true (renormalizing the rest) never increases the loss."""
        rng = np.random.default_rng(12)
        weights = rng.uniform(0.5, 2.0, size=7)
        for _ in range(50):
            p = rng.dirichlet(np.ones(7))
            true = int(rng.integers(0, 7))
            target = np.eye(7)[[true]]
            base = weighted_cross_entropy(Tensor(p[None, :]), target, weights).item()
            bump = min(0.5 * (1 - p[true]), 0.2)
            p2 = p * (1 - p[true] - bump) / (1 - p[true])
            p2[true] = p[true] + bump
            higher = weighted_cross_entropy(Tensor(p2[None, :]), target, weights).item()
            assert higher <= base + 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            weighted_cross_entropy(Tensor(np.full((1, 7), 1 / 7)), np.eye(7)[[0]],
                                   np.array([-1.0, 1, 1, 1, 1, 1, 1]))

    def test_gradient_flows_to_probs(self):
        probs = Tensor(np.full((2, 7), 1.0 / 7), requires_grad=True)
        loss = weighted_cross_entropy(probs, np.eye(7)[[0, 1]], np.ones(7))
        loss.backward()
        assert probs.grad is not None and np.any(probs.grad != 0)


class TestClassWeights:
    def test_uniform_counts_give_ones(self):
        np.testing.assert_allclose(class_weights_from_counts(np.full(7, 10.0)), np.ones(7))

    def test_rare_classes_upweighted_mean_one(self):
        weights = class_weights_from_counts(np.array([70, 10, 10, 10, 10, 10, 10.0]))
        assert weights[0] < weights[1]
        assert np.all(weights[1:] == weights[1])
        assert weights.mean() == pytest.approx(1.0, abs=1e-12)

    def test_empty_class_treated_as_count_one(self):
        weights = class_weights_from_counts(np.array([5, 5, 5, 5, 5, 5, 0.0]))
        assert np.isfinite(weights).all()
        assert weights[6] == weights.max()

    def test_all_zero_rejected(self):
        with pytest.raises(ConfigError):
            class_weights_from_counts(np.zeros(7))


class TestCCC:
    def test_perfect_concordance(self):
        # variance large enough that the 1e-8 degeneracy eps stays below 1e-9
        y = np.array([0.0, 10.0, 5.0, 8.0])
        assert ccc(y, y.copy()).item() == pytest.approx(1.0, abs=1e-9)

    def test_anti_symmetric_minus_one(self):
        # cov=-0.25 s^2, equal means; scaled so the 1e-8 eps stays below 1e-9
        assert ccc(np.array([0.0, 5.0]), np.array([5.0, 0.0])).item() == pytest.approx(-1.0, abs=1e-9)

    def test_spec_unit_fixture(self):
        # y=[0,1], yhat=[1,0]: cov=-0.25, vars 0.25, equal means -> -1 up to eps
        assert ccc(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item() == pytest.approx(-1.0, abs=1e-7)

    def test_constant_predictor_zero(self):
        assert ccc(np.array([0.0, 1.0]), np.array([0.5, 0.5])).item() == pytest.approx(0.0, abs=1e-12)

    def test_single_sample_degenerates_to_zero(self):
        assert ccc(np.array([0.3]), np.array([0.9])).item() == pytest.approx(0.0, abs=1e-7)

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            ccc(np.array([]), np.array([]))

    def test_symmetry(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            y = rng.normal(size=8)
            p = rng.normal(size=8)
            assert abs(ccc(y, p).item() - ccc(p, y).item()) < 1e-12

    def test_shift_strictly_decreases_from_perfect(self):
        y = np.array([0.1, 0.9, 0.4, 0.6])
        perfect = ccc(y, y.copy()).item()
        for shift in (0.05, -0.05, 0.3):
            assert ccc(y, y + shift).item() < perfect

    def test_magnitude_bounded_fuzz(self):
        rng = np.random.default_rng(22)
        for _ in range(10_000):
            n = int(rng.integers(2, 12))
            value = ccc(rng.normal(size=n) * rng.uniform(0.1, 10),
                        rng.normal(size=n) * rng.uniform(0.1, 10)).item()
            assert abs(value) <= 1.0 + 1e-9


class TestCCCLossMulti:
    def test_perfect_predictions_zero_loss(self):
        rng = np.random.default_rng(31)
        values = rng.uniform(0.0, 20.0, size=(8, 3))
        targets = DimTargets(values=values, present_mask=np.ones(8, bool))
        loss = ccc_loss_multi(targets, Tensor(values.copy()))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_all_anti_concordant_gives_two(self):
        y = np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
        preds = Tensor(np.array([[5.0, 5.0, 5.0], [0.0, 0.0, 0.0]]))
        targets = DimTargets(values=y, present_mask=np.ones(2, bool))
        assert ccc_loss_multi(targets, preds).item() == pytest.approx(2.0, abs=1e-8)

    def test_composition_oracle_random_batch(self):
        rng = np.random.default_rng(32)
        values = rng.uniform(0, 1, size=(16, 3))
        preds = rng.uniform(0, 1, size=(16, 3))
        targets = DimTargets(values=values, present_mask=np.ones(16, bool))
        loss = ccc_loss_multi(targets, Tensor(preds)).item()
        expected = np.mean([1.0 - ccc(values[:, d], preds[:, d]).item() for d in range(3)])
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_masked_rows_excluded(self):
        rng = np.random.default_rng(33)
        values = rng.uniform(0, 1, size=(6, 3))
        preds = rng.uniform(0, 1, size=(6, 3))
        mask = np.array([True, True, False, True, False, True])
        loss = ccc_loss_multi(DimTargets(values=values, present_mask=mask), Tensor(preds)).item()
        expected = np.mean([1.0 - ccc(values[mask, d], preds[mask, d]).item() for d in range(3)])
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_too_few_unmasked_contributes_zero(self, caplog):
        values = np.full((3, 3), 0.5)
        mask = np.array([True, False, False])
        with caplog.at_level("WARNING", logger="serkit.losses"):
            loss = ccc_loss_multi(DimTargets(values=values, present_mask=mask),
                                  Tensor(np.full((3, 3), 0.25)))
        assert loss.item() == 0.0
        assert any("skipped" in record.message for record in caplog.records)

    def test_gradient_flows_to_predictions(self):
        rng = np.random.default_rng(34)
        values = rng.uniform(0, 1, size=(8, 3))
        preds = Tensor(rng.uniform(0, 1, size=(8, 3)), requires_grad=True)
        ccc_loss_multi(DimTargets(values=values, present_mask=np.ones(8, bool)), preds).backward()
        assert np.any(preds.grad != 0)


class TestTotalLoss:
    def test_paper_coefficients(self):
        cfg = LossConfig()  # lambda_cat=1.0, lambda_dim=0.5
        out = total_loss(Tensor(1.0), Tensor(0.4), cfg)
        assert out.item() == pytest.approx(1.2, abs=1e-15)

    def test_zero_dim_weight_reduces_to_ce(self):
        cfg = LossConfig(lambda_dim=0.0)
        assert total_loss(Tensor(0.77), Tensor(123.0), cfg).item() == pytest.approx(0.77)

    def test_gradient_linearity(self):
        """grad(total) == lambda_cat * grad(ce) + lambda_dim * grad(ccc) within 1e-10."""
        rng = np.random.default_rng(41)
        cfg = LossConfig(lambda_cat=1.0, lambda_dim=0.5)
        raw = rng.normal(size=(6, 7))
        targets = smooth_labels(np.eye(7)[rng.integers(0, 7, size=6)], 0.1)
        dim_values = rng.uniform(0, 1, size=(6, 3))
        dim_targets = DimTargets(values=dim_values, present_mask=np.ones(6, bool))

        def grads_of(fn):
            x = Tensor(raw, requires_grad=True)
            fn(x).backward()
            return x.grad.copy()

        def ce_branch(x):
            return weighted_cross_entropy(x.softmax(), targets, np.ones(7))

        def ccc_branch(x):
            return ccc_loss_multi(dim_targets, x[:, :3].sigmoid())

        def combined(x):
            return total_loss(ce_branch(x), ccc_branch(x), cfg)

        lhs = grads_of(combined)
        rhs = cfg.lambda_cat * grads_of(ce_branch) + cfg.lambda_dim * grads_of(ccc_branch)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_non_finite_component_named(self):
        inf = Tensor(1.0)
        inf.data = np.array([np.inf])  # bypass op-level checks
        with pytest.raises(NumericError, match="categorical"):
            total_loss(inf, Tensor(0.0), LossConfig())
        with pytest.raises(NumericError, match="dimensional"):
            total_loss(Tensor(0.0), inf, LossConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(lambda_cat=-0.1)
        with pytest.raises(ConfigError):
            LossConfig(epsilon_smooth=1.5)
        with pytest.raises(ConfigError):
            LossConfig(class_weights=np.zeros(7))
