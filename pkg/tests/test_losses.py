import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmc.losses import LossSpec, log_softmax, loss_grad, loss_value, mean_loss, softmax

SPECS = [LossSpec("cross_entropy"), LossSpec("mse"), LossSpec("rsl", 1.0, 25.0), LossSpec("rsl", 2.5, 0.5)]


def _numeric_grad(spec, z, y, h=1e-6):
    g = np.zeros_like(z)
    for j in range(z.size):
        e = np.zeros_like(z)
        e.flat[j] = h
        g.flat[j] = (loss_value(spec, z + e, y) - loss_value(spec, z - e, y)) / (2 * h)
    return g


class TestValues:
    def test_rsl_hand_example(self):
        # K=3, y=0, alpha=2, beta=4: (2*(1-4)^2 + 2^2 + 3^2) / 3
        assert loss_value(LossSpec("rsl", 2.0, 4.0), np.array([1.0, 2.0, 3.0]), 0) == pytest.approx(31 / 3)

    def test_mse_hand_example(self):
        assert loss_value(LossSpec("mse"), np.array([1.0, 2.0]), 1) == pytest.approx((1 + 1) / 2)

    def test_cross_entropy_matches_log_sum_exp(self):
        z = np.array([0.3, -1.2, 2.0])
        assert loss_value(LossSpec("cross_entropy"), z, 2) == pytest.approx(np.log(np.exp(z).sum()) - 2.0)

    def test_cross_entropy_is_stable_for_large_logits(self):
        assert np.isfinite(loss_value(LossSpec("cross_entropy"), np.array([1000.0, -1000.0]), 1))

    def test_softmax_sums_to_one(self):
        p = softmax(np.array([[1e3, 0.0, -1e3], [1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(p.sum(1), 1.0)
        np.testing.assert_allclose(np.exp(log_softmax(np.array([1.0, 2.0]))), softmax(np.array([1.0, 2.0])))

    def test_mean_loss(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert mean_loss(LossSpec("mse"), z, [0, 1]) == 0.0


class TestValidation:
    @pytest.mark.parametrize("alpha,beta", [(0, 1), (1, 0), (-1, 1)])
    def test_rsl_parameters_must_be_positive(self, alpha, beta):
        with pytest.raises(ValueError):
            LossSpec("rsl", alpha, beta)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            LossSpec("hinge")

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_value(LossSpec("mse"), np.zeros((2, 3)), [0, 3])

    def test_label_count(self):
        with pytest.raises(ValueError):
            loss_value(LossSpec("mse"), np.zeros((2, 3)), [0])

    def test_fractional_labels(self):
        with pytest.raises(ValueError):
            loss_value(LossSpec("mse"), np.zeros((1, 3)), [0.5])


class TestGradients:
    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.alpha}-{s.beta}")
    def test_against_central_differences(self, spec):
        r = np.random.default_rng(0)
        z = r.normal(scale=2.0, size=(5, 4))
        y = r.integers(0, 4, size=5)
        num = np.stack([_numeric_grad(spec, z[i], y[i]) for i in range(5)])
        np.testing.assert_allclose(loss_grad(spec, z, y), num, rtol=1e-6, atol=1e-7)

    def test_cross_entropy_grad_sums_to_zero(self):
        g = loss_grad(LossSpec("cross_entropy"), np.array([[0.1, 0.7, -0.2]]), [1])
        assert abs(g.sum()) < 1e-15

    def test_rsl_minimum_at_target(self):
        spec = LossSpec("rsl", 3.0, 7.0)
        z = np.array([0.0, 7.0, 0.0])
        assert loss_value(spec, z, 1) == 0.0
        np.testing.assert_array_equal(loss_grad(spec, z, 1), 0.0)


class TestDegeneracy:
    @settings(max_examples=100)
    @given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_rsl_one_one_equals_mse(self, K, n, seed):
        r = np.random.default_rng(seed)
        z = r.normal(scale=5.0, size=(n, K))
        y = r.integers(0, K, size=n)
        a = loss_value(LossSpec("rsl", 1.0, 1.0), z, y)
        b = loss_value(LossSpec("mse"), z, y)
        assert np.max(np.abs(a - b)) <= 1e-15 * max(1.0, float(np.max(np.abs(b))))
        np.testing.assert_array_equal(loss_grad(LossSpec("rsl", 1.0, 1.0), z, y), loss_grad(LossSpec("mse"), z, y))
