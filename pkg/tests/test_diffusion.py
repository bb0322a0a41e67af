import math

import numpy as np
import pytest
import torch

from stimpute.diffusion import (
    NoiseSchedule,
    forward_sample,
    forward_sample_batch,
    make_noise_schedule,
    masked_noise_loss,
    reverse_step,
)

# product of (1 - beta_t) for the T=50, 1e-4..0.2 quadratic schedule, from a plain loop
ALPHA_BAR_50 = 0.02532591215871446


class TestSchedule:
    def test_endpoints_t100(self):
        s = make_noise_schedule(100, 1e-4, 0.2, "quadratic")
        assert s.beta[0] == 1e-4
        assert s.beta[-1] == 0.2

    def test_single_step_linear(self):
        s = make_noise_schedule(1, 0.1, 0.1, "linear")
        assert s.alpha_bar[1] == pytest.approx(0.9, abs=1e-15)

    def test_product_matches_loop(self):
        s = make_noise_schedule(50, 1e-4, 0.2, "quadratic")
        assert abs(s.alpha_bar[50] - ALPHA_BAR_50) <= 1e-12
        prod = 1.0
        for t in range(1, 51):
            prod *= 1.0 - s.beta[t - 1]
            assert abs(s.alpha_bar[t] - prod) <= 1e-12

    def test_quadratic_has_even_root_spacing(self):
        s = make_noise_schedule(20, 1e-4, 0.2)
        np.testing.assert_allclose(np.diff(np.sqrt(s.beta)), (math.sqrt(0.2) - 1e-2) / 19, rtol=1e-9)

    @pytest.mark.parametrize("shape", ["linear", "quadratic"])
    def test_monotone(self, shape):
        s = make_noise_schedule(50, 1e-4, 0.2, shape)
        assert np.all(np.diff(s.beta) >= 0)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] == 1.0
        assert s.sigma2[0] == 0.0
        assert np.all(s.sigma2 >= 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.2, "linear"), (10, 0.3, 0.2, "linear"),
                                      (10, 0.0, 0.2, "linear"), (10, 1e-4, 1.0, "linear"),
                                      (10, 1e-4, 0.2, "cosine")])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            make_noise_schedule(*args)

    def test_metadata_round_trip(self):
        s = make_noise_schedule(7, 1e-3, 0.1, "linear")
        again = NoiseSchedule.from_metadata(s.metadata())
        assert again.same_as(s)
        np.testing.assert_array_equal(again.alpha_bar, s.alpha_bar)


class TestForward:
    def test_zero_noise(self):
        s = make_noise_schedule(50)
        x0 = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(forward_sample(x0, 25, np.zeros_like(x0), s), math.sqrt(s.alpha_bar[25]) * x0)

    def test_t0_is_identity(self):
        s = make_noise_schedule(50)
        x0 = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(forward_sample(x0, 0, np.ones_like(x0), s), x0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_sample(np.zeros((2, 3)), 1, np.zeros((3, 2)), make_noise_schedule(5))

    @pytest.mark.parametrize("t", [1, 25, 50])
    def test_moments(self, t):
        s = make_noise_schedule(50)
        rng = np.random.default_rng(t)
        n = 100_000
        x0 = np.full(n, 1.5)
        xt = forward_sample(x0, t, rng.standard_normal(n), s)
        mean, var = math.sqrt(s.alpha_bar[t]) * 1.5, 1.0 - s.alpha_bar[t]
        assert abs(xt.mean() - mean) <= 3 * math.sqrt(var / n)
        # Var of the sample variance of a Gaussian: 2 sigma^4 / (n - 1)
        assert abs(xt.var(ddof=1) - var) <= 3 * math.sqrt(2 * var**2 / (n - 1))

    def test_batch_matches_scalar(self):
        s = make_noise_schedule(10)
        x0 = torch.randn(3, 2, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        t = torch.tensor([1, 5, 10])
        out = forward_sample_batch(x0, t, eps, s)
        for i in range(3):
            ref = forward_sample(x0[i], int(t[i]), eps[i], s)
            torch.testing.assert_close(out[i], ref, rtol=0, atol=1e-15)

    def test_composition_of_single_steps(self):
        # iterating x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z has mean sqrt(ab_t) x0, var 1 - ab_t
        s = make_noise_schedule(50)
        mean, var = 1.0, 0.0
        for t in range(1, 51):
            a = s.alpha[t - 1]
            mean, var = math.sqrt(a) * mean, a * var + s.beta[t - 1]
            assert abs(mean - math.sqrt(s.alpha_bar[t])) <= 1e-12
            assert abs(var - (1 - s.alpha_bar[t])) <= 1e-12


class TestReverse:
    def test_no_noise_at_t1(self):
        s = make_noise_schedule(10)
        x = np.ones((2, 2))
        a = reverse_step(x, np.zeros_like(x), 1, s, np.random.default_rng(0))
        b = reverse_step(x, np.zeros_like(x), 1, s, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_one_step_chain_recovers_x0(self):
        s = make_noise_schedule(1, 0.3, 0.3, "linear")
        rng = np.random.default_rng(5)
        x0, eps = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        x1 = forward_sample(x0, 1, eps, s)
        np.testing.assert_allclose(reverse_step(x1, eps, 1, s), x0, rtol=0, atol=1e-10)

    def test_noise_variance(self):
        s = make_noise_schedule(50)
        t = 30
        x = reverse_step(np.zeros(100_000), np.zeros(100_000), t, s, np.random.default_rng(2))
        var = s.sigma2[t - 1]
        assert abs(x.var(ddof=1) - var) <= 3 * math.sqrt(2 * var**2 / (x.size - 1))
        assert abs(x.mean()) <= 3 * math.sqrt(var / x.size)

    def test_uses_per_step_alpha(self):
        s = make_noise_schedule(10)
        t = 6
        x, e = np.array([1.0]), np.array([0.5])
        expected = (x - s.beta[t - 1] / math.sqrt(1 - s.alpha_bar[t]) * e) / math.sqrt(s.alpha[t - 1])
        out = reverse_step(x, e, t, s, z=np.zeros(1))
        np.testing.assert_allclose(out, expected, rtol=1e-15)

    def test_torch_and_numpy_agree(self):
        s = make_noise_schedule(10)
        x, e, z = np.random.default_rng(0).normal(size=(3, 2, 5))
        out_np = reverse_step(x, e, 4, s, z=z)
        out_t = reverse_step(torch.tensor(x), torch.tensor(e), 4, s, z=torch.tensor(z))
        np.testing.assert_allclose(out_t.numpy(), out_np, rtol=1e-14)

    @pytest.mark.parametrize("t", [0, 11])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            reverse_step(np.zeros(2), np.zeros(2), t, make_noise_schedule(10))


class TestMaskedLoss:
    def test_perfect(self):
        e = np.ones((2, 3))
        assert masked_noise_loss(e, e, np.ones((2, 3))) == 0.0

    def test_unit_residual(self):
        e = np.zeros((2, 3))
        m = np.array([[1, 0, 1], [0, 1, 0]])
        assert masked_noise_loss(e, e + m, m) == 1.0

    def test_ignores_non_target_cells(self):
        rng = np.random.default_rng(0)
        e, eh = torch.tensor(rng.normal(size=(2, 4, 5))), torch.tensor(rng.normal(size=(2, 4, 5)))
        m = torch.tensor(rng.random((2, 4, 5)) < 0.4)
        base = masked_noise_loss(e, eh, m)
        perturbed = torch.where(m, eh, eh + torch.tensor(rng.normal(size=(2, 4, 5)) * 1e3))
        assert masked_noise_loss(e, perturbed, m).item() == base.item()

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            masked_noise_loss(np.zeros(3), np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            masked_noise_loss(torch.zeros(3), torch.zeros(3), torch.zeros(3))
