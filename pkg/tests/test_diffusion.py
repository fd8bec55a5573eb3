import math

import numpy as np
import pytest

from speechmotion import diffusion as D
from speechmotion.errors import ConfigError
from speechmotion.tensor import make_rng


def make_two_step(abar1, abar2):
    """Schedule with exactly the alpha_bar values a test needs."""
    a1, a2 = abar1, abar2 / abar1
    beta = np.array([1.0 - a1, 1.0 - a2])
    alpha = 1.0 - beta
    return D.NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


class TestBuildSchedule:
    def test_default_thousand_step_tail(self):
        s = D.build_schedule(1000, 1e-4, 2e-2)
        # oracle: direct product over 1000 terms
        prod = 1.0
        for b in np.linspace(1e-4, 2e-2, 1000):
            prod *= 1.0 - b
        assert s.abar(1000) == pytest.approx(prod, rel=1e-10)
        assert s.abar(1000) == pytest.approx(4.04e-5, rel=5e-3)

    def test_constant_beta_closed_form(self):
        beta = 0.03
        s = D.build_schedule(50, beta, beta)
        for t in (1, 7, 50):
            assert s.abar(t) == pytest.approx((1.0 - beta) ** t, rel=1e-12)

    def test_single_step(self):
        s = D.build_schedule(1, 0.2, 0.2)
        assert s.alpha_bar.tolist() == [pytest.approx(0.8)]

    def test_invariants_enforced(self):
        with pytest.raises(ConfigError):
            D.build_schedule(10, 0.0, 0.1)
        with pytest.raises(ConfigError):
            D.build_schedule(10, 0.5, 0.2)
        with pytest.raises(ConfigError):
            D.NoiseSchedule(beta=np.array([0.1, 0.1]),
                            alpha=np.array([0.9, 0.9]),
                            alpha_bar=np.array([0.9, 0.9]))  # not decreasing

    def test_random_schedules_consistent(self):
        rng = make_rng(11)
        for _ in range(20):
            T = int(rng.integers(1, 200))
            lo = float(rng.uniform(1e-5, 0.1))
            hi = float(rng.uniform(lo, 0.5))
            s = D.build_schedule(T, lo, hi)
            assert np.all(np.diff(s.alpha_bar) < 0) or T == 1
            ratio = s.alpha_bar[1:] / s.alpha_bar[:-1]
            assert np.abs(ratio - s.alpha[1:]).max() < 1e-7 if T > 1 else True


class TestQSample:
    def test_no_noise_limit(self):
        s = D.build_schedule(5, 1e-12, 1e-12)
        x0 = np.array([1.0, -2.0, 3.0])
        out = D.q_sample(x0, 5, np.zeros(3), s)
        assert np.allclose(out, x0, atol=1e-9)

    def test_hand_case(self):
        s = make_two_step(0.5, 0.25)
        out = D.q_sample(np.array([2.0]), 2, np.array([1.0]), s)
        assert out[0] == pytest.approx(1.0 + math.sqrt(0.75), abs=1e-12)

    def test_zero_eps(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        x0 = make_rng(0).standard_normal((4, 3))
        out = D.q_sample(x0, 7, np.zeros_like(x0), s)
        assert np.allclose(out, math.sqrt(s.abar(7)) * x0)

    def test_shape_mismatch(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        with pytest.raises(ValueError):
            D.q_sample(np.zeros((2, 3)), 1, np.zeros((3, 2)), s)


class TestPredictX0:
    def test_roundtrip_all_steps(self):
        s = D.build_schedule(1000, 1e-4, 2e-2)
        rng = make_rng(5)
        x0 = rng.standard_normal((8, 4))
        for t in (1, 2, 17, 500, 999, 1000):
            eps = rng.standard_normal(x0.shape)
            back = D.predict_x0(D.q_sample(x0, t, eps, s), eps, t, s)
            assert np.abs(back - x0).max() < 1e-6

    def test_hand_case(self):
        s = make_two_step(0.5, 0.25)
        out = D.predict_x0(np.array([1.0]), np.array([0.5]), 2, s)
        assert out[0] == pytest.approx((1.0 - math.sqrt(0.75) * 0.5) / 0.5, abs=1e-9)
        assert out[0] == pytest.approx(1.1340, abs=1e-4)

    def test_zero_eps_hat(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        x_t = np.array([2.0])
        out = D.predict_x0(x_t, np.zeros(1), 4, s)
        assert out[0] == pytest.approx(2.0 / math.sqrt(s.abar(4)), rel=1e-12)


class TestDdpmStep:
    def test_terminal_step_deterministic(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        x = np.array([0.7])
        eps_hat = np.array([0.3])
        a = D.ddpm_step(x, eps_hat, 1, s, make_rng(1))
        b = D.ddpm_step(x, eps_hat, 1, s, make_rng(2))
        assert np.array_equal(a, b)
        mean = (x - s.beta_at(1) / math.sqrt(1 - s.abar(1)) * eps_hat) / math.sqrt(s.alpha_at(1))
        assert np.allclose(a, mean)

    def test_small_beta_degenerate(self):
        s = D.build_schedule(5, 1e-12, 1e-12)
        x = np.array([1.5])
        out = D.ddpm_step(x, np.array([0.2]), 3, s, make_rng(0))
        assert out[0] == pytest.approx(1.5, abs=1e-5)

    def test_hand_case_mean(self):
        s = make_two_step(0.50505, 0.50505 * 0.99)
        out = D.ddpm_step(np.array([1.0]), np.array([0.2]), 2, s, make_rng(0))
        mean = (1.0 - 0.01 * 0.2 / math.sqrt(1 - s.abar(2))) / math.sqrt(0.99)
        # strip the stochastic part by regenerating the same draw
        var = (1 - s.abar(1)) / (1 - s.abar(2)) * 0.01
        z = make_rng(0).standard_normal((1,))
        assert out[0] - math.sqrt(var) * z[0] == pytest.approx(mean, abs=1e-9)
        assert mean == pytest.approx(1.00219, abs=2e-4)

    def test_chain_matches_gaussian_target(self):
        # closed-form conditional-mean noise for x0 ~ N(m, s^2); 10k parallel chains
        m, sd = 0.5, 1.2
        sched = D.build_schedule(1000, 1e-4, 2e-2)
        rng = make_rng(99)
        x = rng.standard_normal(10_000)
        for t in range(1000, 0, -1):
            ab = sched.abar(t)
            v = ab * sd * sd + 1.0 - ab
            eps_hat = math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * m) / v
            x = D.ddpm_step(x, eps_hat, t, sched, rng)
        se_mean = sd / math.sqrt(x.size)
        se_var = sd * sd * math.sqrt(2.0 / (x.size - 1))
        assert abs(x.mean() - m) < 3 * se_mean
        assert abs(x.var() - sd * sd) < 3 * se_var


class TestDdimStep:
    def test_exact_score_one_hop_recovery(self):
        s = D.build_schedule(1000, 1e-4, 2e-2)
        rng = make_rng(21)
        x0 = rng.standard_normal((6, 3))
        for t in (1000, 613, 50, 2):
            eps = rng.standard_normal(x0.shape)
            x_t = D.q_sample(x0, t, eps, s)
            out = D.ddim_step(x_t, eps, t, 0, s)
            assert np.abs(out - x0).max() < 1e-5

    def test_two_hops_equal_one_hop_with_exact_noise(self):
        s = D.build_schedule(1000, 1e-4, 2e-2)
        rng = make_rng(22)
        x0 = rng.standard_normal((4, 2))
        eps = rng.standard_normal(x0.shape)
        t_hi, t_mid, t_lo = 800, 450, 100

        def exact_eps(x, t):
            ab = s.abar(t)
            return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

        x_hi = D.q_sample(x0, t_hi, eps, s)
        direct = D.ddim_step(x_hi, exact_eps(x_hi, t_hi), t_hi, t_lo, s)
        mid = D.ddim_step(x_hi, exact_eps(x_hi, t_hi), t_hi, t_mid, s)
        chained = D.ddim_step(mid, exact_eps(mid, t_mid), t_mid, t_lo, s)
        assert np.abs(direct - chained).max() < 1e-9

    def test_hand_case(self):
        s = make_two_step(0.81, 0.25)
        out = D.ddim_step(np.array([1.0]), np.array([0.5]), 2, 1, s)
        x0_hat = (1.0 - math.sqrt(0.75) * 0.5) / 0.5
        expect = 0.9 * x0_hat + math.sqrt(0.19) * 0.5
        assert out[0] == pytest.approx(expect, abs=1e-9)
        assert out[0] == pytest.approx(1.2386, abs=2e-4)

    def test_non_monotone_rejected(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        with pytest.raises(ValueError):
            D.ddim_step(np.zeros(1), np.zeros(1), 3, 3, s)


class TestSubsample:
    def test_identity(self):
        s = D.build_schedule(37, 1e-3, 2e-2)
        sub = D.subsample_schedule(s, 37)
        assert sub.steps == tuple(range(37, 0, -1))

    def test_paper_scale_stride(self):
        s = D.build_schedule(1000, 1e-4, 2e-2)
        sub = D.subsample_schedule(s, 25)
        assert len(sub) == 25
        assert sub.steps[0] == 1000
        assert all(a - b == 40 for a, b in zip(sub.steps, sub.steps[1:]))

    def test_single_step(self):
        s = D.build_schedule(64, 1e-3, 2e-2)
        sub = D.subsample_schedule(s, 1)
        assert sub.steps == (64,)

    def test_out_of_range(self):
        s = D.build_schedule(10, 1e-3, 2e-2)
        with pytest.raises(ConfigError):
            D.subsample_schedule(s, 0)
        with pytest.raises(ConfigError):
            D.subsample_schedule(s, 11)
