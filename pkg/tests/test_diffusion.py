import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from objlidar.diffusion import (
    forward_sample,
    make_schedule,
    repaint_loop,
    repaint_step,
    reverse_step,
    sample_loop,
    scaled_schedule,
)
from objlidar.errors import ConfigError, ValidationError

from oracles import alpha_bar_table, posterior_mean


class TestSchedule:
    def test_endpoints(self):
        s = make_schedule()
        assert s.steps == 1000
        assert s.beta[1] == pytest.approx(1e-4, abs=1e-15)
        assert s.beta[1000] == pytest.approx(0.02, abs=1e-15)
        assert s.alpha_bar[0] == 1.0

    def test_running_product(self):
        s = make_schedule()
        ref = alpha_bar_table(list(s.beta[1:]))
        assert np.max(np.abs(s.alpha_bar - ref)) < 1e-12

    def test_monotone(self):
        s = make_schedule()
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] < 1e-4

    def test_scaled_terminal(self):
        assert scaled_schedule(50).alpha_bar[-1] < 1e-3
        np.testing.assert_array_equal(scaled_schedule(1000).beta, make_schedule().beta)

    @pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.01), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_schedule(10).beta[3] = 0.5


class TestForward:
    def test_t0_identity(self, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(forward_sample(x, 0, rng.normal(size=x.shape), make_schedule(10)), x)

    def test_closed_form(self, rng):
        s = make_schedule(20)
        x, e = rng.normal(size=5), rng.normal(size=5)
        ab = alpha_bar_table(list(s.beta[1:]))[7]
        np.testing.assert_allclose(forward_sample(x, 7, e, s), math.sqrt(ab) * x + math.sqrt(1 - ab) * e, rtol=1e-12)

    def test_per_sample_t(self, rng):
        s = make_schedule(20)
        x, e = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
        out = forward_sample(x, np.array([1, 10, 20]), e, s)
        for i, t in enumerate([1, 10, 20]):
            np.testing.assert_array_equal(out[i], forward_sample(x[i], t, e[i], s))

    def test_errors(self, rng):
        s = make_schedule(10)
        with pytest.raises(ValidationError):
            forward_sample(np.zeros(3), 11, np.zeros(3), s)
        with pytest.raises(ValidationError):
            forward_sample(np.zeros(3), 2, np.zeros(4), s)

    @pytest.mark.parametrize("t", [1, 500, 1000])
    def test_clt_moments(self, t):
        s = make_schedule()
        n, x0 = 10_000, np.array([0.8, -0.3])
        rng = np.random.default_rng(t)
        xt = forward_sample(np.tile(x0, (n, 1)), t, rng.standard_normal((n, 2)), s)
        ab = s.alpha_bar[t]
        var = 1 - ab
        assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * x0) < 4 * math.sqrt(var / n))
        # var of the sample variance for a Gaussian is 2 var^2 / (n - 1)
        assert np.all(np.abs(xt.var(0, ddof=1) - var) < 4 * var * math.sqrt(2 / (n - 1)))


class TestReverse:
    def test_matches_posterior_mean_with_true_noise(self, rng):
        s = make_schedule(30)
        betas = list(s.beta[1:])
        for t in (2, 15, 30):
            x0, e = rng.normal(size=6), rng.normal(size=6)
            xt = forward_sample(x0, t, e, s)
            # noise drawn from a zero-variance generator stand-in
            out = reverse_step(xt, e, t, s, _ZeroRng())
            np.testing.assert_allclose(out, posterior_mean(x0, xt, t, betas), rtol=1e-10, atol=1e-12)

    def test_t1_deterministic(self, rng):
        s = make_schedule(10)
        x, e = rng.normal(size=4), rng.normal(size=4)
        a = reverse_step(x, e, 1, s, np.random.default_rng(0))
        b = reverse_step(x, e, 1, s, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, (x - s.beta[1] / math.sqrt(1 - s.alpha_bar[1]) * e) / math.sqrt(s.alpha[1]))

    def test_posterior_variance(self):
        s = make_schedule(10)
        t = 4
        ref = (1 - s.alpha_bar[3]) / (1 - s.alpha_bar[4]) * s.beta[4]
        assert s.posterior_variance(t) == pytest.approx(ref, rel=1e-14)

    def test_bad_t(self):
        with pytest.raises(ValidationError):
            reverse_step(np.zeros(2), np.zeros(2), 0, make_schedule(5), np.random.default_rng())

    def test_sample_loop_shape_and_determinism(self):
        s = make_schedule(8)
        den = lambda x, t: 0.1 * x
        a = sample_loop((3, 2), den, s, np.random.default_rng(4))
        b = sample_loop((3, 2), den, s, np.random.default_rng(4))
        assert a.shape == (3, 2)
        np.testing.assert_array_equal(a, b)

    def test_bad_denoiser_shape(self):
        with pytest.raises(ValidationError):
            sample_loop((3,), lambda x, t: np.zeros(2), make_schedule(3), np.random.default_rng())


class _ZeroRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


class TestRepaint:
    def test_known_region_exact(self, rng):
        s = make_schedule(12)
        known = rng.normal(size=(5, 6))
        mask = rng.random((5, 6)) < 0.4
        out = repaint_loop(known, mask, lambda x, t: 0.3 * x, s, rng)
        np.testing.assert_array_equal(out[mask], known[mask])
        assert not np.allclose(out[~mask], known[~mask])

    def test_full_mask(self, rng):
        s = make_schedule(5)
        known = rng.normal(size=7)
        np.testing.assert_array_equal(repaint_loop(known, np.ones(7), lambda x, t: x, s, rng), known)

    def test_empty_mask_is_sampling(self):
        s = make_schedule(6)
        den = lambda x, t: 0.2 * x
        a = repaint_loop(np.zeros((2, 3)), np.zeros((2, 3)), den, s, np.random.default_rng(3))
        b = sample_loop((2, 3), den, s, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_step_noises_known_part(self):
        s = make_schedule(10)
        known, free = np.ones(4), np.zeros(4)
        mask = np.array([1, 0, 1, 0])
        out = repaint_step(free, known, mask, 5, s, _ZeroRng())
        np.testing.assert_allclose(out, [math.sqrt(s.alpha_bar[4]), 0, math.sqrt(s.alpha_bar[4]), 0])

    def test_non_binary_mask(self):
        with pytest.raises(ValidationError):
            repaint_step(np.zeros(2), np.zeros(2), np.array([0.5, 1]), 2, make_schedule(3), _ZeroRng())

    @given(st.integers(1, 10), st.integers(0, 2 ** 16))
    def test_property_known_preserved(self, steps, seed):
        rng = np.random.default_rng(seed)
        known = rng.normal(size=8)
        mask = rng.random(8) < 0.5
        out = repaint_loop(known, mask, lambda x, t: np.tanh(x), make_schedule(steps), rng)
        assert np.array_equal(out[mask], known[mask])
