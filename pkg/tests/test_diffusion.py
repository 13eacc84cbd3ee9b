import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

import oracles
from windtunnel.diffusion import (
    AnalyticGaussianDenoiser,
    CondBatch,
    ListSource,
    OracleNoiseDenoiser,
    ScheduleError,
    default_beta_range,
    draw_sample,
    forward_noise,
    make_schedule,
    posterior_mean,
    quantile_bands,
    sample,
    sample_many,
    train_step,
)
from windtunnel.retrieval import build_observation


def _conds(n, hl=4, T=3, K=1, seed=0, with_target=True):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        nb = [(rng.standard_normal(hl), rng.standard_normal(T)) for _ in range(K)]
        fut = rng.standard_normal(T) if with_target else None
        out.append(build_observation(rng.standard_normal(hl), nb, T, target_future=fut))
    return out


class ZeroDenoiser:
    def predict_noise(self, xh, h, cond):
        return np.zeros_like(xh)


# schedule ----------------------------------------------------------------------


def test_schedule_examples():
    np.testing.assert_allclose(make_schedule(1, 0.5, 0.5).alpha_bar, [0.5])
    np.testing.assert_allclose(make_schedule(2, 0.1, 0.2).alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_literal_ddpm_range_over_100_steps():
    s = make_schedule(100, 1e-4, 0.02)
    betas = [1e-4 + (0.02 - 1e-4) * i / 99 for i in range(100)]
    expected = oracles.alpha_bar(betas)
    np.testing.assert_allclose(s.alpha_bar, expected, rtol=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] == pytest.approx(0.36356, abs=1e-5)


def test_default_range_reaches_noise():
    s = make_schedule(100)
    assert default_beta_range(100) == pytest.approx((1e-3, 0.2))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.01
    lo, hi = default_beta_range(1)
    assert hi < 1 and lo <= hi


@given(st.integers(1, 300), st.floats(1e-5, 0.2), st.floats(0, 0.5))
def test_schedule_invariants(H, bmin, span):
    bmax = min(bmin + span, 0.99)
    s = make_schedule(H, bmin, bmax)
    assert np.all((s.beta > 0) & (s.beta < 1)) and np.all(np.diff(s.beta) >= 0)
    np.testing.assert_allclose(s.alpha_bar, oracles.alpha_bar(s.beta.tolist()), rtol=1e-12)
    if H > 1:
        assert np.all(np.diff(s.alpha_bar) < 0)
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    np.testing.assert_allclose(s.posterior_var, (1 - prev) / (1 - s.alpha_bar) * s.beta, rtol=1e-12)
    assert s.posterior_var[0] == 0.0


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


# forward noising and posterior mean -------------------------------------------


def test_forward_noise_examples():
    s2 = make_schedule(2, 0.1, 0.2)
    out = forward_noise([1.0], 2, [1.0], s2)
    assert out[0] == pytest.approx(math.sqrt(0.72) + math.sqrt(0.28), abs=1e-12)
    assert out[0] == pytest.approx(1.37756, abs=2e-4)
    tiny = make_schedule(3, 1e-12, 1e-12)
    np.testing.assert_allclose(forward_noise([0.3, -2.0], 3, [5.0, 5.0], tiny), [0.3, -2.0], atol=1e-5)
    eps = np.array([0.5, -1.5])
    np.testing.assert_allclose(forward_noise(np.zeros(2), 1, eps, s2), math.sqrt(0.1) * eps, rtol=1e-14)
    with pytest.raises(ScheduleError):
        forward_noise([1.0], 3, [1.0], s2)


def test_posterior_mean_examples():
    s2 = make_schedule(2, 0.1, 0.2)
    mu = posterior_mean([1.37756], [1.0], 2, s2)[0]
    assert mu == pytest.approx((1.37756 - 0.2 / math.sqrt(0.28)) / math.sqrt(0.8), abs=1e-12)
    assert mu == pytest.approx(1.11757, abs=2e-5)
    np.testing.assert_allclose(posterior_mean([2.0, -1.0], [0.0, 0.0], 1, s2), np.array([2.0, -1.0]) / math.sqrt(0.9))
    tiny = make_schedule(2, 1e-12, 1e-12)
    np.testing.assert_allclose(posterior_mean([0.7], [3.0], 2, tiny), [0.7], atol=1e-5)


finite = st.floats(-10, 10, allow_nan=False)


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite), st.floats(-5, 5), st.integers(1, 10))
def test_forward_noise_linear(x0, eps, a, h):
    s = make_schedule(10, 1e-3, 0.3)
    np.testing.assert_allclose(
        forward_noise(a * x0, h, a * eps, s), a * forward_noise(x0, h, eps, s), rtol=1e-12, atol=1e-12
    )


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite), st.floats(1e-4, 0.9))
def test_single_step_recomposes_x0(x0, eps, beta):
    s = make_schedule(1, beta, beta)
    xh = forward_noise(x0, 1, eps, s)
    np.testing.assert_allclose(posterior_mean(xh, eps, 1, s), x0, atol=1e-8)


def test_per_sample_steps_broadcast():
    s = make_schedule(5, 0.01, 0.3)
    x0, eps = np.ones((3, 2)), np.ones((3, 2))
    out = forward_noise(x0, np.array([1, 3, 5]), eps, s)
    for i, h in enumerate((1, 3, 5)):
        np.testing.assert_allclose(out[i], forward_noise(x0[i], h, eps[i], s))


# training step -----------------------------------------------------------------


def test_train_step_oracle_denoiser_zero_loss():
    s = make_schedule(20, 1e-3, 0.2)
    loss, grads = train_step(ListSource(_conds(8)), OracleNoiseDenoiser(s), s, np.random.default_rng(0), 16)
    assert loss == pytest.approx(0.0, abs=1e-20) and grads is None


def test_train_step_zero_denoiser_loss_is_noise_power():
    s = make_schedule(20, 1e-3, 0.2)
    src = ListSource(_conds(20))
    losses = [train_step(src, ZeroDenoiser(), s, np.random.default_rng(i), 1)[0] for i in range(10_000)]
    assert np.mean(losses) == pytest.approx(1.0, abs=0.05)


def test_draw_sample_recipe():
    s = make_schedule(10, 1e-3, 0.2)
    b = draw_sample(_conds(5), s, np.random.default_rng(3), 7)
    assert b.h.min() >= 1 and b.h.max() <= 10
    np.testing.assert_array_equal(b.xh_target, forward_noise(b.x0_target, b.h, b.eps, s))
    np.testing.assert_array_equal(b.x0_target, b.cond.X[:, 0, 4:])
    with pytest.raises(ValueError):
        ListSource([])


# sampling ----------------------------------------------------------------------


def test_sampling_is_deterministic():
    s = make_schedule(15, 1e-3, 0.3)
    c = _conds(1, with_target=False)[0]
    a = sample(c, AnalyticGaussianDenoiser(s), s, 11, 1)
    b = sample(c, AnalyticGaussianDenoiser(s), s, 11, 1)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample(c, AnalyticGaussianDenoiser(s), s, 12, 1))


def test_sampling_independent_of_chunking():
    s = make_schedule(10, 1e-3, 0.3)
    cs = _conds(3, with_target=False)
    a = sample_many(cs, AnalyticGaussianDenoiser(s), s, 4, 5, chunk=256)
    b = sample_many(cs, AnalyticGaussianDenoiser(s), s, 4, 5, chunk=2)
    assert a.tobytes() == b.tobytes()


def test_analytic_denoiser_recovers_standard_normal():
    s = make_schedule(100)
    c = build_observation(np.array([0.0, 1.0, -1.0, 0.0]), [], 1)
    z = sample(c, AnalyticGaussianDenoiser(s), s, 0, 10_000)[:, 0]
    # undo the target-row de-normalization to compare in model space
    z = c.normalize_target(z)
    assert abs(z.mean()) < 0.05
    assert abs(z.var() - 1) < 0.1
    assert stats.kstest(z, "norm").statistic < 0.05


def test_quantile_bands_ordered(rng):
    paths = rng.standard_normal((50, 6))
    q = quantile_bands(paths)
    assert np.all(q[0] <= q[1]) and np.all(q[1] <= q[2])
    np.testing.assert_allclose(q[1], np.median(paths, axis=0))


def test_sampling_rejects_bad_requests():
    s = make_schedule(5, 1e-3, 0.3)
    c = _conds(1)[0]
    with pytest.raises(ValueError):
        sample(c, AnalyticGaussianDenoiser(s), s, 0, 0)

    class WrongShape:
        def predict_noise(self, xh, h, cond):
            return np.zeros((xh.shape[0], xh.shape[1] + 1))

    with pytest.raises(ValueError):
        sample(c, WrongShape(), s, 0, 2)


def test_condbatch_stack_checks_shapes():
    a = _conds(1, T=3)[0]
    b = _conds(1, T=2)[0]
    with pytest.raises(ValueError):
        CondBatch.stack([a, b])
    assert CondBatch.stack([a], repeats=3).X.shape == (3, 2, 7)
