import numpy as np
import pytest

from higfa.diffusion import (
    DiffusionState,
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    ddim_step,
    predict_x0,
    q_sample,
)
from higfa.tensor import Tensor


def _schedule_with_alpha_bars(alpha_bars):
    """Hand-built schedule for endpoint cases the linear builder cannot reach."""
    alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    t = len(alpha_bars)
    return NoiseSchedule(
        t_train=t,
        betas=np.full(t, 0.5),
        alphas=np.full(t, 0.5),
        alpha_bars=alpha_bars,
        inference_steps=t,
        step_map=np.arange(t - 1, -1, -1, dtype=np.int64),
    )


def test_build_schedule_reference_shape():
    s = build_schedule(1000, 1e-4, 0.02, 30)
    assert len(s.step_map) == 30
    assert s.step_map[0] == 999
    assert np.all(np.diff(s.step_map) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_build_schedule_full_steps_is_contiguous():
    s = build_schedule(50, 1e-4, 0.02, 50)
    np.testing.assert_array_equal(s.step_map, np.arange(49, -1, -1))


def test_alpha_bar_monotone_for_random_valid_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b0 = rng.uniform(1e-5, 0.05)
        b1 = rng.uniform(b0, 0.8)
        s = build_schedule(64, b0, b1, 8)
        # independent oracle: direct running product of (1 - beta)
        prod = 1.0
        for i, beta in enumerate(s.betas):
            prod *= 1.0 - beta
            assert abs(prod - s.alpha_bars[i]) <= 1e-15 * max(1.0, abs(prod))
        assert np.all(np.diff(s.alpha_bars) < 0)


def test_alpha_bar_matches_cumprod_tightly():
    s = build_schedule()
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1.0 - s.betas), rtol=0, atol=1e-15)


def test_build_schedule_rejects_bad_bounds():
    with pytest.raises(ScheduleError):
        build_schedule(100, 0.0, 0.02, 10)
    with pytest.raises(ScheduleError):
        build_schedule(100, 0.03, 0.02, 10)
    with pytest.raises(ScheduleError):
        build_schedule(100, 1e-4, 0.02, 101)


def test_q_sample_endpoints():
    s = _schedule_with_alpha_bars([1.0, 0.5, 0.0])
    x0 = Tensor([0.3, -0.7])
    eps = Tensor([0.5, 0.5])
    np.testing.assert_array_equal(q_sample(x0, 0, eps, s).data, x0.data)
    np.testing.assert_array_equal(q_sample(x0, 2, eps, s).data, eps.data)


def test_q_sample_scalar_arithmetic():
    s = _schedule_with_alpha_bars([0.64])
    out = q_sample(Tensor(1.0), 0, Tensor(0.5), s)
    assert abs(float(out.data) - 1.1) < 1e-15  # 0.8*1.0 + 0.6*0.5


def test_q_sample_shape_mismatch():
    s = build_schedule(10, 1e-4, 0.02, 5)
    with pytest.raises(ValueError, match="shape"):
        q_sample(Tensor([1.0, 2.0]), 3, Tensor([1.0]), s)


def test_predict_x0_identity_when_no_noise():
    s = _schedule_with_alpha_bars([1.0])
    x_t = Tensor([0.2, 0.9])
    out = predict_x0(x_t, 0, Tensor([0.0, 0.0]), s)
    np.testing.assert_array_equal(out.data, x_t.data)


def test_predict_x0_round_trip_all_mapped_timesteps():
    s = build_schedule()
    rng = np.random.default_rng(1)
    for t in s.step_map:
        x0 = rng.normal(size=16)
        eps = rng.normal(size=16)
        x_t = q_sample(Tensor(x0), int(t), Tensor(eps), s)
        back = predict_x0(x_t, int(t), Tensor(eps), s)
        assert np.max(np.abs(back.data - x0)) <= 1e-9 * max(1.0, np.max(np.abs(x0)))


def test_predict_x0_scalar_arithmetic():
    s = _schedule_with_alpha_bars([0.25])
    out = predict_x0(Tensor(1.0), 0, Tensor(0.5), s)
    expected = (1.0 - np.sqrt(0.75) * 0.5) / 0.5
    assert abs(float(out.data) - expected) < 1e-15
    assert abs(expected - 1.1339746) < 1e-6


def test_predict_x0_singular_at_zero_alpha_bar():
    s = _schedule_with_alpha_bars([0.0])
    with pytest.raises(ScheduleError, match="singular"):
        predict_x0(Tensor(1.0), 0, Tensor(0.5), s)


def _fresh_state(s, x, rng_seed=0):
    return DiffusionState(
        x_t=Tensor(x), t=int(s.step_map[0]), step_index=0,
        rng=np.random.default_rng(rng_seed),
    )


def test_ddim_final_step_returns_x0_hat_exactly():
    s = build_schedule(100, 1e-4, 0.02, 4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=8)
    eps = rng.normal(size=8)
    state = _fresh_state(s, x)
    state = DiffusionState(state.x_t, int(s.step_map[3]), 3, state.rng)
    out = ddim_step(state, Tensor(eps), s)
    x0_hat = predict_x0(Tensor(x), int(s.step_map[3]), Tensor(eps), s)
    np.testing.assert_array_equal(out.x_t.data, x0_hat.data)
    assert out.step_index == 4 and out.t == -1


def test_single_step_with_true_noise_recovers_x0():
    full = build_schedule(1000, 1e-4, 0.02, 30)
    rng = np.random.default_rng(3)
    for t in [999, 500, 137, 30]:
        x0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        # single-entry map: one step from t straight to the clean image
        s = NoiseSchedule(
            t_train=full.t_train, betas=full.betas, alphas=full.alphas,
            alpha_bars=full.alpha_bars, inference_steps=1,
            step_map=np.array([t], dtype=np.int64),
        )
        x_t = q_sample(Tensor(x0), t, Tensor(eps), s)
        out = ddim_step(DiffusionState(x_t, t, 0, rng), Tensor(eps), s)
        assert np.max(np.abs(out.x_t.data - x0)) <= 1e-9


def test_ddim_trajectory_bit_identical_across_runs():
    s = build_schedule(200, 1e-4, 0.02, 30)

    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=12))
        state = DiffusionState(x, int(s.step_map[0]), 0, rng)
        for _ in range(s.inference_steps):
            # stand-in denoiser: smooth deterministic function of the state
            eps_hat = Tensor(np.tanh(state.x_t.data) * 0.9)
            state = ddim_step(state, eps_hat, s)
        return state.x_t.data.copy()

    assert np.array_equal(run(), run())


def test_ddim_step_past_end_errors():
    s = build_schedule(100, 1e-4, 0.02, 2)
    state = DiffusionState(Tensor([0.0]), -1, 2, np.random.default_rng(0))
    with pytest.raises(ScheduleError, match="past the final"):
        ddim_step(state, Tensor([0.0]), s)
