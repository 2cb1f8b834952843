import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imanifold.core import Rng
from imanifold.data import make_point_set
from imanifold.diffusion import (
    CSV_COLUMNS,
    ConstantEpsilon,
    DiffusionError,
    EpsilonModel,
    GaussianDataEpsilon,
    NoiseSchedule,
    ScheduleError,
    backward_mean,
    backward_variance,
    empirical_order,
    forward_conditional_logpdf,
    forward_sample,
    load_model,
    log_prob,
    mean_nn_distance,
    rk4_integrate,
    rk4_sample,
    sample,
    save_model,
    schedule_cosine,
    schedule_linear,
    time_features,
    time_grid,
    train_epsilon,
)

SCHED = schedule_linear(100, 1e-4, 0.2)


class LinearEpsilon:
    """eps(x, t) = c * x, linear in its input."""

    def __init__(self, schedule, c=0.3):
        self.schedule, self.c, self.dim, self.trained = schedule, c, 1, True

    def predict(self, x, t):
        return self.c * np.asarray(x)


def test_linear_schedule_endpoints():
    betas = np.linspace(1e-4, 0.2, 100)
    product = 1.0
    for b in betas:
        product *= 1.0 - b
    assert SCHED.alpha_bar[-1] == pytest.approx(product, rel=1e-12)
    assert SCHED.alpha_bar[-1] < 1e-4
    assert SCHED.alpha_bar[0] == 1.0
    assert np.all(np.diff(SCHED.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(100, 0.0, 0.2), (100, 0.3, 0.2), (1, 1e-4, 0.2), (100, 1e-4, 0.01)])
def test_linear_schedule_rejects_invalid(args):
    with pytest.raises(ScheduleError, match="invalid schedule"):
        schedule_linear(*args)


def test_cosine_schedule_is_valid_and_bounded_near_the_end():
    sched = schedule_cosine()
    ab = sched.alpha_bar
    assert ab[0] == 1.0 and ab[-1] <= 1e-4 and np.all(np.diff(ab) < 0)
    assert np.max(ab[:-1] / ab[1:]) < 1.5


def test_schedule_composition_through_intermediate_time():
    for s, u, t in [(0, 10, 100), (3, 4, 5), (20, 50, 99)]:
        assert SCHED.alpha_bar_st(s, u) * SCHED.alpha_bar_st(u, t) == pytest.approx(SCHED.alpha_bar_st(s, t),
                                                                                    rel=1e-12)


def test_time_grid_with_remainder_step():
    assert time_grid(100, 30) == [0, 10, 40, 70, 100]
    assert time_grid(100, 100) == [0, 100]
    with pytest.raises(ScheduleError):
        time_grid(100, 0)
    with pytest.raises(ScheduleError):
        time_grid(100, 101)


def test_time_features_shape():
    f = time_features(np.array([0, 50, 100]), 100)
    assert f.shape == (3, 9)
    np.testing.assert_allclose(f[:, 0], [0.0, 0.5, 1.0])


def test_forward_sample_endpoints_and_variance():
    x0 = np.array([[0.5, -1.0]])
    eps = np.array([[0.2, 0.3]])
    np.testing.assert_array_equal(forward_sample(x0, 0, eps, SCHED), x0)
    xT = forward_sample(x0, 100, eps, SCHED)
    assert np.max(np.abs(xT - eps)) <= math.sqrt(SCHED.alpha_bar[-1]) * np.linalg.norm(x0) + 1e-12
    sched = NoiseSchedule.from_array([1.0, 0.64, 1e-5])
    draws = forward_sample(np.zeros(100_000), 1, Rng(0).normal(size=100_000), sched)
    assert draws.var() == pytest.approx(0.36, abs=0.01)
    with pytest.raises(ScheduleError):
        forward_sample(x0, 101, eps, SCHED)
    with pytest.raises(ScheduleError):
        forward_sample(x0, 2.5, eps, SCHED)


def test_forward_conditional_plug_in_value_and_symmetry():
    sched = NoiseSchedule.from_array([1.0, 0.81, 1e-5])
    value = forward_conditional_logpdf([0.9], [1.0], 0, 1, sched)
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi * 0.19), abs=1e-12)
    mean = math.sqrt(0.81)
    up = forward_conditional_logpdf([mean + 0.3], [1.0], 0, 1, sched)
    down = forward_conditional_logpdf([mean - 0.3], [1.0], 0, 1, sched)
    assert up == pytest.approx(down, abs=1e-12)


def test_forward_conditional_errors():
    with pytest.raises(DiffusionError, match="degenerate conditional"):
        forward_conditional_logpdf([0.0], [0.0], 5, 5, SCHED)
    with pytest.raises(ScheduleError):
        forward_conditional_logpdf([0.0], [0.0], 6, 5, SCHED)


def test_backward_mean_reductions():
    x = np.array([[0.7], [-1.2]])
    zero = ConstantEpsilon(SCHED, [0.0])
    np.testing.assert_allclose(backward_mean(x, 10, 30, zero), x / math.sqrt(SCHED.alpha_bar_st(10, 30)),
                               rtol=1e-14)
    # one step: the textbook DDPM mean (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)
    model = LinearEpsilon(SCHED)
    t = 40
    alpha_t = SCHED.alpha_bar[t] / SCHED.alpha_bar[t - 1]
    eps = model.predict(x, t)
    expected = (x - (1 - alpha_t) / math.sqrt(1 - SCHED.alpha_bar[t]) * eps) / math.sqrt(alpha_t)
    np.testing.assert_allclose(backward_mean(x, t - 1, t, model), expected, rtol=1e-12)
    np.testing.assert_allclose(backward_mean(2.5 * x, 3, 60, model), 2.5 * backward_mean(x, 3, 60, model),
                               rtol=1e-12)
    with pytest.raises(ScheduleError):
        backward_mean(x, 0, 0, model)


def test_backward_variance_choices():
    assert backward_variance(0, 10, "tilde", SCHED) == 0.0
    for t in range(1, 101):
        for s in range(t):
            assert backward_variance(s, t, "tilde", SCHED) <= backward_variance(s, t, "beta_st", SCHED)
    for t in range(2, 101):
        diff = backward_variance(t - 1, t, "beta_st", SCHED) - backward_variance(t - 1, t, "tilde", SCHED)
        beta = SCHED.beta_bar_st(t - 1, t)
        assert 0 <= diff <= beta**2 / SCHED.beta_bar[t] * (1 + 1e-9)
    with pytest.raises(ValueError):
        backward_variance(0, 1, "learned", SCHED)


@pytest.mark.parametrize("mode", ["ddpm", "ddim"])
def test_analytic_score_sampling_recovers_unit_variance(mode):
    model = GaussianDataEpsilon(SCHED, dim=1)
    x = sample(model, 1, mode, 10_000, Rng(11))
    assert x.var() == pytest.approx(1.0, abs=0.05)


def test_single_jump_ddim_is_the_x0_estimate():
    model = LinearEpsilon(SCHED)
    xT = Rng(0).normal(size=(20, 1))
    jump = sample(model, 100, "ddim", x_T=xT)
    np.testing.assert_allclose(jump, backward_mean(xT, 0, 100, model), rtol=1e-12)


def test_ddim_repeat_runs_identical():
    model = GaussianDataEpsilon(SCHED, dim=2)
    np.testing.assert_array_equal(sample(model, 7, "ddim", 64, Rng(3)), sample(model, 7, "ddim", 64, Rng(3)))


def test_sample_errors():
    model = GaussianDataEpsilon(SCHED)
    with pytest.raises(ScheduleError):
        sample(model, 101, "ddpm", 4)
    with pytest.raises(ValueError):
        sample(model, 1, "euler", 4)


@pytest.mark.parametrize("mode", ["ddpm", "ddim"])
@pytest.mark.parametrize("h", [2, 10, 30])
def test_rk4_with_constant_field_equals_base_sampler(mode, h):
    model = ConstantEpsilon(SCHED, [0.4, -0.2])
    a = rk4_sample(model, h, mode, 50, Rng(4))
    b = sample(model, h, mode, 50, Rng(4))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_rk4_unit_step_falls_back_to_base_sampler():
    model = LinearEpsilon(SCHED)
    np.testing.assert_array_equal(rk4_sample(model, 1, "ddim", 30, Rng(2)), sample(model, 1, "ddim", 30, Rng(2)))


def test_rk4_multiplier_flag_changes_result():
    model = LinearEpsilon(SCHED)
    a = rk4_sample(model, 10, "ddim", 30, Rng(2))
    b = rk4_sample(model, 10, "ddim", 30, Rng(2), multipliers=True)
    assert not np.allclose(a, b)


def test_rk4_kernel_on_exponential_growth():
    assert rk4_integrate(lambda x, t: x, 1.0, 0.0, 1.0, 0.25) == pytest.approx(math.e, abs=1e-4)


def test_rk4_kernel_order_on_decay():
    assert empirical_order(lambda x, t: -x, 1.0, 1.0, math.exp(-1.0)) >= 3.8


def test_log_prob_with_analytic_score_matches_true_density():
    model = GaussianDataEpsilon(SCHED, dim=1)
    report = log_prob(model, np.zeros((1, 1)), h=1, rounds=200, rng=Rng(0))
    assert report.mean[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=0.1)


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=-3, max_value=3), st.sampled_from([1, 3, 7, 100]), st.integers(0, 1000))
def test_log_prob_is_exact_for_gaussian_data_with_true_score(x0, h, seed):
    # the backward kernel is the exact reverse conditional in this case, so every round is exact
    model = GaussianDataEpsilon(SCHED, dim=1)
    report = log_prob(model, np.array([[x0]]), h=h, rounds=3, rng=Rng(seed))
    expected = -0.5 * math.log(2 * math.pi) - 0.5 * x0 * x0
    np.testing.assert_allclose(report.total, expected, atol=1e-9)


def test_log_prob_bookkeeping_and_determinism():
    model = LinearEpsilon(SCHED)
    x0 = Rng(1).normal(size=(6, 1))
    r = log_prob(model, x0, h=5, rounds=4, rng=Rng(2))
    np.testing.assert_allclose(r.total, r.log_pxT - r.sum_fwd + r.sum_bwd, atol=1e-9)
    assert r.total.shape == (6, 4) and r.rounds == 4 and r.h == 5
    again = log_prob(model, x0, h=5, rounds=4, rng=Rng(2))
    np.testing.assert_array_equal(r.total, again.total)
    np.testing.assert_allclose(r.log10_mean(), r.mean / math.log(10))
    np.testing.assert_allclose(r.per_dim_nll(), -r.mean)


def test_log_prob_rounds_are_independent_of_scheduling_and_batch():
    model = LinearEpsilon(SCHED)
    x0 = Rng(1).normal(size=(5, 1))
    five = log_prob(model, x0, h=4, rounds=5, rng=Rng(9))
    three = log_prob(model, x0, h=4, rounds=3, rng=Rng(9))
    np.testing.assert_array_equal(five.total[:, :3], three.total)
    dup = log_prob(model, np.vstack([x0[:1], x0[:1], x0[2:]]), h=4, rounds=5, rng=Rng(9))
    np.testing.assert_array_equal(dup.total[0], dup.total[1])
    np.testing.assert_array_equal(dup.total[0], five.total[0])
    np.testing.assert_array_equal(dup.total[2:], five.total[2:])


def test_log_prob_chunking_does_not_change_results(monkeypatch):
    import imanifold.diffusion as dif

    model = LinearEpsilon(SCHED)
    x0 = Rng(2).normal(size=(6, 1))
    whole = log_prob(model, x0, h=7, rounds=9, rng=Rng(4))
    monkeypatch.setattr(dif, "LOGPROB_CHUNK_ROWS", 13)  # two rounds per block, ragged tail
    chunked = log_prob(model, x0, h=7, rounds=9, rng=Rng(4))
    for a, b in ((whole.log_pxT, chunked.log_pxT), (whole.sum_fwd, chunked.sum_fwd), (whole.sum_bwd, chunked.sum_bwd)):
        np.testing.assert_array_equal(a, b)


def test_log_prob_errors():
    with pytest.raises(DiffusionError, match="untrained"):
        log_prob(EpsilonModel.create(1, SCHED, hidden=(4,)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        log_prob(LinearEpsilon(SCHED), np.zeros((1, 1)), rounds=0)
    with pytest.raises(DiffusionError, match="degenerate"):
        log_prob(LinearEpsilon(SCHED), np.zeros((1, 1)), variance="tilde")


def test_log_prob_csv(tmp_path):
    r = log_prob(LinearEpsilon(SCHED), np.zeros((2, 1)), h=10, rounds=3, rng=Rng(0))
    lines = r.to_csv(tmp_path / "lp.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2 * 3
    first = lines[1].split(",")
    assert first[:2] == ["0", "0"] and float(first[-1]) == r.total[0, 0]


def test_training_zero_iterations_leaves_parameters():
    model = EpsilonModel.create(2, SCHED, hidden=(8,), seed=1)
    before = [p.copy() for p in model.net.flat_params()]
    train_epsilon(model, np.zeros((10, 2)), iters=0)
    for a, b in zip(before, model.net.flat_params()):
        np.testing.assert_array_equal(a, b)
    assert not model.trained


def _short_run(seed):
    model = EpsilonModel.create(2, SCHED, hidden=(16, 16), seed=seed)
    data = make_point_set("moon", 500, seed=seed).points
    trace = train_epsilon(model, data, iters=30, batch=32, rng=Rng(seed))
    return model, trace


def test_training_is_reproducible():
    a, ta = _short_run(5)
    b, tb = _short_run(5)
    assert ta.losses == tb.losses
    for p, q in zip(a.net.flat_params(), b.net.flat_params()):
        np.testing.assert_array_equal(p, q)


def test_training_divergence_is_reported():
    model = EpsilonModel.create(2, SCHED, hidden=(8,), seed=0)
    with pytest.raises(DiffusionError, match="training diverged"):
        train_epsilon(model, np.full((10, 2), 1e5), iters=5)


def test_checkpoint_round_trip(tmp_path):
    model, _ = _short_run(1)
    back = load_model(save_model(tmp_path / "eps.json", model, seed=1))
    x = Rng(0).normal(size=(7, 2))
    np.testing.assert_array_equal(back.predict(x, 17), model.predict(x, 17))
    np.testing.assert_array_equal(back.schedule.alpha_bar, model.schedule.alpha_bar)
    assert back.trained


def test_mean_nn_distance():
    ref = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert mean_nn_distance(np.array([[0.0, 0.5], [1.0, 2.0]]), ref) == pytest.approx(1.25)


@pytest.mark.slow
def test_swiss_roll_training_loss_pilot():
    model = EpsilonModel.create(2, SCHED, seed=0)
    data = make_point_set("swiss_roll", 10_000, seed=0).points
    trace = train_epsilon(model, data, iters=20_000, batch=256, rng=Rng(0))
    ma = trace.moving_average(100)
    assert ma[-1] < 0.5
    # soft monotonicity: the late average sits well below the early one
    assert ma[-1] < ma[0]
