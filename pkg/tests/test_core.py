import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imanifold.core import (
    Adam,
    AdamState,
    Checkpoint,
    CheckpointError,
    DensityError,
    Mlp,
    MlpSpec,
    Rng,
    TapeError,
    Tensor,
    adam_step,
    concat,
    gaussian_log_density,
    gaussian_log_density_rows,
    load_checkpoint,
    parameter,
    per_dim_nll,
    save_checkpoint,
    where,
)
from imanifold.core import checkpoint as ckpt_mod


def numeric_grad(f, x, step=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * step)
    return g


def assert_grad_close(op, x0, rtol=1e-4, atol=1e-7):
    x = parameter(x0.copy())
    op(x).sum().backward()
    expected = numeric_grad(lambda a: float(op(Tensor(a)).data.sum()), x0.copy())
    scale = np.maximum(np.abs(expected), 1.0)
    assert np.all(np.abs(x.grad - expected) <= rtol * scale + atol), (x.grad, expected)


UNARY_OPS = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),
    "tanh": lambda t: t.tanh(),
    "relu": lambda t: t.relu(),
    "sigmoid": lambda t: t.sigmoid(),
    "softplus": lambda t: t.softplus(),
    "square": lambda t: t.square(),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "neg_sub": lambda t: 2.0 - t,
    "div": lambda t: 1.0 / (t * t + 1.0),
    "clip": lambda t: t.clip(-0.5, 0.5),
    "sum_axis": lambda t: t.sum(axis=1) * 3.0,
    "mean": lambda t: t.mean(axis=0),
    "reshape_T": lambda t: t.reshape(-1, 2).T * 1.5,
    "getitem": lambda t: t[:, 1:3] * t[:, 0:2],
    "logsumexp": lambda t: t.logsumexp(axis=-1),
    "log_softmax": lambda t: t.log_softmax(axis=-1) * np.arange(4.0),
    "broadcast_add": lambda t: t + t.sum(axis=0, keepdims=True),
    "concat": lambda t: concat([t, t * 2.0], axis=-1).square(),
    "where": lambda t: where(np.array([True, False, True, False]), t.exp(), t * 3.0),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(0)
    op = UNARY_OPS[name]
    for _ in range(50):
        x0 = rng.normal(size=(3, 4))
        if name in ("relu", "clip"):
            # keep away from kinks where the central difference straddles them
            x0 = np.where(np.abs(x0) < 1e-3, 0.1, x0)
            x0 = np.where(np.abs(np.abs(x0) - 0.5) < 1e-3, 0.3, x0)
        assert_grad_close(op, x0)


def test_matmul_gradient_both_operands():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = parameter(a0), parameter(b0)
        (a @ b).tanh().sum().backward()
        ga = numeric_grad(lambda v: float(np.tanh(v @ b0).sum()), a0.copy())
        gb = numeric_grad(lambda v: float(np.tanh(a0 @ v).sum()), b0.copy())
        np.testing.assert_allclose(a.grad, ga, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(b.grad, gb, rtol=1e-4, atol=1e-7)


def test_backprop_quadratic():
    w = parameter([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_backprop_accumulates_without_reset():
    w = parameter([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [4.0, 8.0, 12.0])


def test_disconnected_parameter_has_zero_influence():
    w = parameter([1.0, 2.0])
    p = parameter([5.0])
    (w * 3.0).sum().backward()
    assert p.grad is None or np.all(p.grad == 0)


def test_second_backward_through_released_graph_errors():
    w = parameter([1.0, 2.0])
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(TapeError, match="invalid tape"):
        loss.backward()


def test_cycle_is_rejected():
    w = parameter([1.0])
    a = w * 2.0
    b = a * 3.0
    a._parents = (b,)  # corrupt the tape by hand
    with pytest.raises(TapeError, match="invalid tape"):
        b.sum().backward()


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    for trial in range(50):
        spec = MlpSpec.build((3, 5, 4, 2), hidden="tanh", seed=trial)
        net = Mlp(spec)
        x = rng.normal(size=(6, 3))
        net(x).square().sum().backward()
        for p in net.params:
            def f(v, p=p):
                old = p.data
                p.data = v
                out = float(np.sum(net.apply(x) ** 2))
                p.data = old
                return out

            expected = numeric_grad(f, p.data.copy())
            np.testing.assert_allclose(p.grad, expected, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("act", ["tanh", "relu", "sigmoid", "identity"])
def test_mlp_jacobian_matches_finite_differences(act):
    net = Mlp(MlpSpec.build((4, 6, 3), hidden=act, out="tanh", seed=3))
    x = np.random.default_rng(3).normal(size=(5, 4))
    jac = net.jacobian(x)
    for b in range(5):
        num = np.stack([numeric_grad(lambda v: float(net.apply(v[None])[0, k]), x[b].copy())
                        for k in range(3)])
        np.testing.assert_allclose(jac[b], num, rtol=1e-4, atol=1e-7)


def test_mlp_apply_matches_taped_forward():
    net = Mlp(MlpSpec.build((3, 8, 2), hidden="relu", seed=1))
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(net(x).data, net.apply(x))


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,), ())
    with pytest.raises(ValueError):
        MlpSpec((3, 2), ("swish",))


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    state = AdamState.zeros_like([p])
    (new,), _ = adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(new, p)


def test_adam_single_step_hand_computed():
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
    p = np.array([0.5])
    state = AdamState.zeros_like([p])
    (new,), _ = adam_step([p], [np.array([1.0])], state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    assert new[0] == pytest.approx(0.5 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.zeros(1)], AdamState.zeros_like([np.zeros(1)]), lr=0.0)


def _train_100(seed):
    net = Mlp(MlpSpec.build((2, 8, 1), seed=seed))
    opt = Adam(net.parameters(), lr=1e-2)
    rng = Rng(seed)
    for _ in range(100):
        x = rng.normal(size=(16, 2))
        y = np.sin(x[:, :1])
        opt.zero_grad()
        (net(x) - y).square().mean().backward()
        opt.step()
    return net.flat_params()


def test_adam_training_is_bit_identical_across_runs():
    for a, b in zip(_train_100(7), _train_100(7)):
        np.testing.assert_array_equal(a, b)


def test_gaussian_log_density_examples():
    assert gaussian_log_density([0.0], [0.0], 1.0) == pytest.approx(-0.9189385, abs=1e-7)
    for d in (1, 3, 10):
        x = np.full(d, 0.7)
        assert gaussian_log_density(x, x, 1.0) == pytest.approx(-d / 2 * math.log(2 * math.pi))


def test_gaussian_log_density_value_and_normalisation_by_quadrature():
    # trapezoid oracle at 1.5, variance 0.25; value checked against the textbook formula
    value = gaussian_log_density([1.5], [0.0], 0.25)
    assert value == pytest.approx(math.log(1 / math.sqrt(2 * math.pi * 0.25)) - 1.5**2 / 0.5, abs=1e-6)
    grid = np.linspace(-10.0, 10.0, 200001)
    dens = np.array([math.exp(gaussian_log_density([g], [0.0], 0.25)) for g in grid[::100]])
    fine = np.exp(gaussian_log_density_rows(grid[:, None], 0.0, 0.25))
    assert np.trapezoid(fine, grid) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(dens, fine[::100], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.05, max_value=4.0), st.floats(min_value=-2, max_value=2))
def test_gaussian_normalisation_over_ten_sigma(variance, mean):
    sd = math.sqrt(variance)
    grid = np.linspace(mean - 10 * sd, mean + 10 * sd, 40001)
    dens = np.exp(gaussian_log_density_rows(grid[:, None], mean, variance))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)


def test_gaussian_log_density_errors():
    with pytest.raises(DensityError, match="non-finite input"):
        gaussian_log_density([np.nan], [0.0], 1.0)
    with pytest.raises(DensityError, match="invalid variance"):
        gaussian_log_density([0.0], [0.0], 0.0)


def test_per_dim_nll():
    assert per_dim_nll(-10.0, 5) == pytest.approx(2.0)


def test_rng_reproducible_over_ten_thousand_draws():
    a, b = Rng(123), Rng(123)
    np.testing.assert_array_equal(a.normal(size=10_000), b.normal(size=10_000))
    c = Rng(123, stream=1)
    assert not np.array_equal(Rng(123).normal(size=10), c.normal(size=10))
    np.testing.assert_array_equal(Rng(5).spawn("x").normal(size=4), Rng(5).spawn("x").normal(size=4))


def test_checkpoint_round_trip(tmp_path):
    net = Mlp(MlpSpec.build((3, 4, 2), seed=9))
    path = save_checkpoint(tmp_path / "m.json", Checkpoint("test", 9, {"net": net}, {"a": np.arange(3.0)}, {"k": 1}))
    back = load_checkpoint(path, kind="test")
    assert back.seed == 9 and back.meta == {"k": 1}
    assert back.networks["net"].spec == net.spec
    for p, q in zip(net.params, back.networks["net"].params):
        np.testing.assert_array_equal(p.data, q.data)
    np.testing.assert_array_equal(back.arrays["a"], np.arange(3.0))


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    net = Mlp(MlpSpec.build((2, 2), seed=0))
    path = save_checkpoint(tmp_path / "m.json", Checkpoint("test", 0, {"net": net}))
    monkeypatch.setattr(ckpt_mod, "FORMAT_VERSION", 2)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    monkeypatch.undo()
    with pytest.raises(CheckpointError, match="expected"):
        load_checkpoint(path, kind="other")
