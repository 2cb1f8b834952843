import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imanifold.core import Rng
from imanifold.core.density import LOG_2PI
from imanifold.data import make_glyph_dataset
from imanifold.gridvae import (
    AttributeTable,
    GridError,
    GridSpec,
    GridVaeModel,
    TrainSettings,
    binary_kl,
    disentanglement_from_latents,
    disentanglement_report,
    elbo,
    factor_targets,
    kl_mog,
    kl_nearest_cluster,
    latent_traverse,
    load_model,
    manifold_attr_kl,
    mog_prior_log_prob,
    permutation_null,
    planted_embedding,
    round_to_grid,
    save_model,
    train,
)


def mc_kl_nearest(mu, sigma, grid, n=100_000, seed=0):
    """Monte-Carlo KL(q || N(R(mu), sigma0^2 I)) from draws of q."""
    z = mu + sigma * np.random.default_rng(seed).normal(size=(n, len(mu)))
    target = round_to_grid(mu[None], grid)[0]
    log_q = np.sum(-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * LOG_2PI, axis=1)
    s0 = grid.sigma0
    log_p = np.sum(-0.5 * ((z - target) / s0) ** 2 - math.log(s0) - 0.5 * LOG_2PI, axis=1)
    return float(np.mean(log_q - log_p))


def enumerated_mog_log_prob(z, grid):
    """Direct sum over every Cartesian grid component."""
    comps = np.array(list(itertools.product(*grid.centers)))
    s0sq = grid.sigma0**2
    d = z.shape[1]
    log_n = -0.5 * np.sum((z[:, None, :] - comps[None]) ** 2, axis=2) / s0sq - 0.5 * d * math.log(2 * math.pi * s0sq)
    m = log_n.max(1, keepdims=True)
    return m[:, 0] + np.log(np.exp(log_n - m).sum(1)) - math.log(len(comps))


class IdentityDecoder:
    """Decoder stub that reproduces the batch it was handed."""

    def __init__(self, x):
        self.x = x
        self.out_dim = x.shape[1]

    def apply(self, z):
        return self.x


def test_grid_spec_validation():
    with pytest.raises(GridError, match="increasing"):
        GridSpec(((0, 0, 1),), 0.3)
    with pytest.raises(GridError, match="empty grid dim"):
        GridSpec(((0, 1), ()), 0.3)
    with pytest.raises(GridError, match="sigma0"):
        GridSpec(((0, 1),), 0.0)
    with pytest.raises(GridError, match="partial"):
        GridSpec(((0, 1),), 0.3, "partial")
    g = GridSpec.uniform(2, -2, 3, 1 / 3)
    assert g.n_components == 36
    assert GridSpec.from_dict(g.to_dict()) == g


def test_rounding_ties_and_clamping():
    g = GridSpec.uniform(1, -2, 3, 1 / 3)
    mu = np.array([[0.5], [-0.5], [1.49], [2.5], [7.0], [-9.0], [-1.5]])
    np.testing.assert_array_equal(round_to_grid(mu, g)[:, 0], [1, -1, 1, 3, 3, -2, -2])


def test_matched_prior_has_zero_kl_and_loss_is_negative_recon():
    g = GridSpec.uniform(2, -2, 3, 1 / 3)
    assert kl_nearest_cluster(np.array([[1.0, -2.0]]), 1 / 3, g)[0] == pytest.approx(0.0, abs=1e-15)
    model = GridVaeModel.create(4, g, hidden=(8,), seed=0)
    x = np.random.default_rng(0).uniform(size=(6, 4))
    model.decoder = IdentityDecoder(x)
    model.encode = lambda _: (np.tile([[1.0, 2.0]], (6, 1)), np.full((6, 2), 1 / 3))
    terms = elbo(model, x, Rng(0))
    np.testing.assert_allclose(terms.kl, 0.0, atol=1e-14)
    np.testing.assert_allclose(terms.loss, -terms.recon)
    np.testing.assert_allclose(terms.recon, -0.5 * 4 * math.log(2 * math.pi * 0.1))


def test_half_offset_example():
    g = GridSpec.uniform(1, -3, 3, 1 / 16)
    assert kl_nearest_cluster(np.array([[0.5]]), 1 / 16, g)[0] == pytest.approx(32.0, rel=1e-12)
    assert mc_kl_nearest(np.array([0.5]), np.array([1 / 16]), g) == pytest.approx(32.0, rel=0.01)


def test_kl_is_nonnegative():
    rng = np.random.default_rng(1)
    g = GridSpec.uniform(3, -2, 3, 1 / 3)
    mu = rng.uniform(-4, 5, size=(1000, 3))
    sigma = np.exp(rng.uniform(-4, 2, size=(1000, 3)))
    assert np.all(kl_nearest_cluster(mu, sigma, g) >= 0)


def test_closed_form_matches_monte_carlo_over_random_configs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        sigma0 = 1 / 16 if i % 4 == 0 else float(rng.uniform(0.05, 1.0))
        d = int(rng.integers(1, 4))
        g = GridSpec.uniform(d, -2, 3, sigma0)
        mu = rng.uniform(-2.5, 3.5, size=d)
        sigma = sigma0 * np.exp(rng.uniform(-1, 1, size=d))
        closed = kl_nearest_cluster(mu[None], sigma[None], g)[0]
        worst = max(worst, abs(closed - mc_kl_nearest(mu, sigma, g, seed=i)) / max(1.0, closed))
    assert worst < 0.02


def test_matches_full_mixture_kl_near_centres():
    g = GridSpec.uniform(2, -2, 3, 1 / 16)
    rng = np.random.default_rng(3)
    centres = rng.integers(-2, 4, size=(50, 2)).astype(float)
    mu = centres + rng.uniform(-0.25, 0.25, size=(50, 2))
    sigma = (1 / 16) * np.exp(rng.uniform(-0.5, 0.0, size=(50, 2)))
    # the closed form leaves out the constant mixture-weight term log K
    np.testing.assert_allclose(kl_mog(mu, sigma, g) - math.log(g.n_components), kl_nearest_cluster(mu, sigma, g),
                               atol=1e-3)


def test_one_sided_limits_agree_at_half_integer_boundary():
    g = GridSpec.uniform(1, -2, 3, 1 / 3)
    for b in (-1.5, 0.5, 2.5):
        lo = kl_nearest_cluster(np.array([[b - 1e-9]]), 0.2, g)[0]
        hi = kl_nearest_cluster(np.array([[b + 1e-9]]), 0.2, g)[0]
        assert lo == pytest.approx(hi, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2.5, 3.5), min_size=3, max_size=3), st.floats(0.05, 2.0))
def test_guided_with_rounded_targets_equals_unsupervised(mu, sigma):
    mu = np.array([mu])
    unsup = GridSpec.uniform(3, -2, 3, 1 / 3)
    guided = GridSpec.uniform(3, -2, 3, 1 / 3, "guided")
    partial = GridSpec.uniform(3, -2, 3, 1 / 3, "partial", (True, False, True))
    target = round_to_grid(mu, unsup)
    ref = kl_nearest_cluster(mu, sigma, unsup)
    assert kl_nearest_cluster(mu, sigma, guided, target)[0] == ref[0]
    assert kl_nearest_cluster(mu, sigma, partial, target)[0] == ref[0]


def test_partial_guidance_touches_only_masked_dims():
    g = GridSpec.uniform(2, -2, 3, 1.0, "partial", (True, False))
    mu = np.array([[0.2, 0.3]])
    gt = np.array([[2.0, -2.0]])
    expected = 0.5 * ((0.2 - 2.0) ** 2 + 0.3**2)
    assert kl_nearest_cluster(mu, 1.0, g, gt)[0] == pytest.approx(expected)
    with pytest.raises(GridError, match="requires attribute"):
        kl_nearest_cluster(mu, 1.0, g)


def test_mog_single_component_is_standard_normal():
    g = GridSpec(((0,),), 1.0)
    z = np.linspace(-3, 3, 7)[:, None]
    np.testing.assert_allclose(mog_prior_log_prob(z, g), -0.5 * z[:, 0] ** 2 - 0.5 * LOG_2PI, atol=1e-14)


def test_mog_equidistant_point_and_enumeration():
    g = GridSpec.uniform(2, -2, 3, 1 / 3)
    z = np.array([[0.5, 0.0]])
    np.testing.assert_allclose(mog_prior_log_prob(z, g), enumerated_mog_log_prob(z, g), atol=1e-12)
    # centres -2..3 are symmetric about 0.5, so offsets either side of the midpoint agree
    for delta in (0.1, 0.3):
        left, right = mog_prior_log_prob(np.array([[0.5 - delta, 0.0], [0.5 + delta, 0.0]]), g)
        assert left == pytest.approx(right, abs=1e-12)
    pts = np.random.default_rng(0).uniform(-3, 4, size=(200, 2))
    np.testing.assert_allclose(mog_prior_log_prob(pts, g), enumerated_mog_log_prob(pts, g), atol=1e-10)
    assert mog_prior_log_prob(z, g)[0] < mog_prior_log_prob(np.zeros((1, 2)), g)[0]


def test_mog_rejects_large_grid():
    g = GridSpec.uniform(6, -2, 3, 1 / 3)  # 6**6 components
    with pytest.raises(GridError, match="grid too large"):
        mog_prior_log_prob(np.zeros((1, 6)), g)


def test_training_zero_iterations_and_guided_requirements():
    x = make_glyph_dataset(1800, seed=0).flat[:200]
    g = GridSpec.uniform(2, -2, 3, 1 / 3)
    model = GridVaeModel.create(256, g, hidden=(32,), seed=0)
    before = model.encoder.flat_params()
    train(model, x, TrainSettings(iters=0))
    for a, b in zip(before, model.encoder.flat_params()):
        np.testing.assert_array_equal(a, b)
    assert not model.trained
    with pytest.raises(GridError, match="untrained"):
        disentanglement_report(model, x, np.zeros((200, 2), dtype=int))
    guided = GridVaeModel.create(256, GridSpec.uniform(2, -2, 3, 1 / 3, "guided"), hidden=(32,))
    with pytest.raises(GridError, match="requires attribute"):
        train(guided, x, TrainSettings(iters=1))


def test_empty_partial_mask_reproduces_unsupervised_training():
    ds = make_glyph_dataset(1800, seed=0)
    x = ds.flat[:300]
    outs = []
    for grid in (GridSpec.uniform(2, -2, 3, 1 / 3), GridSpec.uniform(2, -2, 3, 1 / 3, "partial", (False, False))):
        model = GridVaeModel.create(256, grid, hidden=(32,), seed=4)
        losses = train(model, x, TrainSettings(iters=30, batch=16), targets=factor_targets(ds.factors[:300], grid),
                       rng=Rng(9))
        outs.append((losses, model.encode(x)[0]))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_training_is_deterministic_and_reduces_loss(tmp_path):
    x = make_glyph_dataset(1800, seed=0).flat
    runs = []
    for _ in range(2):
        model = GridVaeModel.create(256, GridSpec.uniform(2, -2, 3, 1 / 3), hidden=(64,), seed=1)
        runs.append((train(model, x, TrainSettings(iters=300, batch=32), rng=Rng(2)), model))
    assert runs[0][0] == runs[1][0]
    losses, model = runs[0]
    assert np.mean(losses[-30:]) < np.mean(losses[:30])
    back = load_model(save_model(tmp_path / "g.json", model))
    assert back.trained and back.grid == model.grid
    np.testing.assert_array_equal(back.encode(x[:5])[0], model.encode(x[:5])[0])
    mog = GridVaeModel.create(256, GridSpec.uniform(2, -2, 3, 1 / 3), hidden=(64,), seed=1)
    mog_losses = train(mog, x, TrainSettings(iters=300, batch=32, kl="mog"), rng=Rng(2))
    assert np.mean(mog_losses[-30:]) < np.mean(mog_losses[:30])


def test_latent_traverse_shapes():
    model = GridVaeModel.create(16, GridSpec.uniform(3, -2, 3, 1 / 3), hidden=(8,), seed=0)
    assert latent_traverse(model, np.zeros(3), 1, []).shape == (0, 16)
    same = latent_traverse(model, np.zeros(3), 2, [0.7] * 4)
    assert np.all(same == same[0])
    sweep = latent_traverse(model, np.zeros(3), 0, np.linspace(-0.5, 1.5, 5))
    assert sweep.shape == (5, 16)
    with pytest.raises(GridError):
        latent_traverse(model, np.zeros(3), 3, [0.0])


def test_disentanglement_planted_versus_random():
    ds = make_glyph_dataset(3600, seed=0)
    g = GridSpec.uniform(2, -2, 3, 1 / 3)
    planted = disentanglement_from_latents(factor_targets(ds.factors, g), ds.factors, g)
    np.testing.assert_allclose(planted.normalized, np.eye(2), atol=1e-9)
    np.testing.assert_array_equal(planted.assignment, [0, 1])
    np.testing.assert_allclose(planted.share.sum(1), 1.0)
    model = GridVaeModel.create(256, g, hidden=(32,), seed=3)
    rand = disentanglement_from_latents(model.encode(ds.flat)[0], ds.factors, g)
    assert rand.normalized.max() < planted.normalized.max()
    assert all(s == pytest.approx(1.0) or s == 0 for s in rand.share.sum(1))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_binary_kl_nonnegative_and_zero_iff_equal(p, q):
    v = binary_kl(p, q)
    assert v >= 0
    assert binary_kl(p, p) == 0
    pc, qc = min(max(p, 1e-6), 1 - 1e-6), min(max(q, 1e-6), 1 - 1e-6)
    if pc != qc:
        assert v > 0


def test_planted_attribute_has_max_score():
    ds = make_glyph_dataset(3600, seed=0)
    emb, attrs = planted_embedding(ds.flat, n_attrs=8, planted=3, seed=0)
    res = manifold_attr_kl(emb, attrs)
    assert res.names[0] == "attr3"
    assert list(res.scores) == sorted(res.scores, reverse=True)


def test_random_attributes_fall_inside_permutation_null():
    ds = make_glyph_dataset(1800, seed=0)
    emb, attrs = planted_embedding(ds.flat, n_attrs=6, planted=0, strength=0.0, seed=1)
    null = permutation_null(emb, attrs, n_perm=100, rng=Rng(3))
    assert all(null.within(manifold_attr_kl(emb, attrs)).values())


def test_degenerate_attributes_are_flagged():
    emb = np.random.default_rng(0).normal(size=(20, 3))
    values = np.zeros((20, 3), dtype=int)
    emb[0] = 100.0
    values[1:, 1] = 1  # the lone a = 0 sample is nobody's neighbour: empty conditional support
    values[::2, 2] = 1
    res = manifold_attr_kl(emb, AttributeTable(values, ("zero", "one", "half")))
    flags = dict(zip(res.names, res.flags))
    assert flags["zero"] == "constant" and res.score_of("zero") == 0.0
    assert flags["one"] == "no support" and math.isnan(res.score_of("one"))
    assert flags["half"] == ""
    with pytest.raises(GridError):
        manifold_attr_kl(emb[:5], AttributeTable(values, ("a", "b", "c")))
    with pytest.raises(GridError):
        AttributeTable(np.full((2, 1), 2), ("a",))
