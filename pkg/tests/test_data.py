import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imanifold.data import (
    DEFAULT_PATCH,
    N_GLYPHS,
    POINT_KINDS,
    glyph_image,
    make_glyph_dataset,
    make_patch_dataset,
    make_point_set,
    patch_class_template,
    read_pgm,
    read_points_csv,
    standardize,
    template_overlap,
    tile_images,
    write_pgm,
    write_points_csv,
)


def softmax_probe_accuracy(x, y, n_classes, iters=300, lr=0.5, seed=0):
    """Multinomial logistic regression by full-batch gradient descent; held-out accuracy."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    split = int(0.8 * len(x))
    tr, te = order[:split], order[split:]
    mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-6
    xs = (x - mu) / sd
    xs = np.hstack([xs, np.ones((len(xs), 1))])
    w = np.zeros((xs.shape[1], n_classes))
    onehot = np.eye(n_classes)[y[tr]]
    for _ in range(iters):
        logits = xs[tr] @ w
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(1, keepdims=True)
        w -= lr * xs[tr].T @ (p - onehot) / len(tr)
    return float(np.mean(np.argmax(xs[te] @ w, 1) == y[te]))


@pytest.mark.parametrize("kind", POINT_KINDS)
def test_point_sets_are_deterministic_and_standardized(kind):
    a = make_point_set(kind, 10_000, noise=0.05, seed=3)
    b = make_point_set(kind, 10_000, noise=0.05, seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.points.shape == (10_000, 2) and a.kind == kind
    assert np.all(np.abs(a.points.mean(0)) < 1e-9)
    np.testing.assert_allclose(a.points.std(0), 1.0, atol=1e-9)
    assert not np.array_equal(a.points, make_point_set(kind, 10_000, seed=4).points)


def test_noise_free_circle_has_constant_radius():
    p = make_point_set("circle", 500, noise=0.0, seed=1, normalize=False).points
    r2 = np.sum(p * p, axis=1)
    assert np.ptp(r2) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=400), st.integers(min_value=0, max_value=10_000))
def test_standardize_is_idempotent(n, seed):
    x = np.random.default_rng(seed).normal(size=(n, 2)) * [3.0, 0.2] + [5.0, -1.0]
    once = standardize(x)
    np.testing.assert_allclose(standardize(once), once, atol=1e-12)


def test_point_set_errors():
    with pytest.raises(ValueError, match="unknown point-set kind"):
        make_point_set("spiral", 10)
    with pytest.raises(ValueError):
        make_point_set("circle", 0)


def test_points_csv_round_trip(tmp_path):
    p = make_point_set("moon", 50, seed=2).points
    path = write_points_csv(tmp_path / "p.csv", p)
    assert path.read_text().splitlines()[0] == "x,y"
    np.testing.assert_array_equal(read_points_csv(path), p)


def test_glyph_halves_compose_independently():
    a, b = glyph_image(0, 0), glyph_image(0, 1)
    np.testing.assert_array_equal(a[:, :8], b[:, :8])
    assert not np.array_equal(a[:, 8:], b[:, 8:])


def test_glyph_dataset_is_balanced_and_in_range():
    ds = make_glyph_dataset(3600, seed=0)
    assert ds.images.shape == (3600, 1, 16, 16)
    counts = np.bincount(ds.class_ids, minlength=N_GLYPHS**2)
    assert np.all(counts == 100)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    np.testing.assert_array_equal(ds.images, make_glyph_dataset(3600, seed=0).images)


def test_glyph_dataset_rejects_small_n():
    with pytest.raises(ValueError, match="at least"):
        make_glyph_dataset(36 * 50 - 1)


def test_glyph_factor_pairs_are_linearly_separable():
    ds = make_glyph_dataset(3600, seed=1)
    assert softmax_probe_accuracy(ds.flat, ds.class_ids, 36) >= 0.95


def test_patch_dataset_properties():
    ds = make_patch_dataset(1000, seed=0)
    assert ds.patch == DEFAULT_PATCH
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.bincount(ds.labels).tolist() == [500, 500]
    np.testing.assert_array_equal(ds.images, make_patch_dataset(1000, seed=0).images)
    assert template_overlap(patch_class_template(0), patch_class_template(1)) < 0.5
    assert softmax_probe_accuracy(ds.flat, ds.labels, 2) >= 0.95


def test_patch_dataset_errors():
    with pytest.raises(ValueError):
        make_patch_dataset(10)
    with pytest.raises(ValueError):
        patch_class_template(2)


@pytest.mark.parametrize("binary", [True, False])
def test_pgm_round_trip(tmp_path, binary):
    img = tile_images(make_glyph_dataset(1800, seed=0).images[:12], cols=4)
    path = write_pgm(tmp_path / "g.pgm", img, binary=binary)
    back = read_pgm(path)
    np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-12)


def test_pgm_rejects_other_formats(tmp_path):
    bad = tmp_path / "x.pgm"
    bad.write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(ValueError):
        read_pgm(bad)
