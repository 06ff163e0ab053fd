import numpy as np
import pytest

from implicitface.features import (FeatureError, FeatureMap2D, FeatureVolume3D,
                                   encode_image, encode_points,
                                   make_encoder_pair, make_image_encoder,
                                   normalize_points,
                                   sample_bilinear, sample_bilinear_grad,
                                   sample_trilinear, sample_trilinear_grad,
                                   scatter_average)

from oracles import bilinear_formula, scatter_average_oracle, trilinear_formula

BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


# ---------------------------------------------------------------- encode_image

def test_encode_image_quarters_resolution():
    enc = make_image_encoder(np.random.default_rng(0), "psi", channels=8)
    fmap = encode_image(enc, np.random.default_rng(1).random((64, 48, 3)))
    assert (fmap.height, fmap.width, fmap.channels) == (16, 12, 8)


def test_encode_image_zero_input_zero_output():
    enc = make_image_encoder(np.random.default_rng(0), "psi", channels=4)
    fmap = encode_image(enc, np.zeros((32, 32, 3)))
    assert np.all(fmap.data == 0.0)


def test_encode_image_mask_contract():
    rng = np.random.default_rng(2)
    enc = make_image_encoder(rng, "psi", channels=4)
    mask = np.zeros((32, 32))
    mask[8:24, 8:24] = 1
    img1 = rng.random((32, 32, 3))
    img2 = img1.copy()
    img2[mask == 0] = rng.random(((mask == 0).sum(), 3))
    a = encode_image(enc, img1, mask=mask)
    b = encode_image(enc, img2, mask=mask)
    assert np.array_equal(a.data, b.data)


def test_encode_image_rejects_bad_size():
    enc = make_image_encoder(np.random.default_rng(0), "psi")
    with pytest.raises(FeatureError):
        encode_image(enc, np.zeros((30, 32, 3)))


# --------------------------------------------------------------- encode_points

def test_scatter_single_point():
    feats = np.array([[1.0, 2.0, 3.0]])
    pts01 = np.array([[0.51, 0.26, 0.76]])
    vol = scatter_average(feats, pts01, 4)
    assert np.allclose(vol[2, 1, 3], [1, 2, 3])
    hits = np.abs(vol).sum(axis=3) > 0
    assert hits.sum() == 1


def test_scatter_average_of_identical_points():
    feats = np.tile([[0.5, -1.0]], (7, 1))
    pts01 = np.tile([[0.1, 0.1, 0.1]], (7, 1))
    one = scatter_average(feats[:1], pts01[:1], 4)
    many = scatter_average(feats, pts01, 4)
    assert np.array_equal(one, many)


def test_scatter_matches_naive_oracle():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(500, 6))
    pts01 = rng.random((500, 3))
    got = scatter_average(feats, pts01, 8)
    want = scatter_average_oracle(feats, pts01, 8)
    assert np.abs(got - want).max() < 1e-6


def test_scatter_permutation_invariant_bitwise():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(300, 4))
    pts01 = rng.random((300, 3))
    perm = rng.permutation(300)
    a = scatter_average(feats, pts01, 6)
    b = scatter_average(feats[perm], pts01[perm], 6)
    assert np.array_equal(a, b)


def test_encode_points_empty_rejected():
    pair = make_encoder_pair(np.random.default_rng(0), channels=4)
    with pytest.raises(FeatureError):
        encode_points(pair.geometry, np.zeros((0, 3)), BOUNDS)


def test_encode_points_clamp_count():
    pts = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, -9.0, 0.0]])
    _, clamped = normalize_points(pts, BOUNDS)
    assert clamped == 2


def test_dual_encoder_color_isolation():
    rng = np.random.default_rng(5)
    pair = make_encoder_pair(rng, channels=8)
    verts = rng.uniform(-0.9, 0.9, (100, 3))
    col1 = rng.random((100, 3))
    col2 = rng.random((100, 3))
    g1 = encode_points(pair.geometry, verts, BOUNDS, resolution=8)
    g2 = encode_points(pair.geometry, verts, BOUNDS, resolution=8)
    assert np.array_equal(g1.data, g2.data)  # geometry ignores colors entirely
    t1 = encode_points(pair.texture, verts, BOUNDS, colors=col1, resolution=8)
    t2 = encode_points(pair.texture, verts, BOUNDS, colors=col2, resolution=8)
    assert not np.array_equal(t1.data, t2.data)


def test_texture_encoder_requires_colors():
    pair = make_encoder_pair(np.random.default_rng(0), channels=4)
    with pytest.raises(FeatureError):
        encode_points(pair.texture, np.zeros((5, 3)), BOUNDS)


# ------------------------------------------------------------------- sampling

def test_bilinear_node_hit():
    rng = np.random.default_rng(6)
    fmap = FeatureMap2D(rng.random((5, 7, 3)).astype(np.float32))
    out = sample_bilinear(fmap, np.array([[4.0, 2.0]]))
    assert np.allclose(out[0], fmap.data[2, 4], atol=1e-7)


def test_bilinear_reproduces_linear_ramp():
    h, w = 9, 11
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    ramp = np.stack([2 * u + 3 * v + 1, -u + 0.5 * v], axis=2)
    fmap = FeatureMap2D(ramp.astype(np.float32))
    rng = np.random.default_rng(7)
    uv = np.stack([rng.uniform(0, w - 1, 300), rng.uniform(0, h - 1, 300)], 1)
    got = sample_bilinear(fmap, uv)
    want = np.stack([2 * uv[:, 0] + 3 * uv[:, 1] + 1,
                     -uv[:, 0] + 0.5 * uv[:, 1]], 1)
    assert np.abs(got - want).max() < 1e-5


def test_bilinear_matches_formula_oracle():
    rng = np.random.default_rng(8)
    data = rng.random((12, 10, 4))
    fmap = FeatureMap2D(data.astype(np.float32))
    uv = np.stack([rng.uniform(-1, 10.5, 1000), rng.uniform(-1, 12.5, 1000)], 1)
    got = sample_bilinear(fmap, uv)
    want = bilinear_formula(fmap.data.astype(np.float64), uv)
    assert np.abs(got - want).max() < 1e-6


def test_trilinear_node_hit():
    rng = np.random.default_rng(9)
    vol = FeatureVolume3D(rng.random((5, 5, 5, 2)).astype(np.float32), BOUNDS)
    # node (1, 3, 2) sits at lo + index/(D-1)*(hi-lo)
    p = BOUNDS[0] + np.array([1, 3, 2]) / 4.0 * (BOUNDS[1] - BOUNDS[0])
    out = sample_trilinear(vol, p[None])
    assert np.allclose(out[0], vol.data[1, 3, 2], atol=1e-6)


def test_trilinear_reproduces_linear_field():
    d = 6
    axis = np.linspace(-1, 1, d)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    vol = FeatureVolume3D(
        (1.5 * gx - 2.0 * gy + 0.25 * gz + 3.0)[..., None].astype(np.float32),
        BOUNDS)
    rng = np.random.default_rng(10)
    pts = rng.uniform(-1, 1, (500, 3))
    got = sample_trilinear(vol, pts)[:, 0]
    want = 1.5 * pts[:, 0] - 2.0 * pts[:, 1] + 0.25 * pts[:, 2] + 3.0
    assert np.abs(got - want).max() < 1e-5


def test_trilinear_matches_formula_oracle():
    rng = np.random.default_rng(11)
    vol = FeatureVolume3D(rng.random((7, 7, 7, 3)).astype(np.float32), BOUNDS)
    pts = rng.uniform(-1.3, 1.3, (1000, 3))
    got = sample_trilinear(vol, pts)
    want = trilinear_formula(vol.data.astype(np.float64), BOUNDS, pts)
    assert np.abs(got - want).max() < 1e-6


def test_sampling_is_continuous():
    rng = np.random.default_rng(12)
    vol = FeatureVolume3D(rng.random((8, 8, 8, 2)).astype(np.float32), BOUNDS)
    cell = 2.0 / 7
    lipschitz = np.abs(np.diff(vol.data, axis=0)).max() / cell * 3 + 1e-6
    pts = rng.uniform(-0.9, 0.9, (200, 3))
    h = 1e-4
    moved = pts + rng.normal(0, 1, (200, 3)) * h
    delta = np.abs(sample_trilinear(vol, moved) - sample_trilinear(vol, pts))
    assert delta.max() <= lipschitz * np.abs(moved - pts).max() * 10


# ------------------------------------------------------------ sampling grads

def test_bilinear_grad_adjoint_identity():
    rng = np.random.default_rng(13)
    data = rng.random((6, 9, 3)).astype(np.float32)
    uv = np.stack([rng.uniform(0, 8, 50), rng.uniform(0, 5, 50)], 1)
    dout = rng.normal(size=(50, 3))
    lhs = float(np.sum(sample_bilinear(FeatureMap2D(data), uv)
                       .astype(np.float64) * dout))
    grad = sample_bilinear_grad(data.shape, uv, dout)
    rhs = float(np.sum(data.astype(np.float64) * grad))
    assert abs(lhs - rhs) < 1e-4 * max(abs(lhs), 1.0)


def test_trilinear_grad_adjoint_identity():
    rng = np.random.default_rng(14)
    vol = FeatureVolume3D(rng.random((5, 5, 5, 4)).astype(np.float32), BOUNDS)
    pts = rng.uniform(-1, 1, (60, 3))
    dout = rng.normal(size=(60, 4))
    lhs = float(np.sum(sample_trilinear(vol, pts).astype(np.float64) * dout))
    grad = sample_trilinear_grad(vol, pts, dout)
    rhs = float(np.sum(vol.data.astype(np.float64) * grad))
    assert abs(lhs - rhs) < 1e-4 * max(abs(lhs), 1.0)
