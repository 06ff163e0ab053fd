from dataclasses import dataclass

import numpy as np
import pytest

from implicitface import geometry as geo
from implicitface import heads as hd
from implicitface import nn
from implicitface.features import encode_image, encode_points, make_encoder_pair
from implicitface.heads import (FaceRegion2D, HeadError, SkipMLP,
                                face_region_from_points, make_shape_heads,
                                make_texture_heads, predict_color_body,
                                predict_color_coarse, predict_color_fine,
                                predict_occupancy_body, predict_occupancy_face,
                                route, skip_mlp, texture_prior_volume,
                                train_shape, train_texture)
from implicitface.render import Camera, rasterize

BOUNDS = np.array([[-1.2, -1.2, -1.2], [1.2, 1.2, 1.2]])


def default_cam(size=32, scale=4.0):
    return Camera(np.eye(3), scale, (size, size), (-2.0, 2.0))


def zero_weights(net, final_bias=0.0):
    for layer in net.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
    net.layers[-1].bias[:] = final_bias


def zero_skip(mlp, final_bias=0.0):
    zero_weights(mlp.front)
    zero_weights(mlp.back, final_bias)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    cam: object
    prior_vertices: np.ndarray
    prior_colors: np.ndarray
    volume_bounds: np.ndarray
    points: np.ndarray
    face: np.ndarray
    occupancy: np.ndarray = None
    colors: np.ndarray = None


def sphere_scene(seed=0, size=32, n_points=400, radius=0.8):
    """A lit sphere subject with occupancy-labelled query points."""
    rng = np.random.default_rng(seed)
    mesh = geo.icosphere(3)
    mesh.vertices = mesh.vertices * radius
    mesh.colors = np.tile([0.8, 0.6, 0.5], (len(mesh.vertices), 1)) \
        .astype(np.float32)
    cam = default_cam(size)
    out = rasterize(mesh, cam)
    pts = rng.uniform(-1.1, 1.1, (n_points, 3))
    occ = (np.linalg.norm(pts, axis=1) < radius).astype(np.float32)
    top = mesh.vertices[mesh.vertices[:, 1] > 0.5 * radius]
    region = face_region_from_points(cam, top, margin=0.05)
    face = route(region, cam, pts)
    return Sample(out.rgb, out.mask.astype(np.float32), cam,
                  mesh.vertices.astype(np.float64), mesh.colors,
                  BOUNDS, pts, face, occupancy=occ), mesh, region


def surface_color_sample(seed=0, size=32, n_points=300, radius=0.8):
    """Two-tone sphere with surface color labels for texture training."""
    rng = np.random.default_rng(seed)
    mesh = geo.icosphere(3)
    mesh.vertices = mesh.vertices * radius
    tone = np.where(mesh.vertices[:, [0]] > 0, 0.85, 0.25)
    mesh.colors = np.repeat(tone, 3, axis=1).astype(np.float32)
    cam = default_cam(size)
    out = rasterize(mesh, cam)
    pick = rng.integers(0, len(mesh.vertices), n_points)
    pts = mesh.vertices[pick].astype(np.float64)
    cols = mesh.colors[pick]
    top = mesh.vertices[mesh.vertices[:, 1] > 0.5 * radius]
    region = face_region_from_points(cam, top, margin=0.05)
    face = route(region, cam, pts)
    return Sample(out.rgb, out.mask.astype(np.float32), cam,
                  mesh.vertices.astype(np.float64), mesh.colors,
                  BOUNDS, pts, face, colors=cols), mesh, region


# ---------------------------------------------------------------- predictions

@pytest.mark.parametrize("mode", hd.FUSION_MODES)
def test_constant_fuse_head(mode):
    rng = np.random.default_rng(0)
    heads = make_shape_heads(rng, mode, channels_2d=8, channels_3d=8)
    zero_skip(heads.fuse, final_bias=0.7)
    sample, mesh, _ = sphere_scene()
    fmap = encode_image(heads.image_encoder, sample.image, sample.mask)
    fvol = encode_points(heads.prior_encoder, sample.prior_vertices, BOUNDS,
                         resolution=8)
    pred = predict_occupancy_face(heads, fmap, fvol, sample.cam, sample.points)
    assert np.allclose(pred, 1.0 / (1.0 + np.exp(-0.7)), atol=1e-6)


def test_occupancy_outputs_in_unit_interval():
    rng = np.random.default_rng(1)
    heads = make_shape_heads(rng, "concat", channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(1)
    fmap = encode_image(heads.image_encoder, sample.image, sample.mask)
    fvol = encode_points(heads.prior_encoder, sample.prior_vertices, BOUNDS,
                         resolution=8)
    pts = rng.uniform(-2, 2, (10_000, 3))
    face = predict_occupancy_face(heads, fmap, fvol, sample.cam, pts)
    body = predict_occupancy_body(heads, fmap, sample.cam, pts)
    assert face.min() >= 0 and face.max() <= 1
    assert body.min() >= 0 and body.max() <= 1


def test_body_head_isolated_from_prior_encoder():
    rng = np.random.default_rng(2)
    heads = make_shape_heads(rng, "mlp-concat", channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(2)
    fmap = encode_image(heads.image_encoder, sample.image, sample.mask)
    before = predict_occupancy_body(heads, fmap, sample.cam, sample.points)
    for layer in heads.prior_encoder.point_net.layers:
        layer.weights += 1.0
    after = predict_occupancy_body(heads, fmap, sample.cam, sample.points)
    assert np.array_equal(before, after)


def test_fusion_mode_2d_only_ignores_prior():
    rng = np.random.default_rng(3)
    heads = make_shape_heads(rng, "2d-only", channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(3)
    fmap = encode_image(heads.image_encoder, sample.image, sample.mask)
    v1 = encode_points(heads.prior_encoder, sample.prior_vertices, BOUNDS,
                       resolution=8)
    jittered = sample.prior_vertices + 0.2
    v2 = encode_points(heads.prior_encoder, jittered, BOUNDS, resolution=8)
    a = predict_occupancy_face(heads, fmap, v1, sample.cam, sample.points)
    b = predict_occupancy_face(heads, fmap, v2, sample.cam, sample.points)
    assert np.array_equal(a, b)


def test_fusion_mode_3d_only_ignores_image():
    rng = np.random.default_rng(4)
    heads = make_shape_heads(rng, "3d-only", channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(4)
    fvol = encode_points(heads.prior_encoder, sample.prior_vertices, BOUNDS,
                         resolution=8)
    f1 = encode_image(heads.image_encoder, sample.image, sample.mask)
    noisy = np.clip(sample.image + 0.3, 0, 1)
    f2 = encode_image(heads.image_encoder, noisy, sample.mask)
    a = predict_occupancy_face(heads, f1, fvol, sample.cam, sample.points)
    b = predict_occupancy_face(heads, f2, fvol, sample.cam, sample.points)
    assert np.array_equal(a, b)


def test_unknown_fusion_mode_rejected():
    with pytest.raises(HeadError):
        make_shape_heads(np.random.default_rng(0), "both")


# --------------------------------------------------------------------- route

def test_route_partition_and_membership():
    sample, mesh, region = sphere_scene(5)
    face = route(region, sample.cam, sample.points)
    assert face.dtype == bool and len(face) == len(sample.points)
    # topmost vertex is inside the region box by construction
    top_vertex = mesh.vertices[np.argmax(mesh.vertices[:, 1])]
    assert route(region, sample.cam, top_vertex[None])[0]
    # a far lateral extremity is not
    assert not route(region, sample.cam, np.array([[1.0, -1.0, 0.0]]))[0]


def test_route_is_purely_2d():
    sample, mesh, region = sphere_scene(6)
    top_vertex = mesh.vertices[np.argmax(mesh.vertices[:, 1])]
    behind = top_vertex + np.array([0.0, 0.0, 1.5])  # same projection
    assert route(region, sample.cam, behind[None])[0]


def test_empty_face_region_rejected():
    with pytest.raises(HeadError):
        FaceRegion2D(5.0, 5.0, 5.0, 9.0)


# ------------------------------------------------------------------- texture

def test_coarse_color_constant_head_and_omega():
    rng = np.random.default_rng(7)
    tex = make_texture_heads(rng, "coarse", channels_2d=8, shape_channels=8)
    zero_weights(tex.coarse_head)
    tex.coarse_head.layers[-1].bias[:] = 0.3
    tex.coarse_head.layers[-2].bias[:] = 1.5
    shape = make_shape_heads(np.random.default_rng(8), "2d-only",
                             channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(7)
    fs = encode_image(shape.image_encoder, sample.image, sample.mask)
    ft = encode_image(tex.image_encoder_coarse, sample.image, sample.mask)
    rgb, omega = predict_color_coarse(tex, fs, ft, sample.cam, sample.points)
    assert np.allclose(rgb, 1.0 / (1.0 + np.exp(-0.3)), atol=1e-6)
    assert omega.shape == (len(sample.points), hd.OMEGA_WIDTH)
    assert np.allclose(omega, 1.5, atol=1e-6)  # relu(bias) of penultimate
    assert rgb.min() >= 0 and rgb.max() <= 1


def test_fine_map_is_4x_coarse_resolution():
    rng = np.random.default_rng(9)
    tex = make_texture_heads(rng, "coarse2fine3d", channels_2d=8,
                             shape_channels=8)
    sample, _, _ = sphere_scene(9)
    coarse = encode_image(tex.image_encoder_coarse, sample.image, sample.mask)
    masked = sample.image * sample.mask[:, :, None]
    fine, _ = tex.image_encoder_fine.forward(masked.astype(np.float32))
    assert fine.shape[0] == 4 * coarse.height
    assert fine.shape[1] == 4 * coarse.width


def test_fine_branch_rejected_in_coarse_mode():
    rng = np.random.default_rng(10)
    tex = make_texture_heads(rng, "coarse", channels_2d=8, shape_channels=8)
    with pytest.raises(HeadError):
        predict_color_fine(tex, None, None, None, None, np.zeros((1, 3)))


@pytest.mark.parametrize("mode", ["fine", "fine3d", "coarse2fine3d"])
def test_fine_color_in_unit_interval(mode):
    rng = np.random.default_rng(11)
    tex = make_texture_heads(rng, mode, channels_2d=8, channels_3d=8,
                             shape_channels=8)
    shape = make_shape_heads(np.random.default_rng(12), "2d-only",
                             channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(11)
    fs = encode_image(shape.image_encoder, sample.image, sample.mask)
    ft = encode_image(tex.image_encoder_coarse, sample.image, sample.mask)
    masked = (sample.image * sample.mask[:, :, None]).astype(np.float32)
    fine_data, _ = tex.image_encoder_fine.forward(masked)
    from implicitface.features import FeatureMap2D
    fine = FeatureMap2D(fine_data)
    tvol = texture_prior_volume(shape, tex, sample.prior_vertices, BOUNDS,
                                sample.prior_colors, resolution=8)
    _, omega = predict_color_coarse(tex, fs, ft, sample.cam, sample.points)
    rgb = predict_color_fine(tex, fine, tvol, omega, sample.cam, sample.points)
    assert rgb.shape == (len(sample.points), 3)
    assert rgb.min() >= 0 and rgb.max() <= 1


# ------------------------------------------------------------------ training

def test_train_shape_beats_constant_predictor():
    rng = np.random.default_rng(13)
    heads = make_shape_heads(rng, "mlp-concat", channels_2d=8, channels_3d=8)
    sample, _, _ = sphere_scene(13)
    history = train_shape(heads, [sample], epochs=200, lr=1e-3,
                          volume_resolution=8)
    assert history[-1] < 0.25


def test_train_shape_deterministic():
    sample, _, _ = sphere_scene(14)
    curves = []
    for _ in range(2):
        heads = make_shape_heads(np.random.default_rng(14), "concat",
                                 channels_2d=8, channels_3d=8)
        curves.append(train_shape(heads, [sample], epochs=5, lr=1e-3,
                                  volume_resolution=8))
    assert curves[0] == curves[1]


def test_train_shape_rejects_empty_dataset():
    heads = make_shape_heads(np.random.default_rng(0), "2d-only")
    with pytest.raises(HeadError):
        train_shape(heads, [], epochs=1, lr=1e-3)


def test_train_texture_stage_order_enforced():
    rng = np.random.default_rng(15)
    shape = make_shape_heads(rng, "2d-only", channels_2d=8, channels_3d=8)
    tex = make_texture_heads(rng, "coarse2fine3d", channels_2d=8,
                             shape_channels=8)
    sample, _, _ = surface_color_sample(15)
    with pytest.raises(HeadError):
        train_texture(shape, tex, [sample], "fine", epochs=1, lr=1e-3)


def test_train_texture_constant_color_convergence():
    rng = np.random.default_rng(16)
    shape = make_shape_heads(rng, "2d-only", channels_2d=8, channels_3d=8)
    tex = make_texture_heads(rng, "coarse", channels_2d=8, shape_channels=8)
    sample, _, _ = surface_color_sample(16)
    sample.colors = np.full_like(sample.colors, 0.6)
    history = train_texture(shape, tex, [sample], "coarse", epochs=400,
                            lr=1e-2)
    assert history[-1] < 0.02


def test_fine_stage_freezes_coarse_branch():
    rng = np.random.default_rng(17)
    shape = make_shape_heads(rng, "2d-only", channels_2d=8, channels_3d=8)
    tex = make_texture_heads(rng, "coarse2fine3d", channels_2d=8,
                             channels_3d=8, shape_channels=8)
    sample, _, _ = surface_color_sample(17)
    train_texture(shape, tex, [sample], "coarse", epochs=3, lr=1e-3,
                  volume_resolution=8)
    frozen = {name: arr.tobytes()
              for net in (tex.image_encoder_coarse, tex.coarse_head)
              for name, arr in net.parameters()}
    train_texture(shape, tex, [sample], "fine", epochs=3, lr=1e-3,
                  volume_resolution=8)
    for net in (tex.image_encoder_coarse, tex.coarse_head):
        for name, arr in net.parameters():
            assert arr.tobytes() == frozen[name], name
    assert tex.fine_trained


def test_texture_training_loss_decreases():
    rng = np.random.default_rng(18)
    shape = make_shape_heads(rng, "2d-only", channels_2d=8, channels_3d=8)
    tex = make_texture_heads(rng, "coarse2fine3d", channels_2d=8,
                             channels_3d=8, shape_channels=8)
    sample, _, _ = surface_color_sample(18)
    coarse = train_texture(shape, tex, [sample], "coarse", epochs=60, lr=3e-3,
                           volume_resolution=8)
    fine = train_texture(shape, tex, [sample], "fine", epochs=60, lr=3e-3,
                         volume_resolution=8)
    assert coarse[-1] < coarse[0]
    assert fine[-1] < fine[0]


# ------------------------------------------------------------------ gradients

def test_skip_mlp_gradient_check():
    rng = np.random.default_rng(19)
    mlp = skip_mlp(rng, "chk", 5, 2, "identity", width=8)
    mlp64 = SkipMLP(mlp.front.astype(np.float64), mlp.back.astype(np.float64))
    x = rng.normal(size=(7, 5))
    y, cache = mlp64.forward(x)
    grads, dx = mlp64.backward(cache, y)  # loss = 0.5*sum(y^2)

    def loss(inp):
        out, _ = mlp64.forward(inp)
        return 0.5 * float(np.sum(out * out))

    h = 1e-5
    worst = 0.0
    for net, gnet in zip(mlp64.networks(), grads):
        for (dw, db), layer in zip(gnet, net.layers):
            for theta, analytic in ((layer.weights, dw), (layer.bias, db)):
                flat = theta.reshape(-1)
                for j in rng.choice(flat.size, min(20, flat.size),
                                    replace=False):
                    old = flat[j]
                    flat[j] = old + h
                    lp = loss(x)
                    flat[j] = old - h
                    lm = loss(x)
                    flat[j] = old
                    num = (lp - lm) / (2 * h)
                    a = analytic.reshape(-1)[j]
                    worst = max(worst,
                                abs(a - num) / max(abs(a), abs(num), 1e-6))
    xf = x.reshape(-1)
    for j in rng.choice(xf.size, 20, replace=False):
        old = xf[j]
        xf[j] = old + h
        lp = loss(x)
        xf[j] = old - h
        lm = loss(x)
        xf[j] = old
        num = (lp - lm) / (2 * h)
        a = dx.reshape(-1)[j]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    assert worst < 1e-4
