"""Jointly-aligned implicit functions.

The occupancy head fuses a pixel-aligned 2D feature with a space-aligned 3D
prior feature (selectable fusion modes mirror the ablation variants); a plain
pixel-aligned body head covers non-face queries. Texture runs coarse-to-fine:
the coarse branch predicts a base color and exposes its penultimate activation,
which the fine branch concatenates with a higher-resolution pixel-aligned
feature and an optional 3D prior feature.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .features import (FeatureMap2D, FeatureVolume3D, encode_image,
                       encode_points, sample_bilinear, sample_bilinear_grad,
                       sample_trilinear, sample_trilinear_grad,
                       scatter_average_grad, make_image_encoder,
                       make_point_encoder, normalize_points,
                       splat_color_volume)
from .render import project

FUSION_MODES = ("2d-only", "3d-only", "concat", "mlp-concat")
TEXTURE_MODES = ("coarse", "fine", "fine3d", "coarse2fine3d")
# how the texture fine branch sees the aligned prior mesh:
#   plain    - one position-only encoder (no color input)
#   textured - one position+color encoder
#   dual     - position+color volume concatenated onto the frozen
#              geometry volume from the shape stage
PRIOR_STYLES = ("plain", "textured", "dual")

TRANSFORM_WIDTH = 64
FUSE_WIDTH = 128
OMEGA_WIDTH = 64


class HeadError(ValueError):
    pass


class SkipMLP:
    """Four dense layers with the raw input concatenated back in at layer 3
    (pixel-aligned-implicit-function convention)."""

    def __init__(self, front, back):
        self.front = front
        self.back = back

    def forward(self, x):
        h, cf = self.front.forward(x)
        y, cb = self.back.forward(np.concatenate([h, x], axis=-1))
        return y, (cf, cb, h.shape[-1])

    def backward(self, cache, dy):
        cf, cb, hw = cache
        gb, dxb = self.back.backward(cb, dy)
        gf, dx = self.front.backward(cf, dxb[..., :hw])
        return (gf, gb), dx + dxb[..., hw:]

    def networks(self):
        return [self.front, self.back]

    def parameters(self):
        for net in self.networks():
            yield from net.parameters()


def skip_mlp(rng, name, n_in, n_out, out_activation, width=FUSE_WIDTH):
    front = nn.Network(name + "_a", [nn.dense(rng, n_in, width),
                                     nn.dense(rng, width, width)])
    back = nn.Network(name + "_b", [nn.dense(rng, width + n_in, width),
                                    nn.dense(rng, width, n_out, out_activation)])
    return SkipMLP(front, back)


def transform_mlp(rng, name, n_in, width=TRANSFORM_WIDTH):
    return nn.Network(name, [nn.dense(rng, n_in, width),
                             nn.dense(rng, width, width, activation="identity")])


@dataclass
class FaceRegion2D:
    """Pixel-space AABB of the face with a dilation margin."""
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    margin: float = 0.1

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise HeadError("empty face region")

    def dilated(self, image_size=None):
        du = (self.u_max - self.u_min) * self.margin
        dv = (self.v_max - self.v_min) * self.margin
        box = [self.u_min - du, self.v_min - dv, self.u_max + du, self.v_max + dv]
        if image_size is not None:
            w, h = image_size
            box = [max(box[0], 0.0), max(box[1], 0.0),
                   min(box[2], w - 1.0), min(box[3], h - 1.0)]
        return box


def face_region_from_points(cam, points, margin=0.1):
    uvz = project(cam, points)
    return FaceRegion2D(uvz[:, 0].min(), uvz[:, 1].min(),
                        uvz[:, 0].max(), uvz[:, 1].max(), margin)


def route(face_region, cam, points):
    """True where the projection falls inside the dilated face box (purely 2D:
    depth never enters the decision)."""
    uvz = project(cam, np.atleast_2d(points))
    u0, v0, u1, v1 = face_region.dilated(getattr(cam, "image_size", None))
    return ((uvz[:, 0] >= u0) & (uvz[:, 0] <= u1)
            & (uvz[:, 1] >= v0) & (uvz[:, 1] <= v1))


@dataclass
class ShapeHeads:
    image_encoder: nn.Network        # psi_g
    prior_encoder: object            # phi_g (PointEncoder)
    transform_2d: nn.Network
    transform_3d: nn.Network
    fuse: SkipMLP                    # f_g, sigmoid output
    body_head: SkipMLP               # f_v, sigmoid output
    fusion_mode: str
    channels_2d: int
    channels_3d: int
    transform_width: int = TRANSFORM_WIDTH

    def trainable_networks(self):
        nets = [self.image_encoder, self.prior_encoder.point_net,
                self.prior_encoder.smoother, self.transform_2d,
                self.transform_3d] + self.fuse.networks() \
            + self.body_head.networks()
        return nets


def make_shape_heads(rng, fusion_mode="mlp-concat", channels_2d=32,
                     channels_3d=32, transform_width=TRANSFORM_WIDTH,
                     fuse_width=FUSE_WIDTH):
    if fusion_mode not in FUSION_MODES:
        raise HeadError(f"unknown fusion mode {fusion_mode!r}")
    # branches with a feature volume also receive the query's normalized
    # in-volume position, so the fuse MLP can relate the splatted prior
    # vertex features to where the query actually sits
    fuse_in = {"2d-only": channels_2d + 1,
               "3d-only": channels_3d + 4,
               "concat": channels_2d + channels_3d + 4,
               "mlp-concat": 2 * transform_width + 4}[fusion_mode]
    return ShapeHeads(
        image_encoder=make_image_encoder(rng, "psi_g", 3, channels_2d),
        prior_encoder=make_point_encoder(rng, "phi_g", 3, channels_3d),
        transform_2d=transform_mlp(rng, "shape_t2d", channels_2d,
                                   transform_width),
        transform_3d=transform_mlp(rng, "shape_t3d", channels_3d + 3,
                                   transform_width),
        fuse=skip_mlp(rng, "f_g", fuse_in, 1, "sigmoid", fuse_width),
        body_head=skip_mlp(rng, "f_v", channels_2d + 1, 1, "sigmoid",
                           fuse_width),
        fusion_mode=fusion_mode,
        channels_2d=channels_2d, channels_3d=channels_3d,
        transform_width=transform_width)


@dataclass
class TextureHeads:
    image_encoder_coarse: nn.Network  # psi_t (quarter-resolution map)
    image_encoder_fine: nn.Network    # full-resolution map (4x coarse)
    prior_encoder: object             # phi_t (PointEncoder, position+color)
    coarse_head: nn.Network           # exposes penultimate activation
    fine_transform_2d: nn.Network
    fine_transform_3d: nn.Network
    fine_fuse: SkipMLP
    body_texture_head: SkipMLP
    texture_mode: str
    channels_2d: int
    channels_3d: int
    transform_width: int = TRANSFORM_WIDTH
    prior_style: str = "textured"
    shape_channels_3d: int = 0   # geometry-volume channels in the dual style
    coarse_trained: bool = False
    fine_trained: bool = False

    def coarse_networks(self):
        return [self.image_encoder_coarse, self.coarse_head] \
            + self.body_texture_head.networks()

    def fine_networks(self):
        nets = [self.image_encoder_fine, self.fine_transform_2d] \
            + self.fine_fuse.networks() + self.body_texture_head.networks()
        if self.texture_mode in ("fine3d", "coarse2fine3d"):
            nets += [self.prior_encoder.point_net, self.prior_encoder.smoother,
                     self.fine_transform_3d]
        return nets


def make_fine_image_encoder(rng, name, cin=3, channels=32):
    """Stride-1 stack: the feature map keeps the input resolution, i.e. 4x the
    spatial size of the quarter-resolution coarse map."""
    return nn.Network(name, [
        nn.conv2d(rng, cin, channels),
        nn.conv2d(rng, channels, channels),
        nn.conv2d(rng, channels, channels, activation="identity"),
    ])


def make_texture_heads(rng, texture_mode="coarse2fine3d", channels_2d=32,
                       channels_3d=32, shape_channels=32,
                       transform_width=TRANSFORM_WIDTH, fuse_width=FUSE_WIDTH,
                       omega_width=OMEGA_WIDTH, prior_style="textured",
                       shape_channels_3d=None):
    if texture_mode not in TEXTURE_MODES:
        raise HeadError(f"unknown texture mode {texture_mode!r}")
    if prior_style not in PRIOR_STYLES:
        raise HeadError(f"unknown prior style {prior_style!r}")
    shape_channels_3d = channels_3d if shape_channels_3d is None \
        else shape_channels_3d
    prior_in = 3 if prior_style == "plain" else 6
    # learned texture channels (+ frozen geometry channels in the dual
    # style) + 4 raw diffused-albedo/coverage channels
    g3_width = channels_3d + 4 + (shape_channels_3d
                                  if prior_style == "dual" else 0)
    coarse_in = shape_channels + channels_2d + 1
    t2d_in = {"coarse": channels_2d + 1,          # unused, kept well-formed
              "fine": channels_2d + 1,
              "fine3d": channels_2d + 1,
              "coarse2fine3d": channels_2d + omega_width}[texture_mode]
    fuse_in = transform_width if texture_mode == "fine" else 2 * transform_width
    coarse_head = nn.Network("coarse_head", [
        nn.dense(rng, coarse_in, fuse_width),
        nn.dense(rng, fuse_width, fuse_width),
        nn.dense(rng, fuse_width, omega_width),
        nn.dense(rng, omega_width, 3, activation="sigmoid"),
    ])
    return TextureHeads(
        image_encoder_coarse=make_image_encoder(rng, "psi_t_coarse", 3,
                                                channels_2d),
        image_encoder_fine=make_fine_image_encoder(rng, "psi_t_fine", 3,
                                                   channels_2d),
        prior_encoder=make_point_encoder(rng, "phi_t", prior_in, channels_3d),
        coarse_head=coarse_head,
        fine_transform_2d=transform_mlp(rng, "tex_t2d", t2d_in,
                                        transform_width),
        fine_transform_3d=transform_mlp(rng, "tex_t3d", g3_width,
                                        transform_width),
        fine_fuse=skip_mlp(rng, "f_t", fuse_in, 3, "sigmoid", fuse_width),
        body_texture_head=skip_mlp(rng, "f_t_body", coarse_in, 3, "sigmoid",
                                   fuse_width),
        texture_mode=texture_mode,
        channels_2d=channels_2d, channels_3d=channels_3d,
        transform_width=transform_width, prior_style=prior_style,
        shape_channels_3d=shape_channels_3d)


def image_to_map_uv(uv, image_size, map_shape):
    """Image pixel coordinates -> feature-map pixel coordinates."""
    w, h = image_size
    mh, mw = map_shape[:2]
    uv = np.asarray(uv, np.float64)
    return np.stack([uv[:, 0] * (mw - 1) / (w - 1),
                     uv[:, 1] * (mh - 1) / (h - 1)], axis=1)


def _pixel_feature(fmap, cam, points):
    uvz = project(cam, np.atleast_2d(points))
    uv = image_to_map_uv(uvz[:, :2], cam.image_size, fmap.data.shape)
    return sample_bilinear(fmap, uv), uvz[:, 2:3].astype(np.float32), uv


def _face_fuse_input(heads, g2, g3, x01, z):
    """Per-mode fuse input; returns (input, caches-for-backward)."""
    mode = heads.fusion_mode
    if mode == "2d-only":
        return np.concatenate([g2, z], axis=1), None
    if mode == "3d-only":
        return np.concatenate([g3, x01, z], axis=1), None
    if mode == "concat":
        return np.concatenate([g2, g3, x01, z], axis=1), None
    t2, c2 = heads.transform_2d.forward(g2)
    t3, c3 = heads.transform_3d.forward(np.concatenate([g3, x01], axis=1))
    return np.concatenate([t2, t3, x01, z], axis=1), (c2, c3)


def predict_occupancy_face(heads, feat_map, feat_volume, cam, points):
    """Jointly-aligned occupancy for face-routed queries, in [0, 1]."""
    pts = np.atleast_2d(points)
    g2, z, _ = _pixel_feature(feat_map, cam, pts)
    if heads.fusion_mode != "2d-only":
        g3 = sample_trilinear(feat_volume, pts)
        x01 = normalize_points(pts, feat_volume.world_bounds)[0] \
            .astype(np.float32)
    else:
        g3 = np.zeros((len(pts), heads.channels_3d), np.float32)
        x01 = np.zeros((len(pts), 3), np.float32)
    x, _ = _face_fuse_input(heads, g2, g3, x01, z)
    out, _ = heads.fuse.forward(x)
    return out[:, 0]


def predict_occupancy_body(heads, feat_map, cam, points):
    """Pixel-aligned occupancy for body-routed queries, in [0, 1]."""
    pts = np.atleast_2d(points)
    g2, z, _ = _pixel_feature(feat_map, cam, pts)
    out, _ = heads.body_head.forward(np.concatenate([g2, z], axis=1))
    return out[:, 0]


def predict_color_coarse(tex_heads, shape_feat_map, tex_feat_map, cam, points):
    """Coarse rgb plus the penultimate activation (the multi-scale hook)."""
    pts = np.atleast_2d(points)
    g2s, z, _ = _pixel_feature(shape_feat_map, cam, pts)
    g2t, _, _ = _pixel_feature(tex_feat_map, cam, pts)
    x = np.concatenate([g2s, g2t, z], axis=1)
    rgb, caches = tex_heads.coarse_head.forward(x)
    omega = caches[-2][1]
    return rgb, omega


def predict_color_fine(tex_heads, fine_feat_map, tex_volume, omega, cam,
                       points):
    """Fine rgb from the multi-scale pixel-aligned feature and (per mode) the
    space-aligned texture feature."""
    mode = tex_heads.texture_mode
    if mode == "coarse":
        raise HeadError("texture mode 'coarse' has no fine branch")
    pts = np.atleast_2d(points)
    gf, z, _ = _pixel_feature(fine_feat_map, cam, pts)
    if mode == "coarse2fine3d":
        x2 = np.concatenate([gf, omega], axis=1)
    else:
        x2 = np.concatenate([gf, z], axis=1)
    t2, _ = tex_heads.fine_transform_2d.forward(x2)
    if mode == "fine":
        rgb, _ = tex_heads.fine_fuse.forward(t2)
        return rgb
    g3 = sample_trilinear(tex_volume, pts)
    t3, _ = tex_heads.fine_transform_3d.forward(g3)
    rgb, _ = tex_heads.fine_fuse.forward(np.concatenate([t2, t3], axis=1))
    return rgb


def predict_color_body(tex_heads, shape_feat_map, tex_feat_map, cam, points):
    pts = np.atleast_2d(points)
    g2s, z, _ = _pixel_feature(shape_feat_map, cam, pts)
    g2t, _, _ = _pixel_feature(tex_feat_map, cam, pts)
    rgb, _ = tex_heads.body_texture_head.forward(
        np.concatenate([g2s, g2t, z], axis=1))
    return rgb


# ------------------------------------------------------------------ training

def _routed_assemble(n, facem, face_vals, body_vals, width):
    out = np.zeros((n, width), np.float32)
    if facem.any():
        out[facem] = face_vals
    if (~facem).any():
        out[~facem] = body_vals
    return out


def _shape_step(heads, opt, sample, volume_resolution):
    """One optimizer step on one subject-view: joint MSE over the face-routed
    (jointly-aligned) and body-routed (pixel-aligned) points. The image
    encoder is shared and receives gradients from both branches."""
    use3d = heads.fusion_mode != "2d-only"
    fmap, img_caches = encode_image(heads.image_encoder, sample.image,
                                    sample.mask, want_cache=True)
    if use3d:
        fvol, vc = encode_points(heads.prior_encoder, sample.prior_vertices,
                                 sample.volume_bounds,
                                 resolution=volume_resolution, want_cache=True)
    pts = sample.points
    occ = np.asarray(sample.occupancy, np.float32)
    facem = np.asarray(sample.face, bool)
    n = len(pts)
    uvz = project(sample.cam, pts)
    uv = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fmap.data.shape)
    z = uvz[:, 2:3].astype(np.float32)
    g2 = sample_bilinear(fmap, uv)
    if use3d:
        g3 = sample_trilinear(fvol, pts)
        x01 = normalize_points(pts, sample.volume_bounds)[0] \
            .astype(np.float32)
    else:
        g3 = np.zeros((n, heads.channels_3d), np.float32)
        x01 = np.zeros((n, 3), np.float32)

    pred = np.zeros(n, np.float32)
    fuse_cache = body_cache = tcache = None
    if facem.any():
        xf, tcache = _face_fuse_input(heads, g2[facem], g3[facem],
                                      x01[facem], z[facem])
        yf, fuse_cache = heads.fuse.forward(xf)
        pred[facem] = yf[:, 0]
    if (~facem).any():
        xb = np.concatenate([g2[~facem], z[~facem]], axis=1)
        yb, body_cache = heads.body_head.forward(xb)
        pred[~facem] = yb[:, 0]
    loss = float(np.mean((pred - occ) ** 2))
    if not np.isfinite(loss):
        raise HeadError("non-finite shape training loss")

    dpred = (2.0 / n) * (pred - occ)
    dg2 = np.zeros_like(g2)
    dg3 = np.zeros_like(g3)
    updates = []
    c2d, c3d = heads.channels_2d, heads.channels_3d
    if fuse_cache is not None:
        gfuse, dxf = heads.fuse.backward(fuse_cache, dpred[facem, None])
        updates += list(zip(heads.fuse.networks(), gfuse))
        mode = heads.fusion_mode
        if mode == "2d-only":
            dg2[facem] = dxf[:, :c2d]
        elif mode == "3d-only":
            dg3[facem] = dxf[:, :c3d]
        elif mode == "concat":
            dg2[facem] = dxf[:, :c2d]
            dg3[facem] = dxf[:, c2d:c2d + c3d]
        else:
            w = heads.transform_width
            g_t2, dg2f = heads.transform_2d.backward(tcache[0], dxf[:, :w])
            g_t3, dg3f = heads.transform_3d.backward(tcache[1], dxf[:, w:2 * w])
            dg2[facem] = dg2f
            dg3[facem] = dg3f[:, :c3d]  # position dims carry no parameters
            updates += [(heads.transform_2d, g_t2), (heads.transform_3d, g_t3)]
    if body_cache is not None:
        gbody, dxb = heads.body_head.backward(body_cache, dpred[~facem, None])
        updates += list(zip(heads.body_head.networks(), gbody))
        dg2[~facem] += dxb[:, :c2d]

    dfmap = sample_bilinear_grad(fmap.data.shape, uv, dg2)
    g_img, _ = heads.image_encoder.backward(img_caches, dfmap)
    updates.append((heads.image_encoder, g_img))
    if use3d:
        dvol = sample_trilinear_grad(fvol, pts, dg3)
        g_sm, draw = heads.prior_encoder.smoother.backward(
            vc["smooth_caches"], dvol)
        dfeats = scatter_average_grad(vc["points01"], volume_resolution, draw)
        g_pt, _ = heads.prior_encoder.point_net.backward(
            vc["point_caches"], dfeats)
        updates += [(heads.prior_encoder.smoother, g_sm),
                    (heads.prior_encoder.point_net, g_pt)]
    opt.step_many(updates)
    return loss


def train_shape(heads, samples, epochs, lr, volume_resolution=32):
    """Staged training, shape stage. Returns the per-epoch mean MSE curve."""
    samples = list(samples)
    if not samples:
        raise HeadError("empty training set")
    opt = nn.RMSprop(lr)
    history = []
    for epoch in range(epochs):
        if epochs >= 3 and epoch == epochs - epochs // 3:
            opt.lr = lr * 0.2   # settle into the minimum for the final third
        losses = [_shape_step(heads, opt, s, volume_resolution)
                  for s in samples]
        history.append(float(np.mean(losses)))
    return history


def _coarse_texture_step(shape_heads, tex_heads, opt, sample):
    fmap_s = encode_image(shape_heads.image_encoder, sample.image, sample.mask)
    fmap_t, t_caches = encode_image(tex_heads.image_encoder_coarse,
                                    sample.image, sample.mask, want_cache=True)
    pts = sample.points
    cols = np.asarray(sample.colors, np.float32)
    facem = np.asarray(sample.face, bool)
    n = len(pts)
    uvz = project(sample.cam, pts)
    uv_s = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fmap_s.data.shape)
    uv_t = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fmap_t.data.shape)
    z = uvz[:, 2:3].astype(np.float32)
    g2s = sample_bilinear(fmap_s, uv_s)
    g2t = sample_bilinear(fmap_t, uv_t)
    x = np.concatenate([g2s, g2t, z], axis=1)

    pred = np.zeros((n, 3), np.float32)
    head_cache = body_cache = None
    if facem.any():
        yf, head_cache = tex_heads.coarse_head.forward(x[facem])
        pred[facem] = yf
    if (~facem).any():
        yb, body_cache = tex_heads.body_texture_head.forward(x[~facem])
        pred[~facem] = yb
    loss = float(np.mean(np.abs(pred - cols)))
    if not np.isfinite(loss):
        raise HeadError("non-finite texture training loss")

    dpred = np.sign(pred - cols).astype(np.float32) / (3 * n)
    dx = np.zeros_like(x)
    updates = []
    if head_cache is not None:
        g_head, dxf = tex_heads.coarse_head.backward(head_cache, dpred[facem])
        dx[facem] = dxf
        updates.append((tex_heads.coarse_head, g_head))
    if body_cache is not None:
        g_body, dxb = tex_heads.body_texture_head.backward(body_cache,
                                                           dpred[~facem])
        dx[~facem] = dxb
        updates += list(zip(tex_heads.body_texture_head.networks(), g_body))
    c_s = fmap_s.channels
    dg2t = dx[:, c_s:c_s + fmap_t.channels]
    dfmap_t = sample_bilinear_grad(fmap_t.data.shape, uv_t, dg2t)
    g_enc, _ = tex_heads.image_encoder_coarse.backward(t_caches, dfmap_t)
    updates.append((tex_heads.image_encoder_coarse, g_enc))
    opt.step_many(updates)
    return loss


def texture_prior_volume(shape_heads, tex_heads, vertices, bounds, colors,
                         resolution, want_cache=False):
    """Space-aligned prior volume for the texture fine branch, per prior
    style. Returns (volume, texture-part volume, texture-part cache) when a
    cache is requested; only the texture part receives gradients (the
    geometry volume belongs to the frozen shape stage)."""
    res = encode_points(tex_heads.prior_encoder, vertices, bounds,
                        colors=colors, resolution=resolution,
                        want_cache=want_cache)
    tvol, cache = res if want_cache else (res, None)
    parts = [tvol.data]
    if tex_heads.prior_style == "dual":
        gvol = encode_points(shape_heads.prior_encoder, vertices, bounds,
                             resolution=resolution)
        parts.insert(0, gvol.data)
    # raw diffused albedo last: a parameter-free shortcut to the prior color
    parts.append(splat_color_volume(vertices, colors, bounds, resolution))
    vol = FeatureVolume3D(np.concatenate(parts, axis=-1), bounds)
    if want_cache:
        return vol, tvol, cache
    return vol


def _fine_texture_step(shape_heads, tex_heads, opt, sample, volume_resolution):
    mode = tex_heads.texture_mode
    use3d = mode in ("fine3d", "coarse2fine3d")
    masked = np.asarray(sample.image, np.float32) \
        * np.asarray(sample.mask, np.float32)[:, :, None]
    fmap_s = encode_image(shape_heads.image_encoder, sample.image, sample.mask)
    fmap_t = encode_image(tex_heads.image_encoder_coarse, sample.image,
                          sample.mask)
    fine_out, fine_caches = tex_heads.image_encoder_fine.forward(masked)
    fine_map = FeatureMap2D(fine_out)
    if use3d:
        vol3, tvol, vc = texture_prior_volume(
            shape_heads, tex_heads, sample.prior_vertices,
            sample.volume_bounds, sample.prior_colors, volume_resolution,
            want_cache=True)
    pts = sample.points
    cols = np.asarray(sample.colors, np.float32)
    facem = np.asarray(sample.face, bool)
    n = len(pts)
    uvz = project(sample.cam, pts)
    z = uvz[:, 2:3].astype(np.float32)
    uv_s = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fmap_s.data.shape)
    uv_t = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fmap_t.data.shape)
    uv_f = image_to_map_uv(uvz[:, :2], sample.cam.image_size, fine_map.data.shape)
    g2s = sample_bilinear(fmap_s, uv_s)
    g2t = sample_bilinear(fmap_t, uv_t)
    x_body = np.concatenate([g2s, g2t, z], axis=1)

    pred = np.zeros((n, 3), np.float32)
    caches = {}
    if facem.any():
        gf = sample_bilinear(fine_map, uv_f[facem])
        if mode == "coarse2fine3d":
            _, omega = predict_color_coarse(tex_heads, fmap_s, fmap_t,
                                            sample.cam, pts[facem])
            x2 = np.concatenate([gf, omega], axis=1)
        else:
            x2 = np.concatenate([gf, z[facem]], axis=1)
        t2, c_t2 = tex_heads.fine_transform_2d.forward(x2)
        if use3d:
            g3 = sample_trilinear(vol3, pts[facem])
            t3, c_t3 = tex_heads.fine_transform_3d.forward(g3)
            xr = np.concatenate([t2, t3], axis=1)
        else:
            xr = t2
        yf, c_fuse = tex_heads.fine_fuse.forward(xr)
        pred[facem] = yf
        caches = {"c_t2": c_t2, "c_fuse": c_fuse,
                  "c_t3": c_t3 if use3d else None}
    body_cache = None
    if (~facem).any():
        yb, body_cache = tex_heads.body_texture_head.forward(x_body[~facem])
        pred[~facem] = yb
    loss = float(np.mean(np.abs(pred - cols)))
    if not np.isfinite(loss):
        raise HeadError("non-finite texture training loss")

    dpred = np.sign(pred - cols).astype(np.float32) / (3 * n)
    updates = []
    dfine = np.zeros(fine_map.data.shape, np.float32)
    if facem.any():
        g_fuse, dxr = tex_heads.fine_fuse.backward(caches["c_fuse"],
                                                   dpred[facem])
        updates += list(zip(tex_heads.fine_fuse.networks(), g_fuse))
        w = tex_heads.transform_width
        dt2 = dxr[:, :w] if use3d else dxr
        g_t2, dx2 = tex_heads.fine_transform_2d.backward(caches["c_t2"], dt2)
        updates.append((tex_heads.fine_transform_2d, g_t2))
        cf = fine_map.channels
        dfine += sample_bilinear_grad(fine_map.data.shape, uv_f[facem],
                                      dx2[:, :cf])
        if use3d:
            g_t3, dg3 = tex_heads.fine_transform_3d.backward(caches["c_t3"],
                                                             dxr[:, w:])
            updates.append((tex_heads.fine_transform_3d, g_t3))
            if tex_heads.prior_style == "dual":
                dg3 = dg3[:, tex_heads.shape_channels_3d:]
            # albedo/coverage channels carry no parameters
            dg3 = dg3[:, :tex_heads.channels_3d]
            dvol = sample_trilinear_grad(tvol, pts[facem], dg3)
            g_sm, draw = tex_heads.prior_encoder.smoother.backward(
                vc["smooth_caches"], dvol)
            dfeats = scatter_average_grad(vc["points01"], volume_resolution,
                                          draw)
            g_pt, _ = tex_heads.prior_encoder.point_net.backward(
                vc["point_caches"], dfeats)
            updates += [(tex_heads.prior_encoder.smoother, g_sm),
                        (tex_heads.prior_encoder.point_net, g_pt)]
    if body_cache is not None:
        g_body, _ = tex_heads.body_texture_head.backward(body_cache,
                                                         dpred[~facem])
        updates += list(zip(tex_heads.body_texture_head.networks(), g_body))
    g_enc, _ = tex_heads.image_encoder_fine.backward(fine_caches, dfine)
    updates.append((tex_heads.image_encoder_fine, g_enc))
    opt.step_many(updates)
    return loss


def train_texture(shape_heads, tex_heads, samples, stage, epochs, lr,
                  volume_resolution=32):
    """Staged training, texture stages. The shape heads are read-only here.

    Stage "coarse" trains the coarse image encoder, the coarse head, and the
    body texture head. Stage "fine" requires the coarse stage, freezes it, and
    trains the fine-branch networks (the body texture head keeps training, as
    it is outside the coarse branch). Returns the per-epoch mean L1 curve.
    """
    samples = list(samples)
    if not samples:
        raise HeadError("empty training set")
    if stage not in ("coarse", "fine"):
        raise HeadError(f"unknown texture stage {stage!r}")
    if stage == "fine" and not tex_heads.coarse_trained:
        raise HeadError("fine texture stage requires the coarse stage first")
    if stage == "fine" and tex_heads.texture_mode == "coarse":
        raise HeadError("texture mode 'coarse' has no fine branch")
    opt = nn.RMSprop(lr)
    history = []
    for epoch in range(epochs):
        if epochs >= 3 and epoch == epochs - epochs // 3:
            opt.lr = lr * 0.2   # settle into the minimum for the final third
        if stage == "coarse":
            losses = [_coarse_texture_step(shape_heads, tex_heads, opt, s)
                      for s in samples]
        else:
            losses = [_fine_texture_step(shape_heads, tex_heads, opt, s,
                                         volume_resolution) for s in samples]
        history.append(float(np.mean(losses)))
    if stage == "coarse":
        tex_heads.coarse_trained = True
    else:
        tex_heads.fine_trained = True
    return history


# ------------------------------------------------------- routed predictors

def make_occupancy_predictor(heads, feat_map, feat_volume, cam, face_region):
    """Closure mapping world points to routed occupancy values in [0, 1]."""
    def predict(points):
        pts = np.atleast_2d(np.asarray(points, np.float64))
        facem = route(face_region, cam, pts)
        out = np.zeros(len(pts), np.float32)
        if facem.any():
            out[facem] = predict_occupancy_face(heads, feat_map, feat_volume,
                                                cam, pts[facem])
        if (~facem).any():
            out[~facem] = predict_occupancy_body(heads, feat_map, cam,
                                                 pts[~facem])
        return out
    return predict


def make_color_predictor(tex_heads, shape_feat_map, tex_feat_map,
                         fine_feat_map, tex_volume, cam, face_region):
    """Closure mapping world points to routed rgb predictions in [0, 1]^3."""
    def predict(points):
        pts = np.atleast_2d(np.asarray(points, np.float64))
        facem = route(face_region, cam, pts)
        out = np.zeros((len(pts), 3), np.float32)
        if facem.any():
            rgb, omega = predict_color_coarse(tex_heads, shape_feat_map,
                                              tex_feat_map, cam, pts[facem])
            if tex_heads.texture_mode != "coarse":
                rgb = predict_color_fine(tex_heads, fine_feat_map, tex_volume,
                                         omega, cam, pts[facem])
            out[facem] = rgb
        if (~facem).any():
            out[~facem] = predict_color_body(tex_heads, shape_feat_map,
                                             tex_feat_map, cam, pts[~facem])
        return out
    return predict
