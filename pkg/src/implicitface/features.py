"""Pixel-aligned and space-aligned feature carriers.

2D: a small strided convolution stack turns a masked image into a quarter-
resolution feature map sampled bilinearly at projected query points.
3D: a per-vertex network is scattered into a cubic voxel grid by average
pooling, smoothed by a 3D convolution stack, and sampled trilinearly.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nn


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMap2D:
    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise FeatureError("feature map must be (H, W, C)")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("non-finite feature map")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class FeatureVolume3D:
    data: np.ndarray          # (D, D, D, C)
    world_bounds: np.ndarray  # (2, 3) lo/hi

    def __post_init__(self):
        d = self.data.shape[0]
        if self.data.ndim != 4 or self.data.shape[:3] != (d, d, d):
            raise FeatureError("feature volume must be cubic (D, D, D, C)")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("non-finite feature volume")
        self.world_bounds = np.asarray(self.world_bounds, np.float64).reshape(2, 3)
        if not np.all(self.world_bounds[1] > self.world_bounds[0]):
            raise FeatureError("degenerate world bounds")

    @property
    def resolution(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[3]


@dataclass
class PointEncoder:
    """Per-vertex network plus a 3D smoothing stack sharing one channel width."""
    point_net: nn.Network
    smoother: nn.Network


@dataclass
class EncoderPair:
    """Geometry and texture encoders share architecture, never weights."""
    geometry: PointEncoder   # consumes normalized position
    texture: PointEncoder    # consumes normalized position + color


def make_image_encoder(rng, name, cin=3, channels=32):
    """Two stride-2 then two stride-1 convolution layers: output is H/4 x W/4."""
    return nn.Network(name, [
        nn.conv2d(rng, cin, channels, stride=2),
        nn.conv2d(rng, channels, channels, stride=2),
        nn.conv2d(rng, channels, channels),
        nn.conv2d(rng, channels, channels, activation="identity"),
    ])


def make_point_encoder(rng, name, in_dim, channels=32):
    point_net = nn.Network(name + "_pts", [
        nn.dense(rng, in_dim, channels),
        nn.dense(rng, channels, channels),
        nn.dense(rng, channels, channels, activation="identity"),
    ])
    smoother = nn.Network(name + "_smooth", [
        nn.conv3d(rng, channels, channels),
        nn.conv3d(rng, channels, channels, activation="identity"),
    ])
    return PointEncoder(point_net, smoother)


def make_encoder_pair(rng, channels=32):
    return EncoderPair(make_point_encoder(rng, "phi_g", 3, channels),
                       make_point_encoder(rng, "phi_t", 6, channels))


def encode_image(encoder, image, mask=None, want_cache=False):
    """Masked image -> FeatureMap2D at quarter resolution."""
    image = np.asarray(image, np.float32)
    if image.ndim != 3:
        raise FeatureError("image must be (H, W, C)")
    h, w = image.shape[:2]
    if h % 4 or w % 4:
        raise FeatureError(f"image size {w}x{h} not divisible by 4")
    if mask is not None:
        image = image * np.asarray(mask, np.float32)[:, :, None]
    out, caches = encoder.forward(image)
    fmap = FeatureMap2D(out)
    return (fmap, caches) if want_cache else fmap


def normalize_points(points, world_bounds):
    """World points -> [0, 1]^3 relative to the bounds, clamped; returns the
    normalized points and how many were clamped."""
    lo, hi = np.asarray(world_bounds, np.float64).reshape(2, 3)
    g = (np.asarray(points, np.float64) - lo) / (hi - lo)
    clamped = int(np.sum(np.any((g < 0) | (g > 1), axis=1)))
    return np.clip(g, 0.0, 1.0), clamped


def scatter_average(features, points01, resolution):
    """Average per-vertex features into a cubic voxel grid.

    Accumulation runs in float64 over a canonically sorted order (voxel id,
    then feature bytes), so the result is exactly invariant to input
    permutation. Empty voxels hold the zero feature.
    """
    feats = np.asarray(features, np.float64)
    idx = np.minimum((points01 * resolution).astype(np.int64), resolution - 1)
    voxel = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    order = np.lexsort(tuple(feats[:, c] for c in range(feats.shape[1] - 1, -1, -1))
                       + (voxel,))
    voxel, feats = voxel[order], feats[order]
    starts = np.flatnonzero(np.r_[True, voxel[1:] != voxel[:-1]])
    sums = np.add.reduceat(feats, starts, axis=0)
    counts = np.diff(np.r_[starts, len(voxel)])
    out = np.zeros((resolution ** 3, feats.shape[1]), np.float64)
    out[voxel[starts]] = sums / counts[:, None]
    return out.reshape(resolution, resolution, resolution, feats.shape[1]) \
        .astype(np.float32)


def scatter_average_grad(points01, resolution, dvol):
    """Backward of scatter_average: each vertex receives the gradient of its
    voxel divided by that voxel's occupant count."""
    idx = np.minimum((points01 * resolution).astype(np.int64), resolution - 1)
    voxel = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    counts = np.bincount(voxel, minlength=resolution ** 3)
    dflat = np.asarray(dvol, np.float64).reshape(resolution ** 3, -1)
    return (dflat[voxel] / counts[voxel, None]).astype(np.float32)


def splat_color_volume(vertices, colors, world_bounds, resolution, passes=2):
    """Parameter-free prior-albedo splat: per-voxel mean vertex color diffused
    by a normalized box filter, plus a coverage channel. Returns a
    (D, D, D, 4) array ready to concatenate onto a learned feature volume, so
    downstream MLPs can read the prior's local color directly instead of
    relearning the lookup through the point encoder."""
    points01, _ = normalize_points(vertices, world_bounds)
    mean = scatter_average(np.asarray(colors, np.float32), points01,
                           resolution)
    weight = scatter_average(np.ones((len(points01), 1), np.float32),
                             points01, resolution)
    num = (mean * weight).astype(np.float64)
    den = weight.astype(np.float64)
    for _ in range(passes):
        for c in range(num.shape[-1]):
            num[..., c] = ndimage.uniform_filter(num[..., c], size=3,
                                                 mode="constant")
        den[..., 0] = ndimage.uniform_filter(den[..., 0], size=3,
                                             mode="constant")
    albedo = num / np.maximum(den, 1e-12)
    return np.concatenate([albedo, den], axis=-1).astype(np.float32)


def encode_points(encoder, vertices, world_bounds, colors=None, resolution=64,
                  smooth=True, want_cache=False):
    """Vertices (optionally with colors) -> smoothed FeatureVolume3D."""
    vertices = np.asarray(vertices, np.float64)
    if len(vertices) == 0:
        raise FeatureError("empty vertex set")
    points01, _ = normalize_points(vertices, world_bounds)
    inputs = points01.astype(np.float32)
    if encoder.point_net.layers[0].weights.shape[0] == 6:
        if colors is None:
            raise FeatureError("this encoder expects per-vertex colors")
        inputs = np.hstack([inputs, np.asarray(colors, np.float32)])
    feats, pt_caches = encoder.point_net.forward(inputs)
    raw = scatter_average(feats, points01, resolution)
    if smooth:
        smoothed, sm_caches = encoder.smoother.forward(raw)
    else:
        smoothed, sm_caches = raw, None
    vol = FeatureVolume3D(smoothed, world_bounds)
    if want_cache:
        return vol, {"points01": points01, "point_caches": pt_caches,
                     "raw": raw, "smooth_caches": sm_caches}
    return vol


def _bilinear_weights(shape_hw, uv):
    h, w = shape_hw
    uv = np.asarray(uv, np.float64)
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu, fv = u - x0, v - y0
    corners = ((y0, x0, (1 - fu) * (1 - fv)), (y0, x1, fu * (1 - fv)),
               (y1, x0, (1 - fu) * fv), (y1, x1, fu * fv))
    return corners


def sample_bilinear(fmap, uv):
    """4-neighbor bilinear lookup; out-of-range queries are clamped."""
    data = fmap.data if isinstance(fmap, FeatureMap2D) else np.asarray(fmap)
    out = np.zeros((len(uv), data.shape[2]), np.float64)
    for ys, xs, wgt in _bilinear_weights(data.shape[:2], uv):
        out += wgt[:, None] * data[ys, xs]
    return out.astype(np.float32)


def sample_bilinear_grad(map_shape, uv, dout):
    """Scatter output gradients back onto the feature-map grid."""
    dmap = np.zeros(map_shape, np.float64)
    dout = np.asarray(dout, np.float64)
    for ys, xs, wgt in _bilinear_weights(map_shape[:2], uv):
        np.add.at(dmap, (ys, xs), wgt[:, None] * dout)
    return dmap.astype(np.float32)


def _trilinear_weights(volume, points):
    d = volume.resolution
    lo, hi = volume.world_bounds
    g = (np.asarray(points, np.float64) - lo) / (hi - lo) * (d - 1)
    g = np.clip(g, 0.0, d - 1.0)
    i0 = np.floor(g).astype(np.int64)
    i1 = np.minimum(i0 + 1, d - 1)
    f = g - i0
    corners = []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = i1[:, 0] if bx else i0[:, 0]
                iy = i1[:, 1] if by else i0[:, 1]
                iz = i1[:, 2] if bz else i0[:, 2]
                wgt = ((f[:, 0] if bx else 1 - f[:, 0])
                       * (f[:, 1] if by else 1 - f[:, 1])
                       * (f[:, 2] if bz else 1 - f[:, 2]))
                corners.append((ix, iy, iz, wgt))
    return corners


def sample_trilinear(volume, points):
    """8-neighbor trilinear lookup in world coordinates, clamped at bounds."""
    pts = np.atleast_2d(points)
    out = np.zeros((len(pts), volume.channels), np.float64)
    for ix, iy, iz, wgt in _trilinear_weights(volume, pts):
        out += wgt[:, None] * volume.data[ix, iy, iz]
    return out.astype(np.float32)


def sample_trilinear_grad(volume, points, dout):
    """Scatter output gradients back onto the voxel grid."""
    pts = np.atleast_2d(points)
    dvol = np.zeros(volume.data.shape, np.float64)
    dout = np.asarray(dout, np.float64)
    for ix, iy, iz, wgt in _trilinear_weights(volume, pts):
        np.add.at(dvol, (ix, iy, iz), wgt[:, None] * dout)
    return dvol.astype(np.float32)
