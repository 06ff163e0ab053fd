"""Orthographic camera and a z-buffer software rasterizer.

Produces the input images, masks, and per-pixel depth that feed the
pixel-aligned feature path, plus landmark depths for alignment.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import vertex_normals

BACKGROUND_DEPTH = 1.0  # sentinel in normalized depth


class RenderError(ValueError):
    pass


@dataclass
class Camera:
    view_rotation: np.ndarray        # (3, 3) orthonormal, world -> camera
    ortho_scale: float               # world units spanning the image height
    image_size: tuple                # (W, H)
    depth_range: tuple               # (z_near, z_far) in camera space

    def __post_init__(self):
        self.view_rotation = np.asarray(self.view_rotation, np.float64)
        rtr = self.view_rotation @ self.view_rotation.T
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise RenderError("view_rotation is not orthonormal")
        if not self.depth_range[0] < self.depth_range[1]:
            raise RenderError("depth_range must satisfy z_near < z_far")
        if self.ortho_scale <= 0:
            raise RenderError("ortho_scale must be positive")


@dataclass
class RasterOutput:
    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) in {0, 1}
    depth: np.ndarray   # (H, W) normalized, background = BACKGROUND_DEPTH


def project(cam, points):
    """World points -> (u, v, z): pixel coordinates plus depth in [-1, 1].

    Orthographic: u grows with camera x, v grows downward (image rows),
    and two points differing only along the view axis share (u, v).
    """
    pts = np.atleast_2d(np.asarray(points, np.float64))
    p = pts @ cam.view_rotation.T
    w, h = cam.image_size
    z_near, z_far = cam.depth_range
    u = (w - 1) * (0.5 + p[:, 0] / cam.ortho_scale)
    v = (h - 1) * (0.5 - p[:, 1] / cam.ortho_scale)
    z = 2.0 * (p[:, 2] - z_near) / (z_far - z_near) - 1.0
    out = np.stack([u, v, z], axis=1)
    return out[0] if np.ndim(points) == 1 else out


def camera_ring(n_views, ortho_scale, image_size, depth_range):
    """Cameras at evenly spaced yaw angles around the world y axis."""
    cams = []
    for k in range(n_views):
        yaw = 2 * np.pi * k / n_views
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        cams.append(Camera(rot, ortho_scale, image_size, depth_range))
    return cams


def rasterize(mesh, cam, light_direction=(0.0, 0.0, 1.0)):
    """Z-buffer rasterization with vertex-color interpolation and a fixed
    lambertian-plus-ambient shading term (0.3 + 0.7 * max(0, n.l))."""
    w, h = cam.image_size
    rgb = np.zeros((h, w, 3), np.float64)
    depth = np.full((h, w), BACKGROUND_DEPTH, np.float64)
    mask = np.zeros((h, w), np.uint8)
    if len(mesh.triangles) == 0:
        return RasterOutput(rgb.astype(np.float32), mask, depth.astype(np.float32))
    if mesh.colors is None:
        raise RenderError("rasterize requires per-vertex colors")

    light = np.asarray(light_direction, np.float64)
    light = light / np.linalg.norm(light)
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    # camera-space shading: light direction given in camera coordinates
    n_cam = np.asarray(normals, np.float64) @ cam.view_rotation.T
    shade = 0.3 + 0.7 * np.maximum(0.0, n_cam @ light)
    lit = np.clip(np.asarray(mesh.colors, np.float64) * shade[:, None], 0, 1)

    uvz = project(cam, mesh.vertices)
    tri_uvz = uvz[mesh.triangles]          # (m, 3, 3)
    tri_rgb = lit[mesh.triangles]          # (m, 3, 3)

    for tri, col in zip(tri_uvz, tri_rgb):
        _fill_triangle(rgb, depth, mask, tri, col)
    return RasterOutput(rgb.astype(np.float32), mask, depth.astype(np.float32))


def _fill_triangle(rgb, depth, mask, tri, col):
    h, w = depth.shape
    u, v, z = tri[:, 0], tri[:, 1], tri[:, 2]
    x0 = max(int(np.ceil(u.min())), 0)
    x1 = min(int(np.floor(u.max())), w - 1)
    y0 = max(int(np.ceil(v.min())), 0)
    y1 = min(int(np.floor(v.max())), h - 1)
    if x0 > x1 or y0 > y1:
        return
    # signed doubled area; skip edge-on triangles
    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if abs(area) < 1e-12:
        return
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    px, py = np.meshgrid(xs, ys)
    w0 = ((u[1] - px) * (v[2] - py) - (u[2] - px) * (v[1] - py)) / area
    w1 = ((u[2] - px) * (v[0] - py) - (u[0] - px) * (v[2] - py)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    pz = w0 * z[0] + w1 * z[1] + w2 * z[2]
    yy, xx = np.nonzero(inside)
    rows, cols = yy + y0, xx + x0
    zs = pz[yy, xx]
    closer = zs < depth[rows, cols]
    rows, cols, yy, xx = rows[closer], cols[closer], yy[closer], xx[closer]
    if len(rows) == 0:
        return
    depth[rows, cols] = zs[closer]
    pc = (w0[yy, xx, None] * col[0] + w1[yy, xx, None] * col[1]
          + w2[yy, xx, None] * col[2])
    rgb[rows, cols] = np.clip(pc, 0, 1)
    mask[rows, cols] = 1


def save_ppm(path, rgb):
    """Binary PPM (P6), 8-bit."""
    data = np.clip(np.asarray(rgb, np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens, idx = [], 0
    while len(tokens) < 4:
        end = raw.index(b"\n", idx)
        line = raw[idx:end]
        idx = end + 1
        if not line.startswith(b"#"):
            tokens.extend(line.split())
    if tokens[0] != b"P6":
        raise RenderError("not a binary PPM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[idx:idx + 3 * w * h], np.uint8)
    if len(data) != 3 * w * h:
        raise RenderError("truncated PPM payload")
    return data.reshape(h, w, 3).astype(np.float32) / maxval


def save_pgm(path, gray):
    """Binary PGM (P5), 8-bit; used for masks and quantized depth."""
    data = np.clip(np.asarray(gray, np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def load_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens, idx = [], 0
    while len(tokens) < 4:
        end = raw.index(b"\n", idx)
        line = raw[idx:end]
        idx = end + 1
        if not line.startswith(b"#"):
            tokens.extend(line.split())
    if tokens[0] != b"P5":
        raise RenderError("not a binary PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[idx:idx + w * h], np.uint8)
    if len(data) != w * h:
        raise RenderError("truncated PGM payload")
    return data.reshape(h, w).astype(np.float32) / maxval
