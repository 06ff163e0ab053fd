"""Rigid/similarity registration: nearest-neighbour search, closed-form
correspondence alignment (Umeyama), and trimmed ICP."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class AlignmentError(ValueError):
    pass


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points):
        points = np.asarray(points, np.float64)
        return (self.scale * points @ self.rotation.T + self.translation)

    def compose(self, other):
        """Transform equivalent to applying `other` first, then self."""
        r = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return RigidTransform(r, t, self.scale * other.scale)

    def inverse(self):
        r = self.rotation.T
        s = 1.0 / self.scale
        return RigidTransform(r, -s * r @ self.translation, s)


class SpatialIndex:
    """KD-tree over a fixed point set; ties resolve to the lowest point index.

    Backed by scipy's cKDTree; tie-breaking is enforced by re-scanning all
    points within the returned radius, which also keeps results identical to a
    brute-force scan in the presence of floating-point ties.
    """

    def __init__(self, points):
        points = np.asarray(points, np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise AlignmentError("empty point set")
        self.points = points
        self.tree = cKDTree(points)

    def nearest(self, queries):
        queries = np.asarray(queries, np.float64).reshape(-1, 3)
        dist, idx = self.tree.query(queries)
        ball = self.tree.query_ball_point(queries, dist * (1 + 1e-12) + 1e-300)
        for i, cand in enumerate(ball):
            if len(cand) > 1:
                cand = sorted(cand)
                d = np.linalg.norm(self.points[cand] - queries[i], axis=1)
                # pick the lowest index among exact minima
                dmin = d.min()
                for j, dj in zip(cand, d):
                    if dj == dmin:
                        idx[i] = j
                        dist[i] = dj
                        break
        return idx, dist


def umeyama(src, dst, with_scale=False):
    """Least-squares similarity transform mapping src onto dst.

    Reflections are corrected so the returned rotation is always proper.
    """
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    if len(src) < 3 or src.shape != dst.shape:
        raise AlignmentError("need at least 3 paired points")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise AlignmentError("non-finite coordinates")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    if np.linalg.matrix_rank(cov) < 2:
        raise AlignmentError("degenerate point configuration")
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        scale = float((s * d).sum() / var_s)
    else:
        scale = 1.0
    trans = mu_d - scale * rot @ mu_s
    return RigidTransform(rot, trans, scale)


def icp(source, target, max_iters=60, tol=1e-6, trim_factor=3.0,
        initial=None):
    """Trimmed point-to-point ICP with scale fixed at 1.

    Alternates nearest-correspondence lookup and closed-form alignment;
    correspondences beyond `trim_factor` times the median distance are dropped
    each iteration to survive partial overlap. Returns (transform,
    rms_residual, iterations); the residual sequence is non-increasing.
    """
    source = np.asarray(source, np.float64).reshape(-1, 3)
    target = np.asarray(target, np.float64).reshape(-1, 3)
    if len(source) == 0 or len(target) == 0:
        raise AlignmentError("empty point set")
    if not (np.all(np.isfinite(source)) and np.all(np.isfinite(target))):
        raise AlignmentError("non-finite coordinates")
    index = SpatialIndex(target)
    transform = initial if initial is not None else RigidTransform()
    diag = np.linalg.norm(target.max(0) - target.min(0))
    prev_rms = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        moved = transform.apply(source)
        idx, dist = index.nearest(moved)
        keep = dist <= trim_factor * max(np.median(dist), 1e-30)
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        if rms > prev_rms:
            break  # keep the previous (better) transform
        candidate = umeyama(source[keep], target[idx[keep]], with_scale=False)
        if prev_rms - rms < tol * diag:
            transform = candidate
            prev_rms = rms
            break
        transform = candidate
        prev_rms = rms
    return transform, prev_rms, iterations


def rotation_from_axis_angle(axis_angle):
    """Rodrigues formula; the vector's norm is the rotation angle."""
    axis_angle = np.asarray(axis_angle, np.float64)
    angle = np.linalg.norm(axis_angle)
    if angle < 1e-12:
        return np.eye(3)
    k = axis_angle / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def rotation_angle(rot):
    """Angle in radians of a proper rotation matrix."""
    c = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
