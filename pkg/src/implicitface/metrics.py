"""Reconstruction metrics: point-to-surface distance, Chamfer distance,
face-region surface distance, and normalized per-vertex color error.

All surface distances are exact point-to-triangle distances; a KD-tree over
triangle centroids prunes the candidate set without changing the result.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import sample_surface


class MetricError(ValueError):
    pass


def _closest_on_triangles(points, tris):
    """Exact closest point on each (point, triangle) pair.

    Returns squared distances, closest points, and barycentric coordinates.
    Standard region-classification algorithm, vectorized over pairs.
    """
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac, ap = b - a, c - a, points - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    uvw = np.zeros((len(points), 3))
    closest = np.zeros_like(points)
    done = np.zeros(len(points), bool)

    def settle(mask, pts, bary):
        todo = mask & ~done
        closest[todo] = pts[todo]
        uvw[todo] = bary if bary.ndim == 1 else bary[todo]
        done[todo] = True

    settle((d1 <= 0) & (d2 <= 0), a, np.array([1.0, 0.0, 0.0]))
    settle((d3 >= 0) & (d4 <= d3), b, np.array([0.0, 1.0, 0.0]))
    settle((d6 >= 0) & (d5 <= d6), c, np.array([0.0, 0.0, 1.0]))

    vc = d1 * d4 - d3 * d2
    v_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1),
                     where=np.abs(d1 - d3) > 1e-30)
    bary_ab = np.stack([1 - v_ab, v_ab, np.zeros_like(v_ab)], 1)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab, bary_ab)

    vb = d5 * d2 - d1 * d6
    w_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2),
                     where=np.abs(d2 - d6) > 1e-30)
    bary_ac = np.stack([1 - w_ac, np.zeros_like(w_ac), w_ac], 1)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac, bary_ac)

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = np.divide(d4 - d3, denom_bc, out=np.zeros_like(d4),
                     where=np.abs(denom_bc) > 1e-30)
    bary_bc = np.stack([np.zeros_like(w_bc), 1 - w_bc, w_bc], 1)
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + w_bc[:, None] * (c - b), bary_bc)

    denom = va + vb + vc
    v = np.divide(vb, denom, out=np.zeros_like(vb),
                  where=np.abs(denom) > 1e-30)
    w = np.divide(vc, denom, out=np.zeros_like(vc),
                  where=np.abs(denom) > 1e-30)
    bary_in = np.stack([1 - v - w, v, w], 1)
    settle(np.ones(len(points), bool), a + v[:, None] * ab + w[:, None] * ac,
           bary_in)

    diff = points - closest
    return np.einsum("ij,ij->i", diff, diff), closest, uvw


class SurfaceDistance:
    """Exact nearest-surface queries against one triangle mesh."""

    def __init__(self, mesh):
        if len(mesh.triangles) == 0:
            raise MetricError("empty mesh")
        self.mesh = mesh
        self.tris = np.asarray(mesh.vertices, np.float64)[mesh.triangles]
        self.centroids = self.tris.mean(axis=1)
        self.radius = np.linalg.norm(self.tris - self.centroids[:, None],
                                     axis=2).max(axis=1)
        self.rmax = float(self.radius.max())
        self.tree = cKDTree(self.centroids)

    def query(self, points):
        """Returns (distance, triangle index, barycentric) per query point."""
        points = np.asarray(points, np.float64)
        d_c, near = self.tree.query(points)
        # distance to the nearest-centroid triangle bounds the true distance
        d0, _, _ = _closest_on_triangles(points, self.tris[near])
        upper = np.sqrt(d0)
        dists = np.empty(len(points))
        tri_idx = np.empty(len(points), np.int64)
        bary = np.empty((len(points), 3))
        lists = self.tree.query_ball_point(points, upper + self.rmax + 1e-12)
        for i, cand in enumerate(lists):
            cand = np.asarray(cand, np.int64)
            d2, _, uvw = _closest_on_triangles(
                np.broadcast_to(points[i], (len(cand), 3)), self.tris[cand])
            j = int(np.argmin(d2))
            dists[i] = np.sqrt(d2[j])
            tri_idx[i] = cand[j]
            bary[i] = uvw[j]
        return dists, tri_idx, bary


def p2s(source, target, n_samples=4000, seed=0):
    """Mean exact point-to-surface distance from samples on `source` to the
    surface of `target` (unsquared Euclidean)."""
    if len(source.triangles) == 0 or len(target.triangles) == 0:
        raise MetricError("empty mesh")
    pts, _ = sample_surface(source, n_samples, np.random.default_rng(seed))
    dists, _, _ = SurfaceDistance(target).query(pts)
    return float(dists.mean())


def chamfer(a, b, n_samples=4000, seed=0):
    """Symmetrized mean surface distance with a shared per-direction budget."""
    return 0.5 * (p2s(a, b, n_samples, seed) + p2s(b, a, n_samples, seed))


def face_l2(recon, gt, face_bounds, n_samples=4000, seed=0):
    """Bidirectional mean nearest-surface distance restricted to sample
    points inside the face AABB."""
    lo, hi = np.asarray(face_bounds, np.float64).reshape(2, 3)

    def directed(src, dst):
        pts, _ = sample_surface(src, n_samples, np.random.default_rng(seed))
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        if not keep.any():
            return None
        d, _, _ = SurfaceDistance(dst).query(pts[keep])
        return d

    d_ab = directed(recon, gt)
    d_ba = directed(gt, recon)
    if d_ab is None and d_ba is None:
        raise MetricError("no samples fall inside the face region")
    parts = [d for d in (d_ab, d_ba) if d is not None]
    return float(np.concatenate(parts).mean())


def color_l1(recon, gt, region=None):
    """Mean per-channel L1 distance between each recon vertex color and the
    interpolated color of its nearest point on the gt surface, in [0, 1]."""
    if recon.colors is None or gt.colors is None:
        raise MetricError("both meshes need vertex colors")
    verts = np.asarray(recon.vertices, np.float64)
    keep = np.ones(len(verts), bool)
    if region is not None:
        lo, hi = np.asarray(region, np.float64).reshape(2, 3)
        keep = np.all((verts >= lo) & (verts <= hi), axis=1)
        if not keep.any():
            raise MetricError("no recon vertices inside the region")
    _, tri_idx, bary = SurfaceDistance(gt).query(verts[keep])
    gt_cols = np.asarray(gt.colors, np.float64)[gt.triangles[tri_idx]]
    matched = np.einsum("ik,ikj->ij", bary, gt_cols)
    diff = np.abs(np.asarray(recon.colors, np.float64)[keep] - matched)
    return float(diff.sum(axis=1).mean() / 3.0)


@dataclass
class EvalReport:
    """Per-subject metric values plus arithmetic-mean aggregates."""
    region: str = "head"
    seed: int = 0
    sample_count: int = 4000
    per_subject: dict = field(default_factory=dict)

    def add(self, subject, metric, value):
        self.per_subject.setdefault(subject, {})[metric] = float(value)

    def aggregate(self):
        metrics = {}
        for values in self.per_subject.values():
            for k, v in values.items():
                metrics.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in metrics.items()}

    def rows(self):
        for subject in sorted(self.per_subject):
            for metric in sorted(self.per_subject[subject]):
                yield subject, metric, self.per_subject[subject][metric]
