"""Triangle meshes, inside/outside occupancy via generalized winding numbers,
and the training-point sampling strategies."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray              # (n, 3) float32
    triangles: np.ndarray             # (m, 3) int
    colors: Optional[np.ndarray] = None    # (n, 3) in [0, 1]
    normals: Optional[np.ndarray] = None   # (n, 3) unit

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, np.float32).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, np.float32).reshape(-1, 3)

    def bbox(self):
        return np.stack([self.vertices.min(0), self.vertices.max(0)])

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.triangles.copy(),
                            None if self.colors is None else self.colors.copy(),
                            None if self.normals is None else self.normals.copy())


@dataclass
class SampleBatch:
    """Query points with exactly one of occupancy/color labels plus region tags."""
    points: np.ndarray                      # (P, 3)
    occupancy: Optional[np.ndarray] = None  # (P,) in {0, 1}
    colors: Optional[np.ndarray] = None     # (P, 3) in [0, 1]
    region: np.ndarray = field(default=None)  # (P,) bool, True = face

    def __post_init__(self):
        if (self.occupancy is None) == (self.colors is None):
            raise GeometryError("exactly one of occupancy/color labels required")


def face_areas(mesh):
    t = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


def vertex_normals(mesh):
    """Area-weighted average of incident face normals, unit length."""
    t = mesh.vertices[mesh.triangles]
    fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])  # length = 2*area
    acc = np.zeros_like(mesh.vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    degenerate = norms < 1e-20
    if np.any(degenerate):
        # zero-area umbrella: fall back to any incident face normal
        fnu = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-30)
        first_face = np.zeros(len(mesh.vertices), np.int64)
        seen = np.zeros(len(mesh.vertices), bool)
        for fi, tri in enumerate(mesh.triangles):
            for v in tri:
                if not seen[v]:
                    seen[v] = True
                    first_face[v] = fi
        acc[degenerate] = fnu[first_face[degenerate]]
        norms = np.linalg.norm(acc, axis=1)
    return (acc / norms[:, None]).astype(np.float32)


def winding_number(mesh, points, chunk=256):
    """Generalized winding number at each query point (solid-angle sum / 4pi)."""
    points = np.asarray(points, np.float64).reshape(-1, 3)
    tris = mesh.vertices[mesh.triangles].astype(np.float64)  # (m, 3, 3)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        a = tris[None, :, 0] - p[:, None]
        b = tris[None, :, 1] - p[:, None]
        c = tris[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = np.einsum('pmi,pmi->pm', a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum('pmi,pmi->pm', a, b) * lc
                 + np.einsum('pmi,pmi->pm', b, c) * la
                 + np.einsum('pmi,pmi->pm', c, a) * lb)
        out[s:s + chunk] = np.arctan2(det, denom).sum(axis=1) / (2.0 * np.pi)
    return out


def check_watertight(mesh):
    """Every edge shared by exactly two triangles with consistent orientation."""
    edges = {}
    for a, b, c in mesh.triangles:
        for p, q in ((a, b), (b, c), (c, a)):
            key = (min(p, q), max(p, q))
            edges.setdefault(key, []).append(p < q)
    for uses in edges.values():
        if len(uses) != 2 or uses[0] == uses[1]:
            return False
    return True


def occupancy(mesh, points, assume_watertight=True):
    """1 where the winding number exceeds 0.5, else 0."""
    if not assume_watertight and not check_watertight(mesh):
        raise GeometryError("occupancy requires a watertight mesh")
    return (winding_number(mesh, points) > 0.5).astype(np.float32)


def sample_surface(mesh, n, rng):
    """Area-weighted uniform surface samples; returns points and their normals."""
    areas = face_areas(mesh)
    probs = areas / areas.sum()
    idx = rng.choice(len(probs), size=n, p=probs)
    t = mesh.vertices[mesh.triangles[idx]].astype(np.float64)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0, w1, w2 = 1 - r1, r1 * (1 - r2), r1 * r2
    pts = w0[:, None] * t[:, 0] + w1[:, None] * t[:, 1] + w2[:, None] * t[:, 2]
    fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-30)
    return pts, fn


def sample_shape_points(mesh, face_aabb, seed, n_body=5000, n_face=700,
                        sigma_frac=0.05, occupancy_fn=None):
    """Query points with occupancy labels, PIFu-style.

    Body: 15/16 surface samples with isotropic Gaussian jitter (sigma = 5% of
    the bbox diagonal) plus 1/16 uniform in the mesh bbox. Face: uniform in
    `face_aabb`. Region tag is face-AABB membership. Labels come from the
    winding number of `mesh` unless an exact `occupancy_fn` is supplied (the
    synthetic generator knows its implicit surfaces analytically).
    """
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bbox()
    diag = mesh.bbox_diagonal()
    n_uniform = n_body // 16
    n_surface = n_body - n_uniform
    surf, _ = sample_surface(mesh, n_surface, rng)
    surf = surf + rng.normal(0, sigma_frac * diag, surf.shape).astype(np.float32)
    box = rng.uniform(lo, hi, (n_uniform, 3)).astype(np.float32)
    flo, fhi = np.asarray(face_aabb, np.float32)
    face = rng.uniform(flo, fhi, (n_face, 3)).astype(np.float32)
    pts = np.concatenate([surf, box, face]).astype(np.float32)
    occ = occupancy(mesh, pts) if occupancy_fn is None \
        else np.asarray(occupancy_fn(pts), np.float32)
    region = np.all((pts >= flo) & (pts <= fhi), axis=1)
    return SampleBatch(points=pts, occupancy=occ, region=region)


def perturb_along_normal(points, normals, d, seed):
    """X' = X + eps * N with eps ~ N(0, d), deterministic in seed."""
    points = np.asarray(points)
    rng = np.random.default_rng(seed)
    if d == 0:
        return points.copy()
    eps = rng.normal(0, d, len(points)).astype(points.dtype)
    return points + eps[:, None] * np.asarray(normals, points.dtype)


# ---------------------------------------------------------------------------
# mesh I/O

def save_obj(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts, np.float32), np.array(faces, np.int64))


def save_ply(path, mesh):
    """ASCII PLY with per-vertex uchar RGB when colors are present."""
    has_color = mesh.colors is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if has_color:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {len(mesh.triangles)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        if has_color:
            rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(int)
            for v, c in zip(mesh.vertices, rgb):
                f.write(f"{v[0]:.7g} {v[1]:.7g} {v[2]:.7g} {c[0]} {c[1]} {c[2]}\n")
        else:
            for v in mesh.vertices:
                f.write(f"{v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_ply(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if lines[0] != "ply":
        raise GeometryError("not a PLY file")
    n_vert = n_face = 0
    has_color = False
    i = 0
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:3] == ["property", "uchar", "red"]:
            has_color = True
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(x) for x in l.split()[:3]] for l in body[:n_vert]],
                     np.float32)
    colors = None
    if has_color:
        colors = np.array([[int(x) for x in l.split()[3:6]] for l in body[:n_vert]],
                          np.float32) / 255.0
    faces = np.array([[int(x) for x in l.split()[1:4]]
                      for l in body[n_vert:n_vert + n_face]], np.int64)
    return TriangleMesh(verts, faces, colors=colors)


# ---------------------------------------------------------------------------
# primitive meshes (test fixtures and synthetic bodies build on these)

def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere from a subdivided icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.array(verts[a]) + np.array(verts[b])
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts, np.float32) * radius + np.asarray(center, np.float32)
    return TriangleMesh(v, np.array(faces, np.int64))
