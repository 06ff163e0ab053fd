"""PCA face prior: linear synthesis, pose application, synthetic basis
generation, and landmark-based coefficient fitting."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .alignment import rotation_from_axis_angle, umeyama
from .geometry import TriangleMesh, icosphere


class MorphableError(ValueError):
    pass


# canonical landmark directions on the unit face cap (+z is "out of the face")
LANDMARK_DIRECTIONS = np.array([
    [0.00, 0.00, 1.00],    # nose tip
    [-0.35, 0.25, 0.90],   # left eye outer
    [-0.15, 0.25, 0.95],   # left eye inner
    [0.15, 0.25, 0.95],    # right eye inner
    [0.35, 0.25, 0.90],    # right eye outer
    [-0.28, -0.30, 0.90],  # left mouth corner
    [0.28, -0.30, 0.90],   # right mouth corner
    [0.00, -0.55, 0.82],   # chin
    [0.00, 0.45, 0.88],    # brow centre
])


@dataclass
class GaussianLobeField:
    """Smooth bump fields on the unit sphere; the continuous counterpart of the
    synthetic PCA columns, reused by the dataset generator's implicit surfaces."""
    centers: np.ndarray  # (k, 3) unit directions
    widths: np.ndarray   # (k,)
    norms: np.ndarray    # (k,) per-column normalisers fixed at basis build time

    def evaluate(self, dirs):
        """(len(dirs), k) lobe values scaled by the column normalisers."""
        dirs = np.asarray(dirs, np.float64)
        out = np.empty((len(dirs), len(self.widths)))
        for j, (c, w) in enumerate(zip(self.centers, self.widths)):
            d2 = ((dirs - c) ** 2).sum(axis=1)
            out[:, j] = np.exp(-d2 / (2.0 * w * w))
        return out / self.norms

    def combine(self, dirs, coeffs):
        return self.evaluate(dirs) @ np.asarray(coeffs, np.float64)


@dataclass
class MorphableBasis:
    mean_shape: np.ndarray      # (3n,)
    mean_texture: np.ndarray    # (3n,) in [0, 1]
    b_id: np.ndarray            # (3n, k_id), unit-norm columns
    b_exp: np.ndarray           # (3n, k_exp)
    b_tex: np.ndarray           # (3n, k_tex)
    triangles: np.ndarray       # template connectivity
    landmark_indices: np.ndarray
    # construction metadata: continuous fields behind the sampled columns
    shape_field: Optional["SyntheticFaceField"] = None

    @property
    def n_vertices(self):
        return len(self.mean_shape) // 3

    def validate(self):
        rows = len(self.mean_shape)
        for name in ("mean_texture",):
            if len(getattr(self, name)) != rows:
                raise MorphableError(f"{name} row count mismatch")
        for name in ("b_id", "b_exp", "b_tex"):
            if getattr(self, name).shape[0] != rows:
                raise MorphableError(f"{name} row count mismatch")
        if self.landmark_indices.max() >= self.n_vertices:
            raise MorphableError("landmark index out of range")


@dataclass
class MorphCoeffs:
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(27, np.float32))
    pose: np.ndarray = field(default_factory=lambda: np.zeros(6, np.float32))
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise MorphableError("scale must be positive")

    def copy(self):
        return MorphCoeffs(self.alpha.copy(), self.beta.copy(), self.delta.copy(),
                           self.gamma.copy(), self.pose.copy(), self.scale)


def synthesize(basis, coeffs):
    """Mean + basis-weighted offsets; colors clamped to [0, 1]."""
    if (len(coeffs.alpha) != basis.b_id.shape[1]
            or len(coeffs.beta) != basis.b_exp.shape[1]
            or len(coeffs.delta) != basis.b_tex.shape[1]):
        raise MorphableError("coefficient length does not match basis")
    pos = (basis.mean_shape
           + basis.b_id @ coeffs.alpha
           + basis.b_exp @ coeffs.beta)
    tex = np.clip(basis.mean_texture + basis.b_tex @ coeffs.delta, 0.0, 1.0)
    return TriangleMesh(pos.reshape(-1, 3), basis.triangles,
                        colors=tex.reshape(-1, 3))


def apply_pose(mesh, pose, scale):
    """v' = s * R(axis-angle) * v + t; connectivity and colors untouched."""
    if scale <= 0:
        raise MorphableError("scale must be positive")
    pose = np.asarray(pose, np.float64)
    rot = rotation_from_axis_angle(pose[:3])
    out = mesh.copy()
    out.vertices = (scale * mesh.vertices.astype(np.float64) @ rot.T
                    + pose[3:]).astype(np.float32)
    return out


@dataclass
class SyntheticFaceField:
    """Continuous radius/colour fields over unit directions on the face cap."""
    mean_bump_field: GaussianLobeField
    mean_bump_coeffs: np.ndarray
    id_field: GaussianLobeField
    exp_field: GaussianLobeField
    tex_field: GaussianLobeField
    tex_colors: np.ndarray       # (k_tex, 3) colour direction per texture column
    base_skin: np.ndarray        # rgb

    def radius(self, dirs, alpha, beta):
        """Radial multiplier of the face surface along unit directions."""
        r = 1.0 + self.mean_bump_field.combine(dirs, self.mean_bump_coeffs)
        r = r + self.id_field.combine(dirs, alpha)
        r = r + self.exp_field.combine(dirs, beta)
        return r

    def color(self, dirs, delta):
        t = self.tex_field.evaluate(dirs)  # (p, k_tex)
        rgb = self.base_skin + (t * np.asarray(delta)) @ self.tex_colors
        return np.clip(rgb, 0.0, 1.0)


def _cap_template(n_min, cap_cos=0.35):
    """Geodesic sphere patch around +z with at least n_min vertices."""
    for sub in range(2, 7):
        sphere = icosphere(sub)
        dirs = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1,
                                                keepdims=True)
        keep = dirs[:, 2] >= cap_cos
        if keep.sum() >= n_min:
            remap = -np.ones(len(dirs), np.int64)
            remap[keep] = np.arange(keep.sum())
            tris = sphere.triangles[np.all(keep[sphere.triangles], axis=1)]
            return dirs[keep], remap[tris]
    raise MorphableError(f"cannot build a template with {n_min} vertices")


def _seeded_lobes(rng, k, width_range, jitter=0.35):
    """Lobe centres clustered on the face cap, mimicking facial features."""
    anchors = LANDMARK_DIRECTIONS / np.linalg.norm(LANDMARK_DIRECTIONS, axis=1,
                                                   keepdims=True)
    centers = []
    for j in range(k):
        c = anchors[j % len(anchors)] + rng.normal(0, jitter, 3)
        centers.append(c / np.linalg.norm(c))
    widths = rng.uniform(*width_range, k)
    return np.array(centers), widths


def _normalized_field(rng, k, dirs, width_range):
    centers, widths = _seeded_lobes(rng, k, width_range)
    lobe = GaussianLobeField(centers, widths, np.ones(k))
    raw = lobe.evaluate(dirs)                     # lobe values at vertices
    lobe.norms = np.linalg.norm(raw, axis=0)      # radial column norm (|u| = 1)
    return lobe


def synth_basis(seed, n=256, k_id=16, k_exp=8, k_tex=8):
    """Deterministic synthetic PCA face basis on a geodesic sphere patch.

    Identity/expression columns are smooth radial bump fields, texture columns
    smooth colour fields; every column has unit Euclidean norm.
    """
    if n < 64 or min(k_id, k_exp, k_tex) < 1:
        raise MorphableError("need n >= 64 and all k >= 1")
    rng = np.random.default_rng(seed)
    dirs, tris = _cap_template(n)
    nv = len(dirs)

    # fixed mean-face structure (nose/brow/chin relief)
    mean_centers = LANDMARK_DIRECTIONS[[0, 7, 8]] \
        / np.linalg.norm(LANDMARK_DIRECTIONS[[0, 7, 8]], axis=1, keepdims=True)
    mean_field = GaussianLobeField(mean_centers, np.array([0.25, 0.3, 0.35]),
                                   np.ones(3))
    mean_coeffs = np.array([0.12, 0.05, 0.04])

    id_field = _normalized_field(rng, k_id, dirs, (0.2, 0.45))
    exp_field = _normalized_field(rng, k_exp, dirs, (0.12, 0.3))
    tex_field = _normalized_field(rng, k_tex, dirs, (0.2, 0.5))
    tex_colors = rng.uniform(-1, 1, (k_tex, 3))
    tex_colors /= np.linalg.norm(tex_colors, axis=1, keepdims=True)
    base_skin = np.array([0.85, 0.68, 0.58])

    field = SyntheticFaceField(mean_field, mean_coeffs, id_field, exp_field,
                               tex_field, tex_colors, base_skin)

    radius = field.radius(dirs, np.zeros(k_id), np.zeros(k_exp))
    mean_shape = (dirs * radius[:, None]).reshape(-1)
    mean_texture = np.tile(base_skin, nv)

    def radial_columns(lobe):
        vals = lobe.evaluate(dirs) * lobe.norms  # un-normalised lobe values
        cols = vals[:, None, :] * dirs[:, :, None]  # (nv, 3, k)
        cols = cols.reshape(3 * nv, -1)
        return cols / np.linalg.norm(cols, axis=0)

    b_id = radial_columns(id_field)
    b_exp = radial_columns(exp_field)

    tvals = tex_field.evaluate(dirs) * tex_field.norms
    b_tex = (tvals[:, None, :] * tex_colors.T[None, :, :]).reshape(3 * nv, -1)
    b_tex /= np.linalg.norm(b_tex, axis=0)

    lm_dirs = LANDMARK_DIRECTIONS / np.linalg.norm(LANDMARK_DIRECTIONS, axis=1,
                                                   keepdims=True)
    landmark_indices = np.array([int(np.argmax(dirs @ d)) for d in lm_dirs])

    basis = MorphableBasis(mean_shape.astype(np.float32),
                           mean_texture.astype(np.float32),
                           b_id.astype(np.float32), b_exp.astype(np.float32),
                           b_tex.astype(np.float32), tris, landmark_indices,
                           shape_field=field)
    basis.validate()
    return basis


def landmark_positions(basis, coeffs):
    """World-space landmark vertices for the given coefficients and pose."""
    mesh = synthesize(basis, coeffs)
    posed = apply_pose(mesh, coeffs.pose, coeffs.scale)
    return posed.vertices[basis.landmark_indices].astype(np.float64)


def fit_landmarks(basis, observed, reg=1e-5, rounds=800, tol=1e-12):
    """Recover (pose, scale, alpha, beta) from K observed 3D landmarks.

    Stage 1: closed-form similarity from template landmarks to observations.
    Stage 2: gradient-based minimisation of the mean squared landmark residual
    over (alpha, beta) with quadratic regularisation (conjugate-gradient steps,
    exact for this quadratic objective). The two stages alternate so the pose
    is re-estimated on the deformed landmarks; both stages minimise the same
    objective, so it never increases across iterations.
    """
    observed = np.asarray(observed, np.float64)
    if len(observed) < 4:
        raise MorphableError("need at least 4 landmarks")
    lm = basis.landmark_indices
    template = basis.mean_shape.reshape(-1, 3)[lm].astype(np.float64)
    rows = np.stack([3 * lm, 3 * lm + 1, 3 * lm + 2], axis=1).reshape(-1)
    bmat = np.hstack([basis.b_id, basis.b_exp])[rows].astype(np.float64)
    k_id = basis.b_id.shape[1]
    n_k = len(observed)
    coeffs = np.zeros(bmat.shape[1])
    rot, trans, s = np.eye(3), np.zeros(3), 1.0
    prev = np.inf
    for _ in range(rounds):
        shape = (template.reshape(-1) + bmat @ coeffs).reshape(-1, 3)
        sim = umeyama(shape, observed, with_scale=True)
        rot, trans, s = sim.rotation, sim.translation, sim.scale
        # residual in template frame: minimise (s^2/K)*|B c - y|^2 + reg*|c|^2
        y = (((observed - trans) / s) @ rot - template).reshape(-1)
        scale2 = 2.0 * s * s / (3 * n_k)

        def hessian_vec(v):
            return scale2 * (bmat.T @ (bmat @ v)) + 2 * reg * v

        grad = hessian_vec(coeffs) - scale2 * (bmat.T @ y)
        direction = -grad
        for _ in range(bmat.shape[1] + 2):  # CG: exact in <= dim steps
            hd = hessian_vec(direction)
            denom = direction @ hd
            if denom <= 0 or np.linalg.norm(grad) < 1e-14:
                break
            t = (grad @ grad) / denom
            coeffs = coeffs + t * direction
            new_grad = grad + t * hd
            direction = -new_grad + ((new_grad @ new_grad)
                                     / (grad @ grad)) * direction
            grad = new_grad
        res = s * (template + (bmat @ coeffs).reshape(-1, 3)) @ rot.T \
            + trans - observed
        loss = float(np.mean(res ** 2) * 3) + reg * (coeffs @ coeffs)
        if prev - loss < tol:
            break
        prev = loss

    axis_angle = _axis_angle_from_rotation(rot)
    pose = np.concatenate([axis_angle, trans])
    return MorphCoeffs(coeffs[:k_id].astype(np.float32),
                       coeffs[k_id:].astype(np.float32),
                       np.zeros(basis.b_tex.shape[1], np.float32),
                       pose=pose.astype(np.float32), scale=float(s))


def _axis_angle_from_rotation(rot):
    angle = np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1))
    if angle < 1e-10:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near-pi: extract axis from R + I
        m = rot + np.eye(3)
        axis = m[:, np.argmax(np.linalg.norm(m, axis=0))]
    else:
        axis = np.array([rot[2, 1] - rot[1, 2],
                         rot[0, 2] - rot[2, 0],
                         rot[1, 0] - rot[0, 1]])
    return axis / np.linalg.norm(axis) * angle
