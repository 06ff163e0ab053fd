"""Seeded synthetic benchmark generator.

Each subject is the implicit union of torso/arm/leg capsules and a morphable
head (the head reuses the continuous radius/color fields behind the synthetic
PCA basis, so the posed prior mesh lies exactly on the ground-truth surface).
Subjects are extracted with marching cubes, rendered from a turntable camera
ring, and recorded in a digest-verified sectioned manifest together with the
ground-truth and jittered "estimated" morphable coefficients.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .alignment import icp, rotation_from_axis_angle
from .extraction import eval_grid, marching_cubes, colorize
from .heads import face_region_from_points, route
from .metrics import SurfaceDistance
from .morphable import (MorphCoeffs, apply_pose, fit_landmarks,
                        landmark_positions, synth_basis, synthesize)
from .render import (camera_ring, load_pgm, load_ppm, project, rasterize,
                     save_pgm, save_ppm)

WORLD_BOUNDS = np.array([[-1.05, -1.05, -1.05], [1.05, 1.05, 1.05]])
ORTHO_SCALE = 2.2
DEPTH_RANGE = (-1.5, 1.5)
FACE_BOX_FACTOR = 1.35   # face AABB half-side in units of the head scale


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------- subject spec

@dataclass
class SubjectSpec:
    """Analytic description of one synthetic subject."""
    capsules: np.ndarray        # (k, 7): ax ay az bx by bz radius
    capsule_colors: np.ndarray  # (k, 3)
    coeffs: MorphCoeffs         # ground truth; pose[3:] is the head center
    coeffs_est: MorphCoeffs     # jittered copy emulating regressor error

    def head_center(self):
        return np.asarray(self.coeffs.pose[3:], np.float64)

    def face_aabb(self):
        c = self.head_center()
        half = FACE_BOX_FACTOR * self.coeffs.scale
        return np.stack([c - half, c + half])


class SubjectField:
    """Signed clearance field and albedo of a subject (positive inside)."""

    def __init__(self, spec, basis):
        self.spec = spec
        self.basis = basis
        self.rot = rotation_from_axis_angle(
            np.asarray(spec.coeffs.pose[:3], np.float64))
        self.center = spec.head_center()
        self.scale = float(spec.coeffs.scale)

    def _capsule_clearances(self, pts):
        caps = self.spec.capsules
        out = np.empty((len(pts), len(caps)))
        for i, cap in enumerate(caps):
            a, b, r = cap[:3], cap[3:6], cap[6]
            ab = b - a
            t = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
            out[:, i] = r - np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        return out

    def _head_clearance(self, pts):
        rel = pts - self.center
        r = np.maximum(np.linalg.norm(rel, axis=1), 1e-9)
        dirs_local = (rel / r[:, None]) @ self.rot
        radius = self.basis.shape_field.radius(
            dirs_local, self.spec.coeffs.alpha, self.spec.coeffs.beta)
        return self.scale * radius - r, dirs_local

    def signed(self, pts):
        pts = np.asarray(pts, np.float64)
        head, _ = self._head_clearance(pts)
        return np.maximum(self._capsule_clearances(pts).max(axis=1), head) \
            .astype(np.float32)

    def occupancy(self, pts):
        return (self.signed(pts) > 0).astype(np.float32)

    def colors(self, pts):
        """Albedo of the nearest body part (radially constant per part)."""
        pts = np.asarray(pts, np.float64)
        caps = self._capsule_clearances(pts)
        head, dirs_local = self._head_clearance(pts)
        part = caps.argmax(axis=1)
        out = self.spec.capsule_colors[part].astype(np.float64)
        facial = head > caps.max(axis=1)
        if facial.any():
            out[facial] = self.basis.shape_field.color(
                dirs_local[facial], self.spec.coeffs.delta)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_subject(rng, basis):
    """Draw body proportions, clothing colors, and morphable coefficients."""
    torso_r = rng.uniform(0.24, 0.30)
    y_top = 0.10 + torso_r
    capsules, colors = [], []
    shirt = rng.uniform(0.15, 0.9, 3)
    pants = rng.uniform(0.1, 0.7, 3)
    capsules.append([0, -0.45, 0, 0, 0.10, 0, torso_r])
    colors.append(shirt)
    arm_r = rng.uniform(0.055, 0.085)
    for side in (-1.0, 1.0):
        capsules.append([side * torso_r * 0.95, y_top - 0.12, 0.0,
                         side * rng.uniform(0.40, 0.50),
                         rng.uniform(-0.25, -0.05), rng.normal(0, 0.05),
                         arm_r])
        colors.append(shirt * rng.uniform(0.85, 1.0))
    leg_r = rng.uniform(0.08, 0.11)
    for side in (-1.0, 1.0):
        capsules.append([side * 0.13, -0.40, 0.0,
                         side * rng.uniform(0.12, 0.18), -0.85,
                         rng.normal(0, 0.03), leg_r])
        colors.append(pants)

    scale = rng.uniform(0.17, 0.21)
    center = np.array([rng.normal(0, 0.01), y_top + 0.75 * scale,
                       rng.normal(0, 0.01)])
    # face toward -z (the front camera side), with a small random tilt
    axis = np.array([rng.normal(0, 0.08), 1.0, rng.normal(0, 0.08)])
    axis /= np.linalg.norm(axis)
    pose = np.concatenate([axis * (np.pi + rng.normal(0, 0.1)), center])

    k_id, k_exp, k_tex = (basis.b_id.shape[1], basis.b_exp.shape[1],
                          basis.b_tex.shape[1])
    coeffs = MorphCoeffs(rng.normal(0, 0.35, k_id).astype(np.float32),
                         rng.normal(0, 0.25, k_exp).astype(np.float32),
                         rng.normal(0, 0.8, k_tex).astype(np.float32),
                         pose=pose.astype(np.float32), scale=float(scale))
    est = coeffs.copy()
    est.alpha = est.alpha + rng.normal(0, 0.05, k_id).astype(np.float32)
    est.beta = est.beta + rng.normal(0, 0.05, k_exp).astype(np.float32)
    est.delta = est.delta + rng.normal(0, 0.05, k_tex).astype(np.float32)
    est.pose = est.pose + np.concatenate(
        [rng.normal(0, 0.015, 3), rng.normal(0, 0.004, 3)]).astype(np.float32)
    est.scale = float(est.scale * np.exp(rng.normal(0, 0.012)))
    return SubjectSpec(np.array(capsules), np.array(colors), coeffs, est)


# ------------------------------------------------------------------ manifest

@dataclass
class ViewRecord:
    image: str
    mask: str
    depth: str
    landmarks: np.ndarray       # (K, 3) pixel u, v plus normalized depth


@dataclass
class SubjectRecord:
    name: str
    split: str                  # train | test
    mesh: str
    prior: str
    prior_est: str
    spec: SubjectSpec
    landmarks_world: np.ndarray
    views: list = dc_field(default_factory=list)
    prior_train: str = ""       # written by the alignment stage


@dataclass
class DatasetManifest:
    root: str
    seed: int
    subjects_train: int
    subjects_test: int
    n_views: int
    image_size: int
    gt_resolution: int
    subjects: list = dc_field(default_factory=list)
    digests: dict = dc_field(default_factory=dict)

    def cameras(self):
        size = (self.image_size, self.image_size)
        return camera_ring(self.n_views, ORTHO_SCALE, size, DEPTH_RANGE)

    def basis(self):
        return synth_basis(self.seed)

    def split(self, which):
        return [s for s in self.subjects if s.split == which]

    def path(self, rel):
        return Path(self.root) / rel

    def record_digest(self, rel):
        self.digests[rel] = _sha256(self.path(rel))

    def verify(self):
        for rel, digest in sorted(self.digests.items()):
            p = self.path(rel)
            if not p.exists():
                raise DatasetError(f"missing dataset file {rel}")
            if _sha256(p) != digest:
                raise DatasetError(f"digest mismatch for {rel}")

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / "manifest.txt"
        lines = ["[dataset]"]
        for key in ("seed", "subjects_train", "subjects_test", "n_views",
                    "image_size", "gt_resolution"):
            lines.append(f"{key} = {getattr(self, key)}")
        lines.append("")
        for s in self.subjects:
            lines.append(f"[subject {s.name}]")
            lines.append(f"split = {s.split}")
            for key in ("mesh", "prior", "prior_est", "prior_train"):
                lines.append(f"{key} = {getattr(s, key)}")
            lines.append("capsules = " + _fmt(s.spec.capsules))
            lines.append("capsule_colors = " + _fmt(s.spec.capsule_colors))
            for prefix, co in (("", s.spec.coeffs), ("est_", s.spec.coeffs_est)):
                lines.append(f"{prefix}alpha = " + _fmt(co.alpha))
                lines.append(f"{prefix}beta = " + _fmt(co.beta))
                lines.append(f"{prefix}delta = " + _fmt(co.delta))
                lines.append(f"{prefix}pose = " + _fmt(co.pose))
                lines.append(f"{prefix}scale = {co.scale:.17g}")
            lines.append("landmarks_world = " + _fmt(s.landmarks_world))
            lines.append("")
            for k, v in enumerate(s.views):
                lines.append(f"[view {s.name} {k}]")
                for key in ("image", "mask", "depth"):
                    lines.append(f"{key} = {getattr(v, key)}")
                lines.append("landmarks = " + _fmt(v.landmarks))
                lines.append("")
        lines.append("[digests]")
        for rel in sorted(self.digests):
            lines.append(f"{rel} = {self.digests[rel]}")
        lines.append("")
        with open(path, "w") as f:
            f.write("\n".join(lines))

    @classmethod
    def load(cls, path):
        path = Path(path)
        sections = _parse_sections(path)
        if "dataset" not in sections:
            raise DatasetError(f"{path}: missing [dataset] section")
        head = sections["dataset"]
        manifest = cls(root=str(path.parent),
                       **{k: int(head[k]) for k in
                          ("seed", "subjects_train", "subjects_test",
                           "n_views", "image_size", "gt_resolution")})
        by_name = {}
        for title, body in sections.items():
            if not title.startswith("subject "):
                continue
            name = title.split(" ", 1)[1]
            coeffs = _coeffs_from(body, "")
            est = _coeffs_from(body, "est_")
            spec = SubjectSpec(_arr(body["capsules"]).reshape(-1, 7),
                               _arr(body["capsule_colors"]).reshape(-1, 3),
                               coeffs, est)
            rec = SubjectRecord(name, body["split"], body["mesh"],
                                body["prior"], body["prior_est"], spec,
                                _arr(body["landmarks_world"]).reshape(-1, 3),
                                prior_train=body.get("prior_train", ""))
            by_name[name] = rec
            manifest.subjects.append(rec)
        for title, body in sections.items():
            if not title.startswith("view "):
                continue
            _, name, k = title.split(" ")
            by_name[name].views.append(
                ViewRecord(body["image"], body["mask"], body["depth"],
                           _arr(body["landmarks"]).reshape(-1, 3)))
        manifest.digests = dict(sections.get("digests", {}))
        return manifest


def _fmt(arr):
    return " ".join(f"{float(x):.17g}" for x in np.asarray(arr).reshape(-1))


def _arr(text):
    return np.array([float(x) for x in text.split()], np.float64)


def _coeffs_from(body, prefix):
    return MorphCoeffs(_arr(body[prefix + "alpha"]).astype(np.float32),
                       _arr(body[prefix + "beta"]).astype(np.float32),
                       _arr(body[prefix + "delta"]).astype(np.float32),
                       pose=_arr(body[prefix + "pose"]).astype(np.float32),
                       scale=float(body[prefix + "scale"]))


def _parse_sections(path):
    sections, current = {}, None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = {}
                continue
            if current is None or "=" not in line:
                raise DatasetError(f"{path}:{lineno}: malformed manifest line")
            key, value = (part.strip() for part in line.split("=", 1))
            sections[current][key] = value
    return sections


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------- synthesis

def _build_subject(manifest, basis, index, split):
    rng = np.random.default_rng([manifest.seed, index])
    spec = random_subject(rng, basis)
    field = SubjectField(spec, basis)

    grid = eval_grid(field.signed, WORLD_BOUNDS, manifest.gt_resolution)
    mesh = marching_cubes(grid, iso=0.0)
    if len(mesh.triangles) == 0 or not geo.check_watertight(mesh):
        raise DatasetError(f"subject {index}: extracted mesh is not watertight")
    mesh = colorize(mesh, field.colors)

    prior = apply_pose(synthesize(basis, spec.coeffs), spec.coeffs.pose,
                       spec.coeffs.scale)
    prior_est = apply_pose(synthesize(basis, spec.coeffs_est),
                           spec.coeffs_est.pose, spec.coeffs_est.scale)

    name = f"s{index:03d}"
    sub = Path(manifest.root) / name
    sub.mkdir(parents=True, exist_ok=True)
    rec = SubjectRecord(name, split, f"{name}/mesh.ply", f"{name}/prior.ply",
                        f"{name}/prior_est.ply", spec,
                        landmark_positions(basis, spec.coeffs))
    geo.save_ply(manifest.path(rec.mesh), mesh)
    geo.save_ply(manifest.path(rec.prior), prior)
    geo.save_ply(manifest.path(rec.prior_est), prior_est)

    for k, cam in enumerate(manifest.cameras()):
        out = rasterize(mesh, cam)
        view = ViewRecord(f"{name}/view{k}.ppm", f"{name}/view{k}_mask.pgm",
                          f"{name}/view{k}_depth.pgm",
                          project(cam, rec.landmarks_world))
        save_ppm(manifest.path(view.image), out.rgb)
        save_pgm(manifest.path(view.mask), out.mask.astype(np.float32))
        save_pgm(manifest.path(view.depth),
                 np.clip((out.depth + 1.0) / 2.0, 0.0, 1.0))
        rec.views.append(view)
    return rec


def synth_dataset(config, out_dir, threads=1):
    """Generate the benchmark under `out_dir` and return its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = config.get("dataset", "subjects_train")
    n_test = config.get("dataset", "subjects_test")
    manifest = DatasetManifest(
        root=str(out), seed=config.get("dataset", "seed"),
        subjects_train=n_train, subjects_test=n_test,
        n_views=config.get("dataset", "views"),
        image_size=config.get("dataset", "image_size"),
        gt_resolution=config.get("dataset", "gt_resolution"))
    basis = manifest.basis()
    splits = ["train"] * n_train + ["test"] * n_test

    def build(i):
        return _build_subject(manifest, basis, i, splits[i])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            manifest.subjects = list(pool.map(build, range(len(splits))))
    else:
        manifest.subjects = [build(i) for i in range(len(splits))]

    for rec in manifest.subjects:
        for rel in (rec.mesh, rec.prior, rec.prior_est):
            manifest.record_digest(rel)
        for view in rec.views:
            for rel in (view.image, view.mask, view.depth):
                manifest.record_digest(rel)
    manifest.save()
    return manifest


# ----------------------------------------------------------------- alignment

def unproject(cam, uvz):
    """Inverse of `project` (exact for the orthographic camera)."""
    uvz = np.asarray(uvz, np.float64)
    w, h = cam.image_size
    z_near, z_far = cam.depth_range
    p = np.stack([(uvz[:, 0] / (w - 1) - 0.5) * cam.ortho_scale,
                  (0.5 - uvz[:, 1] / (h - 1)) * cam.ortho_scale,
                  z_near + (uvz[:, 2] + 1.0) / 2.0 * (z_far - z_near)], axis=1)
    return p @ cam.view_rotation


def align_priors(manifest, threads=1):
    """Train-time prior alignment: landmark fitting from the front view's
    pixel+depth landmarks, then ICP of the fitted head onto ground-truth
    surface samples inside the face box. Writes `prior_train` meshes and
    refreshes the manifest."""
    basis = manifest.basis()
    cam0 = manifest.cameras()[0]

    def align(rec):
        world_lm = unproject(cam0, rec.views[0].landmarks)
        fitted = fit_landmarks(basis, world_lm)
        fitted.delta = rec.spec.coeffs_est.delta.copy()
        prior = apply_pose(synthesize(basis, fitted), fitted.pose,
                           fitted.scale)
        gt = geo.load_ply(manifest.path(rec.mesh))
        lo, hi = rec.spec.face_aabb()
        rng = np.random.default_rng([manifest.seed, 9000, int(rec.name[1:])])
        pts, _ = geo.sample_surface(gt, 20000, rng)
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        if keep.sum() < 100:
            raise DatasetError(f"{rec.name}: too few head surface samples")
        move, _, _ = icp(prior.vertices.astype(np.float64), pts[keep])
        aligned = prior.copy()
        aligned.vertices = move.apply(
            prior.vertices.astype(np.float64)).astype(np.float32)
        rec.prior_train = f"{rec.name}/prior_train.ply"
        geo.save_ply(manifest.path(rec.prior_train), aligned)
        manifest.record_digest(rec.prior_train)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(align, manifest.subjects))
    else:
        for rec in manifest.subjects:
            align(rec)
    manifest.save()


# ------------------------------------------------------------ sample loading

@dataclass
class TrainingSample:
    """One subject-view training record for the implicit heads."""
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


def load_prior(manifest, rec, prior):
    rel = {"true": rec.prior, "est": rec.prior_est,
           "train": rec.prior_train}.get(prior)
    if rel is None:
        raise DatasetError(f"unknown prior selector {prior!r}")
    if not rel:
        raise DatasetError(f"{rec.name}: no aligned prior; run alignment")
    return geo.load_ply(manifest.path(rel))


def view_inputs(manifest, rec, k):
    cam = manifest.cameras()[k]
    view = rec.views[k]
    image = load_ppm(manifest.path(view.image))
    mask = (load_pgm(manifest.path(view.mask)) > 0.5).astype(np.float32)
    return cam, image, mask


def face_region_for(cam, face_aabb, margin=0.05):
    lo, hi = np.asarray(face_aabb, np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return face_region_from_points(cam, corners, margin=margin)


def shape_samples(manifest, records, seed, n_body=5000, n_face=700,
                  sigma_frac=0.05, prior="train"):
    """Occupancy-labelled training samples (one per subject-view)."""
    basis = manifest.basis()
    out = []
    for si, rec in enumerate(records):
        mesh = geo.load_ply(manifest.path(rec.mesh))
        prior_mesh = load_prior(manifest, rec, prior)
        field = SubjectField(rec.spec, basis)
        aabb = rec.spec.face_aabb()
        for k in range(manifest.n_views):
            cam, image, mask = view_inputs(manifest, rec, k)
            batch = geo.sample_shape_points(
                mesh, aabb, [seed, 17, si, k], n_body=n_body, n_face=n_face,
                sigma_frac=sigma_frac, occupancy_fn=field.occupancy)
            region = face_region_for(cam, aabb)
            out.append(TrainingSample(
                image, mask, cam, prior_mesh.vertices.astype(np.float64),
                prior_mesh.colors, aabb, batch.points,
                route(region, cam, batch.points), occupancy=batch.occupancy))
    return out


def texture_samples(manifest, records, seed, n_body=300, n_face=300,
                    perturb_d=0.05, prior="train"):
    """Color-labelled surface samples (one record per subject-view).

    Points are drawn on the ground-truth surface (area-weighted overall, plus
    a face-box quota), perturbed along the normal, and labelled with the
    analytic albedo of their body part."""
    basis = manifest.basis()
    out = []
    for si, rec in enumerate(records):
        mesh = geo.load_ply(manifest.path(rec.mesh))
        prior_mesh = load_prior(manifest, rec, prior)
        field = SubjectField(rec.spec, basis)
        aabb = rec.spec.face_aabb()
        lo, hi = aabb
        for k in range(manifest.n_views):
            cam, image, mask = view_inputs(manifest, rec, k)
            rng = np.random.default_rng([seed, 23, si, k])
            pts, nrm = geo.sample_surface(mesh, n_body, rng)
            face_pts, face_nrm = [], []
            need = n_face
            for _ in range(50):
                if need <= 0:
                    break
                p, n = geo.sample_surface(mesh, 8 * n_face, rng)
                keep = np.all((p >= lo) & (p <= hi), axis=1)
                face_pts.append(p[keep][:need])
                face_nrm.append(n[keep][:need])
                need -= len(face_pts[-1])
            if need > 0:
                raise DatasetError(f"{rec.name}: face box misses the surface")
            pts = np.concatenate([pts] + face_pts)
            nrm = np.concatenate([nrm] + face_nrm)
            pts = geo.perturb_along_normal(pts, nrm, perturb_d,
                                           int(rng.integers(2 ** 62)))
            region = face_region_for(cam, aabb)
            out.append(TrainingSample(
                image, mask, cam, prior_mesh.vertices.astype(np.float64),
                prior_mesh.colors, aabb, pts.astype(np.float32),
                route(region, cam, pts), colors=field.colors(pts)))
    return out


def surface_colors(mesh, points):
    """Interpolated vertex colors of the nearest surface points of `mesh`."""
    if mesh.colors is None:
        raise DatasetError("mesh has no vertex colors")
    _, tri_idx, bary = SurfaceDistance(mesh).query(points)
    cols = np.asarray(mesh.colors, np.float64)[mesh.triangles[tri_idx]]
    return np.einsum("ik,ikj->ij", bary, cols).astype(np.float32)
