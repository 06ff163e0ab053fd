"""Model orchestration over a dataset manifest: head construction, staged
training, checkpointing, reconstruction, and per-subject evaluation."""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .checkpoint import load_networks, save_networks
from .dataset import (WORLD_BOUNDS, TrainingSample, face_region_for,
                      load_prior, shape_samples, texture_samples, view_inputs)
from .extraction import eval_grid, marching_cubes, colorize
from .features import FeatureMap2D, encode_image, encode_points
from .heads import (make_color_predictor, make_occupancy_predictor,
                    make_shape_heads, make_texture_heads, texture_prior_volume,
                    train_shape, train_texture)
from .metrics import EvalReport, chamfer, color_l1, face_l2, p2s


class PipelineError(ValueError):
    pass


def _model_args(config):
    get = config.get
    return dict(channels_2d=get("model", "channels_2d"),
                channels_3d=get("model", "channels_3d"),
                transform_width=get("model", "transform_width"),
                fuse_width=get("model", "fuse_width"))


def build_shape_heads(config, seed, fusion_mode=None):
    rng = np.random.default_rng([seed, 101])
    return make_shape_heads(
        rng, fusion_mode or config.get("model", "fusion_mode"),
        **_model_args(config))


def build_texture_heads(config, seed, texture_mode=None, prior_style=None):
    rng = np.random.default_rng([seed, 103])
    args = _model_args(config)
    return make_texture_heads(
        rng, texture_mode or config.get("model", "texture_mode"),
        shape_channels=args["channels_2d"],
        shape_channels_3d=args["channels_3d"],
        omega_width=config.get("model", "omega_width"),
        prior_style=prior_style or config.get("model", "prior_style"),
        **args)


def shape_networks(heads):
    return heads.trainable_networks()


def texture_networks(tex):
    return [tex.image_encoder_coarse, tex.image_encoder_fine,
            tex.prior_encoder.point_net, tex.prior_encoder.smoother,
            tex.coarse_head, tex.fine_transform_2d, tex.fine_transform_3d] \
        + tex.fine_fuse.networks() + tex.body_texture_head.networks()


def save_shape(path, heads):
    save_networks(path, shape_networks(heads))


def load_shape(path, heads):
    load_networks(path, shape_networks(heads))
    return heads


def save_texture(path, tex):
    save_networks(path, texture_networks(tex))


def load_texture(path, tex):
    load_networks(path, texture_networks(tex))
    return tex


# ------------------------------------------------------------------ training

def train_shape_model(config, manifest, seed, fusion_mode=None, samples=None):
    """Build and train the occupancy heads; returns (heads, loss history)."""
    heads = build_shape_heads(config, seed, fusion_mode)
    if samples is None:
        samples = shape_samples(
            manifest, manifest.split("train"), seed,
            n_body=config.get("training", "n_body_points"),
            n_face=config.get("training", "n_face_points"),
            sigma_frac=config.get("training", "sigma_frac"), prior="train")
    history = train_shape(
        heads, samples, config.get("training", "epochs_shape"),
        config.get("training", "lr_shape"),
        volume_resolution=config.get("model", "volume_resolution"))
    return heads, history


def default_texture_samples(config, manifest, seed, prior="train"):
    return texture_samples(
        manifest, manifest.split("train"), seed,
        n_body=max(64, config.get("training", "n_body_points") // 16),
        n_face=config.get("training", "n_face_points"),
        perturb_d=config.get("training", "perturb_d"), prior=prior)


def train_texture_model(config, manifest, shape_heads, seed,
                        texture_mode=None, prior_style=None, samples=None,
                        stages=("coarse", "fine")):
    """Build and stage-train the texture heads; returns (heads, histories)."""
    tex = build_texture_heads(config, seed, texture_mode, prior_style)
    if samples is None:
        samples = default_texture_samples(config, manifest, seed)
    epochs = config.get("training", "epochs_texture")
    lr = config.get("training", "lr_texture")
    vol_res = config.get("model", "volume_resolution")
    histories = {}
    for stage in stages:
        if stage == "fine" and tex.texture_mode == "coarse":
            continue
        histories[stage] = train_texture(shape_heads, tex, samples, stage,
                                         epochs, lr,
                                         volume_resolution=vol_res)
    return tex, histories


# ------------------------------------------------------------ reconstruction

@dataclass
class Reconstruction:
    body: geo.TriangleMesh
    head: geo.TriangleMesh
    body_grid: object = None
    head_grid: object = None


def reconstruct_subject(config, manifest, rec, shape_heads, tex_heads=None,
                        view=0, prior="est", keep_grids=False):
    """Single-view reconstruction: a body mesh over the world bounds plus a
    finer head mesh over the face box, optionally vertex-colored."""
    cam, image, mask = view_inputs(manifest, rec, view)
    prior_mesh = load_prior(manifest, rec, prior)
    verts = prior_mesh.vertices.astype(np.float64)
    aabb = rec.spec.face_aabb()
    region = face_region_for(cam, aabb)
    vol_res = config.get("model", "volume_resolution")
    resolution = config.get("training", "extract_resolution")

    fmap = encode_image(shape_heads.image_encoder, image, mask)
    fvol = None
    if shape_heads.fusion_mode != "2d-only":
        fvol = encode_points(shape_heads.prior_encoder, verts, aabb,
                             resolution=vol_res)
    occ = make_occupancy_predictor(shape_heads, fmap, fvol, cam, region)
    body_grid = eval_grid(occ, WORLD_BOUNDS, resolution)
    head_grid = eval_grid(occ, aabb,
                          config.get("training", "head_resolution"))
    body = marching_cubes(body_grid, iso=0.5)
    head = marching_cubes(head_grid, iso=0.5)

    if tex_heads is not None:
        fmap_t = encode_image(tex_heads.image_encoder_coarse, image, mask)
        masked = np.asarray(image, np.float32) \
            * np.asarray(mask, np.float32)[:, :, None]
        fine_map = FeatureMap2D(
            tex_heads.image_encoder_fine.forward(masked)[0])
        tvol = None
        if tex_heads.texture_mode in ("fine3d", "coarse2fine3d"):
            tvol = texture_prior_volume(shape_heads, tex_heads, verts, aabb,
                                        prior_mesh.colors, vol_res)
        color = make_color_predictor(tex_heads, fmap, fmap_t, fine_map, tvol,
                                     cam, region)
        if len(body.vertices):
            body = colorize(body, color)
        if len(head.vertices):
            head = colorize(head, color)
    return Reconstruction(body, head,
                          body_grid if keep_grids else None,
                          head_grid if keep_grids else None)


# ---------------------------------------------------------------- evaluation

def crop_mesh(mesh, box):
    """Sub-mesh of the triangles whose centroids fall inside the AABB."""
    lo, hi = np.asarray(box, np.float64)
    cent = mesh.vertices[mesh.triangles].mean(axis=1)
    keep = np.all((cent >= lo) & (cent <= hi), axis=1)
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    remap = np.zeros(len(mesh.vertices), np.int64)
    remap[used] = np.arange(len(used))
    return geo.TriangleMesh(mesh.vertices[used], remap[tris],
                            colors=None if mesh.colors is None
                            else mesh.colors[used])


def evaluate_subject(manifest, rec, recon, n_samples=4000, seed=0):
    """Face-region and body metrics for one reconstruction.

    An empty head reconstruction scores the face-box diagonal (the maximal
    in-region error) so failed variants stay comparable."""
    gt = geo.load_ply(manifest.path(rec.mesh))
    aabb = rec.spec.face_aabb()
    gt_head = crop_mesh(gt, aabb)
    if len(gt_head.triangles) == 0:
        raise PipelineError(f"{rec.name}: ground truth misses the face box")
    head = recon.head
    if len(head.triangles) == 0 and len(recon.body.triangles):
        head = crop_mesh(recon.body, aabb)
    values = {}
    if len(head.triangles) == 0:
        penalty = float(np.linalg.norm(aabb[1] - aabb[0]))
        values["face_l2"] = values["head_p2s"] = values["head_chamfer"] \
            = penalty
    else:
        values["face_l2"] = face_l2(head, gt, aabb, n_samples, seed)
        values["head_p2s"] = p2s(head, gt_head, n_samples, seed)
        values["head_chamfer"] = chamfer(head, gt_head, n_samples, seed)
    if len(recon.body.triangles):
        values["body_chamfer"] = chamfer(recon.body, gt, n_samples, seed)
    else:
        values["body_chamfer"] = float(
            np.linalg.norm(WORLD_BOUNDS[1] - WORLD_BOUNDS[0]))
    if head.colors is not None and len(head.triangles):
        values["color_l1"] = color_l1(head, gt, region=aabb)
    elif recon.head.colors is not None or recon.body.colors is not None:
        values["color_l1"] = 1.0   # colored model, nothing recovered in-region
    return values


def evaluate_model(config, manifest, shape_heads, tex_heads=None, seed=0,
                   prior="est", records=None):
    """EvalReport over the test split (or an explicit record list)."""
    n_samples = config.get("training", "eval_samples")
    report = EvalReport(region="head", seed=seed, sample_count=n_samples)
    for rec in (manifest.split("test") if records is None else records):
        recon = reconstruct_subject(config, manifest, rec, shape_heads,
                                    tex_heads, prior=prior)
        for metric, value in evaluate_subject(manifest, rec, recon,
                                              n_samples, seed).items():
            report.add(rec.name, metric, value)
    return report
