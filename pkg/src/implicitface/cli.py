"""Command-line pipeline: dataset synthesis, prior alignment, staged
training, reconstruction, evaluation, and ablation sweeps.

Every stage reads and writes persisted artifacts under the configured work
directory, so deleting later outputs and re-running resumes from what is on
disk; with --threads 1 and fixed seeds the results are bit-exact."""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from .ablation import AXES, ablation_rows, run_ablation, write_csv
from .checkpoint import save_tensors
from .config import Config, ConfigError
from .dataset import (DatasetError, DatasetManifest, align_priors,
                      synth_dataset)
from .pipeline import (Reconstruction, build_shape_heads, build_texture_heads,
                       default_texture_samples, evaluate_subject, load_shape,
                       load_texture, reconstruct_subject, save_shape,
                       save_texture, train_shape_model)
from .heads import train_texture

_THREAD_LIMITER = None


class CliError(ValueError):
    pass


def _limit_threads(n):
    global _THREAD_LIMITER
    try:
        import threadpoolctl
        _THREAD_LIMITER = threadpoolctl.threadpool_limits(n)
    except ImportError:
        import os
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def build_parser():
    p = argparse.ArgumentParser(
        prog="implicitface",
        description="Single-view clothed-human reconstruction with a "
                    "face-prior-aligned implicit function.")
    p.add_argument("--config", help="path to a sectioned key=value config")
    p.add_argument("--seed", type=int,
                   help="override the dataset/training seed")
    p.add_argument("--fast", action="store_true",
                   help="apply the small CI-scale profile")
    p.add_argument("--threads", type=int, default=1,
                   help="worker and BLAS thread budget (1 = bit-exact)")
    p.add_argument("--dump-volume", action="store_true",
                   help="also persist the occupancy grids on reconstruct")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic dataset")
    sub.add_parser("align", help="fit and ICP-align the train-time priors")
    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("stage", choices=["shape", "tex-coarse", "tex-fine"])
    r = sub.add_parser("reconstruct", help="extract meshes for test subjects")
    r.add_argument("--subject", help="single subject name (default: all test)")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--prior", choices=["true", "est", "train"], default="est")
    sub.add_parser("eval", help="score reconstructed meshes against truth")
    a = sub.add_parser("ablate", help="train and compare variants on one axis")
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--seeds", default="0",
                   help="comma-separated training seeds")
    return p


class Workspace:
    """Artifact locations derived from the config's work directory."""

    def __init__(self, config):
        self.config = config
        self.root = Path(config.get("paths", "workdir"))
        self.data = self.root / "data"
        self.ckpt = self.root / "checkpoints"
        self.recon = self.root / "recon"
        self.reports = self.root / "reports"

    def manifest_path(self):
        return self.data / "manifest.txt"

    def manifest(self):
        if not self.manifest_path().exists():
            raise CliError("no dataset manifest; run `synth` first")
        manifest = DatasetManifest.load(self.manifest_path())
        manifest.verify()
        return manifest

    def aligned_manifest(self):
        manifest = self.manifest()
        if any(not rec.prior_train for rec in manifest.subjects):
            raise CliError("priors not aligned; run `align` first")
        return manifest

    def shape_heads(self, manifest, seed):
        path = self.ckpt / "shape.ckpt"
        if not path.exists():
            raise CliError("no shape checkpoint; run `train shape` first")
        return load_shape(path, build_shape_heads(self.config, seed))

    def texture_heads(self, manifest, seed, stage):
        path = self.ckpt / f"tex_{stage}.ckpt"
        if not path.exists():
            raise CliError(f"no {stage} texture checkpoint; run "
                           f"`train tex-{stage}` first")
        tex = load_texture(path, build_texture_heads(self.config, seed))
        tex.coarse_trained = True
        tex.fine_trained = stage == "fine"
        return tex


def _effective_seed(args, ws):
    if args.seed is not None:
        return args.seed
    if ws.manifest_path().exists():
        return DatasetManifest.load(ws.manifest_path()).seed
    return ws.config.get("dataset", "seed")


def cmd_synth(args, ws):
    if args.seed is not None:
        ws.config.set("dataset", "seed", args.seed)
    manifest = synth_dataset(ws.config, ws.data, threads=args.threads)
    print(f"wrote {len(manifest.subjects)} subjects to {ws.data}")
    return 0


def cmd_align(args, ws):
    manifest = ws.manifest()
    align_priors(manifest, threads=args.threads)
    print(f"aligned {len(manifest.subjects)} train-time priors")
    return 0


def cmd_train(args, ws):
    manifest = ws.aligned_manifest()
    seed = _effective_seed(args, ws)
    ws.ckpt.mkdir(parents=True, exist_ok=True)
    if args.stage == "shape":
        heads, history = train_shape_model(ws.config, manifest, seed)
        save_shape(ws.ckpt / "shape.ckpt", heads)
        print("shape loss per epoch: "
              + " ".join(f"{h:.5f}" for h in history))
        return 0
    heads = ws.shape_heads(manifest, seed)
    epochs = ws.config.get("training", "epochs_texture")
    lr = ws.config.get("training", "lr_texture")
    vol_res = ws.config.get("model", "volume_resolution")
    samples = default_texture_samples(ws.config, manifest, seed)
    if args.stage == "tex-coarse":
        tex = build_texture_heads(ws.config, seed)
        history = train_texture(heads, tex, samples, "coarse", epochs, lr,
                                volume_resolution=vol_res)
        save_texture(ws.ckpt / "tex_coarse.ckpt", tex)
    else:
        tex = ws.texture_heads(manifest, seed, "coarse")
        history = train_texture(heads, tex, samples, "fine", epochs, lr,
                                volume_resolution=vol_res)
        save_texture(ws.ckpt / "tex_fine.ckpt", tex)
    print(f"{args.stage} loss per epoch: "
          + " ".join(f"{h:.5f}" for h in history))
    return 0


def _texture_if_trained(ws, manifest, seed):
    for stage in ("fine", "coarse"):
        if (ws.ckpt / f"tex_{stage}.ckpt").exists():
            return ws.texture_heads(manifest, seed, stage)
    return None


def cmd_reconstruct(args, ws):
    manifest = ws.aligned_manifest()
    seed = _effective_seed(args, ws)
    heads = ws.shape_heads(manifest, seed)
    tex = _texture_if_trained(ws, manifest, seed)
    records = manifest.split("test")
    if args.subject:
        records = [r for r in manifest.subjects if r.name == args.subject]
        if not records:
            raise CliError(f"unknown subject {args.subject!r}")
    ws.recon.mkdir(parents=True, exist_ok=True)
    for rec in records:
        recon = reconstruct_subject(ws.config, manifest, rec, heads, tex,
                                    view=args.view, prior=args.prior,
                                    keep_grids=args.dump_volume)
        geo.save_ply(ws.recon / f"{rec.name}_body.ply", recon.body)
        geo.save_ply(ws.recon / f"{rec.name}_head.ply", recon.head)
        if args.dump_volume:
            save_tensors(ws.recon / f"{rec.name}_volumes.ckpt",
                         {"body": recon.body_grid.values,
                          "head": recon.head_grid.values})
        print(f"{rec.name}: body {len(recon.body.triangles)} tris, "
              f"head {len(recon.head.triangles)} tris")
    return 0


def cmd_eval(args, ws):
    manifest = ws.manifest()
    seed = _effective_seed(args, ws)
    n_samples = ws.config.get("training", "eval_samples")
    ws.reports.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in manifest.split("test"):
        body_path = ws.recon / f"{rec.name}_body.ply"
        head_path = ws.recon / f"{rec.name}_head.ply"
        if not body_path.exists() or not head_path.exists():
            raise CliError(f"no reconstruction for {rec.name}; "
                           "run `reconstruct` first")
        recon = Reconstruction(geo.load_ply(body_path),
                               geo.load_ply(head_path))
        for metric, value in evaluate_subject(manifest, rec, recon,
                                              n_samples, seed).items():
            rows.append((rec.name, metric, value))
    out = ws.reports / "eval.csv"
    write_csv(out, rows, header=("subject", "metric", "value"))
    for row in rows:
        print(f"{row[0]},{row[1]},{row[2]:.6f}")
    print(f"wrote {out}")
    return 0


def cmd_ablate(args, ws):
    manifest = ws.aligned_manifest()
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError:
        raise CliError(f"bad --seeds value {args.seeds!r}") from None
    reports = run_ablation(ws.config, manifest, args.axis, seeds=seeds,
                           progress=lambda msg: print(f"[{args.axis}] {msg}"))
    ws.reports.mkdir(parents=True, exist_ok=True)
    out = ws.reports / f"ablation_{args.axis}.csv"
    write_csv(out, ablation_rows(reports))
    for variant, report in reports.items():
        agg = report.aggregate()
        summary = " ".join(f"{k}={v:.5f}" for k, v in sorted(agg.items()))
        print(f"{variant}: {summary}")
    print(f"wrote {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "align": cmd_align, "train": cmd_train,
            "reconstruct": cmd_reconstruct, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        config = Config.load(args.config) if args.config else Config()
        if args.fast:
            config.apply_fast()
        ws = Workspace(config)
        return COMMANDS[args.command](args, ws)
    except (CliError, ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
