"""Controlled variant sweeps: fusion modes, prior-encoder styles, and texture
modes, trained and evaluated on shared sample batches so every comparison
differs only in the component under study."""

from .heads import FUSION_MODES, PRIOR_STYLES, TEXTURE_MODES
from .metrics import EvalReport
from .pipeline import (default_texture_samples, evaluate_model,
                       train_shape_model, train_texture_model)
from .dataset import shape_samples

AXES = {
    "fusion": FUSION_MODES,
    "encoders": tuple("single-" + s if s != "dual" else s
                      for s in PRIOR_STYLES),
    "texture": TEXTURE_MODES,
}


class AblationError(ValueError):
    pass


def _style_of(variant):
    return variant[len("single-"):] if variant.startswith("single-") \
        else variant


def _merge(target, report, seed):
    for subject, metric, value in report.rows():
        target.add(f"{subject}@{seed}", metric, value)


def run_ablation(config, manifest, axis, seeds=(0,), variants=None,
                 progress=None):
    """Train and evaluate every variant along one axis.

    Returns {variant: EvalReport} with one row group per (subject, seed).
    `variants` restricts the sweep (must be a subset of the axis);
    `progress` is an optional callable receiving status strings.
    """
    if axis not in AXES:
        raise AblationError(f"unknown ablation axis {axis!r}")
    variants = tuple(variants) if variants else AXES[axis]
    unknown = set(variants) - set(AXES[axis])
    if unknown:
        raise AblationError(f"variants {sorted(unknown)} not on axis {axis}")
    note = progress or (lambda msg: None)

    reports = {v: EvalReport(region="head") for v in variants}
    for seed in seeds:
        if axis == "fusion":
            batches = shape_samples(
                manifest, manifest.split("train"), seed,
                n_body=config.get("training", "n_body_points"),
                n_face=config.get("training", "n_face_points"),
                sigma_frac=config.get("training", "sigma_frac"),
                prior="train")
            for mode in variants:
                note(f"fusion={mode} seed={seed}")
                heads, _ = train_shape_model(config, manifest, seed,
                                             fusion_mode=mode,
                                             samples=batches)
                _merge(reports[mode],
                       evaluate_model(config, manifest, heads, seed=seed),
                       seed)
        else:
            note(f"shape seed={seed}")
            heads, _ = train_shape_model(config, manifest, seed)
            batches = default_texture_samples(config, manifest, seed)
            for variant in variants:
                note(f"{axis}={variant} seed={seed}")
                kwargs = {"prior_style": _style_of(variant)} \
                    if axis == "encoders" else {"texture_mode": variant}
                tex, _ = train_texture_model(config, manifest, heads, seed,
                                             samples=batches, **kwargs)
                _merge(reports[variant],
                       evaluate_model(config, manifest, heads, tex,
                                      seed=seed),
                       seed)
    return reports


def ablation_rows(reports):
    """Flatten {variant: EvalReport} into (variant, subject, metric, value)
    rows followed by per-variant means."""
    rows = []
    for variant, report in reports.items():
        for subject, metric, value in report.rows():
            rows.append((variant, subject, metric, value))
    for variant, report in reports.items():
        for metric, value in sorted(report.aggregate().items()):
            rows.append((variant, "mean", metric, value))
    return rows


def write_csv(path, rows, header=("variant", "subject", "metric", "value")):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(f"{x:.10g}" if isinstance(x, float) else str(x)
                             for x in row) + "\n")
