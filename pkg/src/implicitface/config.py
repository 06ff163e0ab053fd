"""Sectioned key=value configuration with validated, fully-defaulted fields.

The defaults marked "native" carry the published training recipe (image size,
epochs, learning rates, batch size, point counts); the fast profile shrinks
everything for CI-scale runs.
"""

import copy

SECTIONS = ("dataset", "model", "training", "paths")

DEFAULTS = {
    "dataset": {
        "subjects_train": 32,
        "subjects_test": 8,
        "views": 4,
        "image_size": 256,        # native: 512
        "gt_resolution": 96,
        "seed": 0,
    },
    "model": {
        "channels_2d": 32,        # native: 256
        "channels_3d": 32,        # native: 128
        "volume_resolution": 64,  # native: 64
        "transform_width": 64,
        "fuse_width": 128,
        "omega_width": 64,
        "fusion_mode": "mlp-concat",
        "texture_mode": "coarse2fine3d",
        "prior_style": "dual",
    },
    "training": {
        "epochs_shape": 9,        # native
        "lr_shape": 1e-4,         # native
        "epochs_texture": 6,      # native (per stage)
        "lr_texture": 1e-3,       # native
        "batch_size": 3,          # native (subjects per batch)
        "n_body_points": 5000,    # native
        "n_face_points": 700,     # native
        "sigma_frac": 0.05,
        "perturb_d": 0.05,
        "extract_resolution": 128,
        "head_resolution": 128,   # face-box grid (finer voxels, smaller box)
        "eval_samples": 4000,
    },
    "paths": {
        "workdir": "runs/default",
    },
}

# fields whose defaults are the published recipe values
PAPER_NATIVE = {
    ("training", "epochs_shape"), ("training", "lr_shape"),
    ("training", "epochs_texture"), ("training", "lr_texture"),
    ("training", "batch_size"), ("training", "n_body_points"),
    ("training", "n_face_points"), ("model", "volume_resolution"),
}

FAST_PROFILE = {
    "dataset": {"subjects_train": 8, "subjects_test": 2, "views": 2,
                "image_size": 64, "gt_resolution": 64},
    "model": {"channels_2d": 12, "channels_3d": 8, "volume_resolution": 48,
              "transform_width": 24, "fuse_width": 48, "omega_width": 24},
    "training": {"epochs_shape": 2, "epochs_texture": 2,
                 "n_body_points": 400, "n_face_points": 100,
                 "extract_resolution": 48, "head_resolution": 64,
                 "eval_samples": 1500},
}


class ConfigError(ValueError):
    pass


class Config:
    """Nested section/key settings with typed validation against DEFAULTS."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            for section, entries in values.items():
                for key, value in entries.items():
                    self.set(section, key, value)

    def get(self, section, key):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown setting [{section}] {key}") from None

    def set(self, section, key, value):
        if section not in self.values or key not in self.values[section]:
            raise ConfigError(f"unknown setting [{section}] {key}")
        default = DEFAULTS[section][key]
        try:
            if isinstance(default, bool):
                value = str(value).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
            else:
                value = str(value)
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: cannot parse {value!r}") from None
        self.values[section][key] = value
        self.validate()

    def validate(self):
        from .heads import FUSION_MODES, PRIOR_STYLES, TEXTURE_MODES
        v = self.values
        if v["model"]["fusion_mode"] not in FUSION_MODES:
            raise ConfigError(
                f"invalid fusion_mode {v['model']['fusion_mode']!r}")
        if v["model"]["texture_mode"] not in TEXTURE_MODES:
            raise ConfigError(
                f"invalid texture_mode {v['model']['texture_mode']!r}")
        if v["model"]["prior_style"] not in PRIOR_STYLES:
            raise ConfigError(
                f"invalid prior_style {v['model']['prior_style']!r}")
        for section, key in (("dataset", "subjects_train"),
                             ("dataset", "views"),
                             ("dataset", "image_size"),
                             ("model", "volume_resolution"),
                             ("training", "n_body_points")):
            if v[section][key] <= 0:
                raise ConfigError(f"[{section}] {key} must be positive")
        if v["dataset"]["image_size"] % 4:
            raise ConfigError("image_size must be divisible by 4")

    def apply_fast(self):
        for section, entries in FAST_PROFILE.items():
            for key, value in entries.items():
                self.set(section, key, value)

    def save(self, path):
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for key, value in self.values[section].items():
                suffix = "  # paper-native default" \
                    if (section, key) in PAPER_NATIVE \
                    and value == DEFAULTS[section][key] else ""
                lines.append(f"{key} = {value}{suffix}")
            lines.append("")
        with open(path, "w") as f:
            f.write("\n".join(lines))

    @classmethod
    def load(cls, path):
        cfg = cls()
        section = None
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1]
                    if section not in SECTIONS:
                        raise ConfigError(
                            f"{path}:{lineno}: unknown section {section!r}")
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                if section is None:
                    raise ConfigError(f"{path}:{lineno}: key outside section")
                key, value = (part.strip() for part in line.split("=", 1))
                cfg.set(section, key, value)
        return cfg

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values
