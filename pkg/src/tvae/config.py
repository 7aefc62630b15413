"""Flat ``key = value`` run configuration with dotted section keys.

Example::

    model.kind = tvae
    model.variant = A
    model.z_dim = 10
    train.epochs = 20
    aug.rot_deg = 15, 45

Unknown keys and malformed values are collected and reported together.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .augmentation import AugConfig, AugmentationConfigError, KINDS
from .datasets import DATASET_NAMES
from .latent_algebra import NEURAL_FORMS, VARIANTS, check_variant
from .networks import MODEL_KINDS, STANDARD_ARCH, TINY_ARCH, ModelSpec

ARCHITECTURES = {"standard": STANDARD_ARCH, "tiny": TINY_ARCH}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class TrainConfig:
    model: str = "tvae"
    variant: str = "A"
    residual: bool = False
    neural_form: str = "skip"
    z_dim: int = 10
    arch: str = "standard"
    batch: int = 100
    epochs: int = 200
    lr0: float = 1e-4
    lr_halving_period: int = 50
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10
    dataset: str = "mnist"
    data_root: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    mmd_squared: bool = True
    aug: AugConfig = field(default_factory=AugConfig)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.model, self.z_dim, self.variant, self.residual, self.neural_form,
                         ARCHITECTURES[self.arch])


@dataclass(frozen=True)
class EvalConfig:
    mll_samples: int = 1000
    knn_k: int = 5
    knn_anchors: int = 100000
    knn_queries: int | None = None
    embedding: str = "mean"
    metric: str = "l2"
    ood_dataset: str = "affnist"
    curve_fractions: tuple = (0.01, 0.05, 0.1, 0.2)
    curve_repeats: int = 20
    seed: int = 0
    distance_angles: tuple = tuple(float(a) for a in range(-20, 21, 2))
    distance_samples: int = 10
    demo_targets: int = 8
    repeat_steps: int = 6


# dotted key -> (section, field, parser)
def _bool(s):
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("none", "") else int(s)


def _opt_str(s):
    return None if s.strip().lower() in ("none", "") else s.strip()


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _str(s):
    return s.strip()


KEYS = {
    "model.kind": ("train", "model", _str),
    "model.variant": ("train", "variant", _str),
    "model.residual": ("train", "residual", _bool),
    "model.neural_form": ("train", "neural_form", _str),
    "model.z_dim": ("train", "z_dim", int),
    "model.arch": ("train", "arch", _str),
    "train.batch": ("train", "batch", int),
    "train.epochs": ("train", "epochs", int),
    "train.lr0": ("train", "lr0", float),
    "train.lr_halving_period": ("train", "lr_halving_period", int),
    "train.adam_betas": ("train", "adam_betas", _floats),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.seed": ("train", "seed", int),
    "train.deterministic": ("train", "deterministic", _bool),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "data.name": ("train", "dataset", _str),
    "data.root": ("train", "data_root", _opt_str),
    "data.train_size": ("train", "train_size", _opt_int),
    "data.test_size": ("train", "test_size", _opt_int),
    "loss.mmd_squared": ("train", "mmd_squared", _bool),
    "aug.kinds": ("aug", "kinds", _strs),
    "aug.rot_deg": ("aug", "rot_deg", _floats),
    "aug.tilt_deg": ("aug", "tilt_deg", _floats),
    "aug.shear": ("aug", "shear", _floats),
    "aug.seed": ("aug", "seed", int),
    "aug.strict": ("aug", "strict", _bool),
    "eval.mll_samples": ("eval", "mll_samples", int),
    "eval.knn_k": ("eval", "knn_k", int),
    "eval.knn_anchors": ("eval", "knn_anchors", int),
    "eval.knn_queries": ("eval", "knn_queries", _opt_int),
    "eval.embedding": ("eval", "embedding", _str),
    "eval.metric": ("eval", "metric", _str),
    "eval.ood_dataset": ("eval", "ood_dataset", _str),
    "eval.curve_fractions": ("eval", "curve_fractions", _floats),
    "eval.curve_repeats": ("eval", "curve_repeats", int),
    "eval.seed": ("eval", "seed", int),
    "eval.distance_angles": ("eval", "distance_angles", _floats),
    "eval.distance_samples": ("eval", "distance_samples", int),
    "eval.demo_targets": ("eval", "demo_targets", int),
    "eval.repeat_steps": ("eval", "repeat_steps", int),
}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        errors = validation_errors(self)
        if errors:
            raise ConfigError(errors)
        return self

    def to_flat(self) -> dict:
        out = {}
        for key, (section, name, _) in KEYS.items():
            obj = self.train.aug if section == "aug" else getattr(self, section)
            out[key] = getattr(obj, name)
        return out

    def dumps(self) -> str:
        lines = []
        for key, value in sorted(self.to_flat().items()):
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "eval": asdict(self.eval)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        t = dict(d["train"])
        aug = dict(t.pop("aug"))
        aug = AugConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
        t = {k: tuple(v) if isinstance(v, list) else v for k, v in t.items()}
        e = {k: tuple(v) if isinstance(v, list) else v for k, v in d["eval"].items()}
        return cls(TrainConfig(aug=aug, **t), EvalConfig(**e))


def validation_errors(cfg: RunConfig) -> list[str]:
    t, e, errors = cfg.train, cfg.eval, []
    if t.model not in MODEL_KINDS:
        errors.append(f"model.kind: must be one of {', '.join(MODEL_KINDS)}, got {t.model!r}")
    if t.variant not in VARIANTS:
        errors.append(f"model.variant: must be one of {', '.join(VARIANTS)}, got {t.variant!r}")
    elif t.model == "tvae":
        try:
            check_variant(t.variant, t.z_dim, t.residual)
        except ValueError as err:
            errors.append(f"model.z_dim/model.residual: {err}")
    if t.neural_form not in NEURAL_FORMS:
        errors.append(f"model.neural_form: must be one of {', '.join(NEURAL_FORMS)}")
    if t.arch not in ARCHITECTURES:
        errors.append(f"model.arch: must be one of {', '.join(ARCHITECTURES)}, got {t.arch!r}")
    if t.z_dim <= 0:
        errors.append("model.z_dim: must be positive")
    if t.batch <= 0:
        errors.append("train.batch: must be positive")
    if t.epochs < 0:
        errors.append("train.epochs: must be >= 0")
    if t.lr0 <= 0:
        errors.append("train.lr0: must be positive")
    if t.lr_halving_period <= 0:
        errors.append("train.lr_halving_period: must be positive")
    if len(t.adam_betas) != 2:
        errors.append("train.adam_betas: need exactly two values")
    if t.checkpoint_every <= 0:
        errors.append("train.checkpoint_every: must be positive")
    if t.dataset not in DATASET_NAMES:
        errors.append(f"data.name: must be one of {', '.join(DATASET_NAMES)}, got {t.dataset!r}")
    for name in ("train_size", "test_size"):
        v = getattr(t, name)
        if v is not None and v <= 0:
            errors.append(f"data.{name}: must be positive")
    for kind in t.aug.kinds:
        if kind not in KINDS:
            errors.append(f"aug.kinds: unknown kind {kind!r}")
    for key in ("rot_deg", "tilt_deg", "shear"):
        if len(getattr(t.aug, key)) != 2:
            errors.append(f"aug.{key}: need a 'min, max' pair")
    if not any(err.startswith("aug.") for err in errors):
        try:
            t.aug.validate()
        except AugmentationConfigError as err:
            errors.append(f"aug: {err}")
    if e.mll_samples < 1:
        errors.append("eval.mll_samples: must be >= 1")
    if e.knn_k < 1:
        errors.append("eval.knn_k: must be >= 1")
    if e.knn_anchors < 1:
        errors.append("eval.knn_anchors: must be >= 1")
    if e.embedding not in ("mean", "sample"):
        errors.append("eval.embedding: must be 'mean' or 'sample'")
    if e.metric != "l2":
        errors.append("eval.metric: only 'l2' is supported")
    if e.ood_dataset not in DATASET_NAMES:
        errors.append(f"eval.ood_dataset: must be one of {', '.join(DATASET_NAMES)}")
    if any(not 0 < f <= 1 for f in e.curve_fractions):
        errors.append("eval.curve_fractions: values must lie in (0, 1]")
    if e.curve_repeats < 1:
        errors.append("eval.curve_repeats: must be >= 1")
    return errors


def parse_flat(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {raw.strip()!r}"])
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def apply_flat(cfg: RunConfig, flat: dict) -> RunConfig:
    """Return ``cfg`` with every dotted key in ``flat`` applied; last one wins."""
    sections = {"train": {}, "aug": {}, "eval": {}}
    errors = []
    for key, value in flat.items():
        if key not in KEYS:
            errors.append(f"{key}: unknown key")
            continue
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(value) if isinstance(value, str) else value
        except ValueError as err:
            errors.append(f"{key}: {err}")
    if errors:
        raise ConfigError(errors)
    aug = replace(cfg.train.aug, **sections["aug"])
    train = replace(cfg.train, aug=aug, **sections["train"])
    return RunConfig(train, replace(cfg.eval, **sections["eval"]))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_flat(cfg, parse_flat(Path(path).read_text()))
    if overrides:
        cfg = apply_flat(cfg, overrides)
    return cfg.validate()


# Latent sizes of the experiment grid; block-rotation variants need an even size.
GRID_Z = ((10, 10), (25, 26), (100, 100))


def experiment_grid(dataset: str) -> dict:
    """Full-scale run configs for one dataset, keyed by file stem.

    Covers T-VAE with every action variant (residual where defined), VAE and
    VAE+ at each latent size, all with the default 200-epoch schedule.
    """
    out = {}
    for z_odd, z_even in GRID_Z:
        for model in ("vae", "vae_plus"):
            out[f"{dataset}_{model}_z{z_odd}"] = {"model.kind": model, "model.z_dim": z_odd}
        for variant in VARIANTS:
            z = z_even if variant in ("M", "MA") else z_odd
            for residual in ((False,) if variant == "A" else (False, True)):
                flat = {"model.kind": "tvae", "model.variant": variant, "model.z_dim": z,
                        "model.residual": residual}
                if variant == "N":
                    flat["model.neural_form"] = "skip" if residual else "plain"
                out[f"{dataset}_tvae_{variant}{'r' if residual else ''}_z{z}"] = flat
    return {name: apply_flat(RunConfig(), {"data.name": dataset, **flat}).validate()
            for name, flat in out.items()}
