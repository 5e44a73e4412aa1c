"""Flat ``key = value`` run configuration with dotted keys.

Lines starting with ``#`` and blank lines are ignored. ``preset = paper-cifar10``
(or ``paper-svhn``) loads the reference loss weights before any explicit
``loss.*`` key is applied, wherever the preset line appears.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugmentPolicy
from .losses import PRESETS, HyperParams
from .model import ModelConfig
from .pedcc import SolverConfig
from .trainer import TrainingConfig

PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "config"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _sigma(v: str):
    return None if v.strip().lower() in ("median", "auto", "none") else float(v)


def _path(v: str) -> str:
    return v.strip()


# key -> (section attribute, field name, parser)
KEYS = {
    "data.kind": ("data", "kind", str),
    "data.classes": ("data", "classes", int),
    "data.input_dim": ("data", "input_dim", int),
    "data.per_class_train": ("data", "per_class_train", int),
    "data.per_class_test": ("data", "per_class_test", int),
    "data.separation": ("data", "separation", float),
    "data.labeled_per_class": ("data", "labeled_per_class", int),
    "data.seed": ("data", "seed", int),
    "data.cifar_dir": ("data", "cifar_dir", _path),
    "data.train_csv": ("data", "train_csv", _path),
    "data.test_csv": ("data", "test_csv", _path),
    "centroids.file": ("centroids", "file", _path),
    "centroids.seed": ("centroids", "seed", int),
    "centroids.max_iters": ("centroids", "max_iters", int),
    "centroids.step_size": ("centroids", "step_size", float),
    "centroids.tol": ("centroids", "tol", float),
    "centroids.force_exponent": ("centroids", "force_exponent", float),
    "model.arch": ("model", "arch", str),
    "model.hidden": ("model", "hidden", _ints),
    "model.widen": ("model", "widen", int),
    "model.depth": ("model", "depth", int),
    "model.width": ("model", "width", int),
    "model.feature_dim": ("model", "feature_dim", int),
    "model.seed": ("model", "seed", int),
    "loss.s": ("loss", "s", float),
    "loss.m": ("loss", "m", float),
    "loss.n_root": ("loss", "n_root", float),
    "loss.lambda1": ("loss", "lambda1", float),
    "loss.lambda2": ("loss", "lambda2", float),
    "loss.lambda3": ("loss", "lambda3", float),
    "loss.lambda4": ("loss", "lambda4", float),
    "loss.sigma": ("loss", "sigma", _sigma),
    "loss.normalize_mse": ("loss", "normalize_mse", _bool),
    "train.steps": ("train", "steps", int),
    "train.lr": ("train", "lr", float),
    "train.momentum": ("train", "momentum", float),
    "train.labeled_batch": ("train", "labeled_batch", int),
    "train.unlabeled_batch": ("train", "unlabeled_batch", int),
    "train.ablation": ("train", "ablation", str),
    "train.seed": ("train", "seed", int),
    "train.eval_every": ("train", "eval_every", int),
    "train.seeds": ("train", "seeds", int),
    "augment.policy": ("augment", "policy", str),
    "output.dir": ("output", "dir", _path),
}


@dataclass
class DataSection:
    kind: str = "blobs"
    classes: int = 4
    input_dim: int = 8
    per_class_train: int = 504
    per_class_test: int = 250
    separation: float = 4.0
    labeled_per_class: int = 4
    seed: int = 0
    cifar_dir: str = ""
    train_csv: str = ""
    test_csv: str = ""


@dataclass
class CentroidSection:
    file: str = ""
    seed: int = 0
    max_iters: int = 20000
    step_size: float = 0.05
    tol: float = 1e-9
    force_exponent: float = 2.0


@dataclass
class ModelSection:
    arch: str = "auto"  # conv_small for image data, mlp for vectors
    hidden: tuple = (32,)
    widen: int = 1
    depth: int = 28
    width: int = 2
    feature_dim: int = 8
    seed: int = 0


@dataclass
class LossSection:
    s: float = 7.5
    m: float = 0.35
    n_root: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 400.0
    lambda4: float = 0.2
    sigma: float | None = None
    normalize_mse: bool = True


@dataclass
class TrainSection:
    steps: int = 4000
    lr: float = 0.03
    momentum: float = 0.9
    labeled_batch: int = 16
    unlabeled_batch: int = 64
    ablation: str = "pedcc_kl_mmd"
    seed: int = 0
    eval_every: int = 500
    seeds: int = 3


@dataclass
class AugmentSection:
    policy: str = "default"


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    centroids: CentroidSection = field(default_factory=CentroidSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    output: OutputSection = field(default_factory=OutputSection)
    preset: str = ""

    # -- typed views ------------------------------------------------------------------
    def hyperparams(self) -> HyperParams:
        return HyperParams(**{f.name: getattr(self.loss, f.name) for f in fields(LossSection)})

    def solver(self) -> SolverConfig:
        c = self.centroids
        return SolverConfig(max_iters=c.max_iters, step_size=c.step_size, convergence_tol=c.tol,
                            force_exponent=c.force_exponent)

    def input_shape(self) -> tuple:
        return (3, 32, 32) if self.data.kind == "cifar10" else (self.data.input_dim,)

    def num_classes(self) -> int:
        return 10 if self.data.kind == "cifar10" else self.data.classes

    def model_config(self, seed_offset: int = 0) -> ModelConfig:
        m = self.model
        arch = m.arch
        if arch == "auto":
            arch = "conv_small" if self.data.kind == "cifar10" else "mlp"
        return ModelConfig(input_shape=self.input_shape(), arch=arch, hidden=m.hidden, widen=m.widen,
                           depth=m.depth, width=m.width, feature_dim=m.feature_dim,
                           num_classes=self.num_classes(), seed=m.seed + seed_offset)

    def policy(self) -> AugmentPolicy:
        spec = self.augment.policy.strip()
        if spec == "default":
            return AugmentPolicy.default_image() if self.data.kind == "cifar10" else AugmentPolicy.default_vector()
        return AugmentPolicy.from_spec(spec)

    def training_config(self, seed_offset: int = 0, hp: HyperParams | None = None,
                        ablation: str | None = None) -> TrainingConfig:
        t = self.train
        return TrainingConfig(total_steps=t.steps, base_lr=t.lr, momentum=t.momentum,
                              composition=(t.labeled_batch, t.unlabeled_batch), hp=hp or self.hyperparams(),
                              ablation=ablation or t.ablation, seed=t.seed + seed_offset,
                              eval_every=t.eval_every, policy=self.policy())

    def as_dict(self) -> dict:
        out = {"preset": self.preset}
        for key, (section, name, _) in KEYS.items():
            v = getattr(getattr(self, section), name)
            out[key] = list(v) if isinstance(v, tuple) else v
        return out

    def validate(self) -> None:
        """Build every typed view once so bad values fail now, and check referenced files exist."""
        if self.data.kind not in ("blobs", "cifar10", "csv"):
            raise ConfigError(f"data.kind must be blobs, cifar10 or csv, got {self.data.kind!r}")
        required = {"centroids.file": self.centroids.file}
        if self.data.kind == "cifar10":
            required["data.cifar_dir"] = self.data.cifar_dir
            if not self.data.cifar_dir:
                raise ConfigError("data.cifar_dir is required for data.kind = cifar10")
        if self.data.kind == "csv":
            for key in ("train_csv", "test_csv"):
                if not getattr(self.data, key):
                    raise ConfigError(f"data.{key} is required for data.kind = csv")
            required["data.train_csv"] = self.data.train_csv
            required["data.test_csv"] = self.data.test_csv
        for key, path in required.items():
            if path and not Path(path).exists():
                raise ConfigError(f"{key} refers to a missing path: {path}")
        try:
            self.hyperparams()
            self.solver()
            self.model_config()
            self.training_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.train.seeds < 1:
            raise ConfigError("train.seeds must be >= 1")


def _apply_preset(cfg: RunConfig, name: str, line: int | None, source: str) -> None:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}", line, source)
    hp = PRESETS[name]
    for f in fields(LossSection):
        setattr(cfg.loss, f.name, getattr(hp, f.name))
    cfg.preset = name


def _assign(cfg: RunConfig, key: str, value: str, line: int | None, source: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", line, source)
    section, name, parse = KEYS[key]
    try:
        setattr(getattr(cfg, section), name, parse(value))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line, source) from None


def _split(text: str, line: int | None, source: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected 'key = value', got {text!r}", line, source)
    key, value = text.split("=", 1)
    key, value = key.strip(), value.strip()
    if not key:
        raise ConfigError("empty key", line, source)
    return key, value


def parse_config(text: str, overrides: list[str] | None = None, source: str = "config",
                 validate: bool = True) -> RunConfig:
    cfg = RunConfig()
    assignments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = _split(stripped, lineno, source)
        if key == "preset":
            _apply_preset(cfg, value, lineno, source)
        else:
            assignments.append((key, value, lineno, source))
    for item in overrides or []:
        key, value = _split(item, None, "--set")
        if key == "preset":
            _apply_preset(cfg, value, None, "--set")
        else:
            assignments.append((key, value, None, "--set"))
    for key, value, lineno, src in assignments:
        _assign(cfg, key, value, lineno, src)
    if validate:
        cfg.validate()
    return cfg


def resolve_config_path(name: str) -> Path:
    """A file path, or the name of a bundled preset file (``blobs``, ``paper-cifar10``, ...)."""
    p = Path(name)
    if p.exists():
        return p
    bundled = PRESET_DIR / f"{name}.cfg"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"config {name!r} is neither a file nor a bundled preset")


def load_config(name: str, overrides: list[str] | None = None) -> RunConfig:
    path = resolve_config_path(name)
    return parse_config(path.read_text(encoding="utf-8"), overrides, source=str(path))


def with_changes(cfg: RunConfig, **sections) -> RunConfig:
    return replace(cfg, **sections)
