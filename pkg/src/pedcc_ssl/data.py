"""Datasets, label splitting, augmentation and semi-supervised batch composition."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pedcc import FormatError, simplex_centroids

UNLABELED = -1
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

# Stream ids keep the labeled, unlabeled and augmentation draws independent.
_LABELED_STREAM, _UNLABELED_STREAM, _AUGMENT_STREAM = 11, 13, 17


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise ValueError(f"label out of range at index {int(np.flatnonzero(bad)[0])}")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == UNLABELED)

    def subset(self, idx) -> Dataset:
        return Dataset(self.samples[idx], self.labels[idx], self.split, self.num_classes)


@dataclass
class SemiBatch:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    u_aug: np.ndarray

    @property
    def M(self) -> int:
        return len(self.y)

    @property
    def S(self) -> int:
        return len(self.u)


# -- synthetic data -------------------------------------------------------------------
def gen_blobs(num_classes: int, input_dim: int, per_class_train: int, per_class_test: int,
              separation: float, seed: int) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian classes centred on a scaled regular simplex."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not separation > 0:
        raise ValueError("separation must be positive")
    if num_classes > input_dim + 1:
        raise ValueError(f"{num_classes} simplex means do not fit in {input_dim} dimensions")
    means = separation * simplex_centroids(num_classes, input_dim).points
    rng = np.random.default_rng(seed)

    def draw(per_class, split):
        labels = np.repeat(np.arange(num_classes), per_class)
        samples = means[labels] + rng.standard_normal((labels.size, input_dim))
        order = rng.permutation(labels.size)
        return Dataset(samples[order], labels[order], split, num_classes)

    return draw(per_class_train, "train"), draw(per_class_test, "test")


def blob_means(num_classes: int, input_dim: int, separation: float) -> np.ndarray:
    return separation * simplex_centroids(num_classes, input_dim).points


def split_labels(train: Dataset, labeled_per_class: int, seed: int) -> Dataset:
    """Keep ``labeled_per_class`` labels per class (seeded choice); mark the rest unlabeled."""
    rng = np.random.default_rng(seed)
    labels = np.full_like(train.labels, UNLABELED)
    for k in range(train.num_classes):
        idx = np.flatnonzero(train.labels == k)
        if idx.size < labeled_per_class:
            raise ValueError(f"class {k} has {idx.size} samples, {labeled_per_class} requested")
        keep = rng.permutation(idx)[:labeled_per_class]
        labels[keep] = k
    return Dataset(train.samples, labels, train.split, train.num_classes)


# -- CSV exchange -------------------------------------------------------------------------
def save_csv(ds: Dataset, path) -> None:
    flat = ds.samples.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for lab, row in zip(ds.labels, flat):
            w.writerow([int(lab)] + [format(float(v), ".17g") for v in row])


def load_csv(path, num_classes: int | None = None, split: str = "test") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise FormatError(f"{path}: line 1 must start with 'label'")
    width = len(rows[0]) - 1
    labels, samples = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 1:
            raise FormatError(f"{path}: line {lineno} has {len(row) - 1} features, expected {width}")
        try:
            labels.append(int(row[0]))
            samples.append([float(v) for v in row[1:]])
        except ValueError:
            raise FormatError(f"{path}: line {lineno} is not numeric") from None
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(np.array(samples).reshape(len(labels), width), labels, split, num_classes)


# -- CIFAR-10 binary --------------------------------------------------------------------------
def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (labels uint8[N], pixels uint8[N, 3072]) from one CIFAR-10 binary batch."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        expected = (len(raw) // CIFAR_RECORD + 1) * CIFAR_RECORD
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD} "
                          f"(expected {expected} bytes for a whole number of records)")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].copy()
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    return labels, recs[:, 1:].copy()


def write_cifar_records(path, labels: np.ndarray, pixels: np.ndarray) -> None:
    recs = np.concatenate([np.asarray(labels, np.uint8)[:, None], np.asarray(pixels, np.uint8)], axis=1)
    Path(path).write_bytes(recs.tobytes())


def load_cifar10(dir_path) -> tuple[Dataset, Dataset]:
    """Train and test splits, pixels scaled to [0, 1] then standardized per channel.

    Channel means and standard deviations come from the training split only.
    """
    d = Path(dir_path)

    def read(names):
        parts = [read_cifar_records(d / n) for n in names]
        labels = np.concatenate([p[0] for p in parts]).astype(np.int64)
        pixels = np.concatenate([p[1] for p in parts]).reshape(-1, *CIFAR_SHAPE) / 255.0
        return labels, pixels

    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing CIFAR-10 batch {d / name}")
    ytr, xtr = read(CIFAR_TRAIN_FILES)
    yte, xte = read(CIFAR_TEST_FILES)
    mean = xtr.mean(axis=(0, 2, 3), keepdims=True)
    std = xtr.std(axis=(0, 2, 3), keepdims=True)
    return (Dataset((xtr - mean) / std, ytr, "train", 10),
            Dataset((xte - mean) / std, yte, "test", 10))


# -- augmentation -------------------------------------------------------------------------------
IMAGE_OPS = ("horizontal_flip", "shift_crop", "brightness_contrast", "rotation", "cutout", "bounded_jitter")
VECTOR_OPS = ("bounded_jitter", "rotation")
# Upper bounds on magnitude: pixels for shift/cutout, radians for rotation.
MAGNITUDE_BOUNDS = {
    "horizontal_flip": 0.0, "shift_crop": 8.0, "brightness_contrast": 0.5,
    "rotation": np.pi / 6, "cutout": 16.0, "bounded_jitter": 10.0,
}


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple = field(default_factory=tuple)  # (name, probability, magnitude) triples

    def __post_init__(self):
        ops = tuple((str(n), float(p), float(mag)) for n, p, mag in self.ops)
        for name, p, mag in ops:
            if name not in MAGNITUDE_BOUNDS:
                raise ValueError(f"unknown augmentation op {name!r}")
            if not 0 <= p <= 1:
                raise ValueError(f"{name}: probability {p} outside [0, 1]")
            if not 0 <= mag <= MAGNITUDE_BOUNDS[name]:
                raise ValueError(f"{name}: magnitude {mag} outside [0, {MAGNITUDE_BOUNDS[name]}]")
        object.__setattr__(self, "ops", ops)

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(())

    @classmethod
    def default_image(cls) -> AugmentPolicy:
        return cls((("horizontal_flip", 0.5, 0.0), ("shift_crop", 1.0, 4.0),
                    ("brightness_contrast", 0.5, 0.2), ("cutout", 0.5, 8.0)))

    @classmethod
    def default_vector(cls, jitter: float = 0.5, angle: float = 0.2) -> AugmentPolicy:
        return cls((("bounded_jitter", 1.0, jitter), ("rotation", 0.5, angle)))

    def to_spec(self) -> str:
        return ";".join(f"{n}:{p:g}:{m:g}" for n, p, m in self.ops)

    @classmethod
    def from_spec(cls, spec: str) -> AugmentPolicy:
        spec = spec.strip()
        if spec in ("", "identity", "none"):
            return cls.identity()
        ops = []
        for item in spec.split(";"):
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ValueError(f"augmentation op {item!r} must be name:probability:magnitude")
            ops.append((parts[0], float(parts[1]), float(parts[2])))
        return cls(tuple(ops))


def _flip(x, mag, rng):
    return x[..., ::-1].copy()


def _shift_crop(x, mag, rng):
    pad = int(round(mag))
    if pad == 0:
        return x
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, dy:dy + x.shape[1], dx:dx + x.shape[2]].copy()


def _brightness_contrast(x, mag, rng):
    b, c = rng.uniform(-mag, mag, size=2)
    mean = x.mean()
    return (x - mean) * (1.0 + c) + mean + b


def _cutout(x, mag, rng):
    size = int(round(mag))
    if size == 0:
        return x
    h, w = x.shape[1:]
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    out = x.copy()
    out[:, max(cy - size // 2, 0):cy + (size + 1) // 2, max(cx - size // 2, 0):cx + (size + 1) // 2] = 0.0
    return out


def _rotate_image(x, mag, rng):
    angle = rng.uniform(-mag, mag)
    c, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    cos, sin = np.cos(angle), np.sin(angle)
    sy = cos * (yy - cy) - sin * (xx - cx) + cy
    sx = sin * (yy - cy) + cos * (xx - cx) + cx
    iy = np.clip(np.rint(sy).astype(int), 0, h - 1)
    ix = np.clip(np.rint(sx).astype(int), 0, w - 1)
    inside = (sy >= -0.5) & (sy <= h - 0.5) & (sx >= -0.5) & (sx <= w - 0.5)
    return np.where(inside, x[:, iy, ix], 0.0)


def _rotate_vector(x, mag, rng):
    """Rotate within one random coordinate plane by an angle in [-mag, mag]."""
    i, j = rng.choice(x.shape[0], size=2, replace=False)
    angle = rng.uniform(-mag, mag)
    out = x.copy()
    cos, sin = np.cos(angle), np.sin(angle)
    out[i], out[j] = cos * x[i] - sin * x[j], sin * x[i] + cos * x[j]
    return out


def _jitter(x, mag, rng):
    return x + rng.uniform(-mag, mag, size=x.shape)


_IMAGE_FNS = {"horizontal_flip": _flip, "shift_crop": _shift_crop, "brightness_contrast": _brightness_contrast,
              "rotation": _rotate_image, "cutout": _cutout, "bounded_jitter": _jitter}
_VECTOR_FNS = {"bounded_jitter": _jitter, "rotation": _rotate_vector}


def augment(sample: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply each op of ``policy`` with its probability; shape is preserved.

    Every op consumes one uniform draw for its coin flip whether or not it fires,
    so the random stream stays aligned across samples.
    """
    x = np.asarray(sample, dtype=np.float64)
    is_image = x.ndim == 3
    table = _IMAGE_FNS if is_image else _VECTOR_FNS
    if x.ndim not in (1, 3):
        raise ValueError(f"augment expects a vector or a (C, H, W) image, got shape {x.shape}")
    for name, p, mag in policy.ops:
        if name not in table:
            kind = "image" if is_image else "vector"
            raise ValueError(f"op {name!r} does not apply to {kind} samples")
        if name == "rotation" and not is_image and x.shape[0] < 2:
            raise ValueError("in-plane rotation needs at least 2 coordinates")
        if rng.random() < p:
            x = table[name](x, mag, rng)
    return x


# -- batch composition ---------------------------------------------------------------------
def _window(pool: np.ndarray, count: int, step: int, seed: int, stream: int) -> np.ndarray:
    """Entries ``[step*count, (step+1)*count)`` of an endless sequence of seeded pool permutations."""
    if count == 0:
        return pool[:0]
    n = pool.size
    start = step * count
    out = []
    while len(out) < count:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
        take = min(count - len(out), n - offset)
        out.extend(perm[offset:offset + take])
    return pool[np.array(out)]


def compose_batch(ds: Dataset, composition: tuple[int, int], policy: AugmentPolicy, step: int, seed: int) -> SemiBatch:
    """The (M labeled, S unlabeled + S augmented) batch for ``step``; a pure function of its inputs."""
    m, s = composition
    lab, unl = ds.labeled_indices, ds.unlabeled_indices
    if lab.size < m:
        raise ValueError(f"batch needs {m} labeled samples, dataset has {lab.size}")
    if unl.size < s:
        raise ValueError(f"batch needs {s} unlabeled samples, dataset has {unl.size}")
    li = _window(lab, m, step, seed, _LABELED_STREAM)
    ui = _window(unl, s, step, seed, _UNLABELED_STREAM)
    rng = np.random.default_rng([seed, _AUGMENT_STREAM, step])
    u = ds.samples[ui]
    u_aug = np.stack([augment(row, policy, rng) for row in u]) if s else u.copy()
    return SemiBatch(ds.samples[li], ds.labels[li], u, u_aug)
