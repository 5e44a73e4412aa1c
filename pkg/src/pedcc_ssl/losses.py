"""Loss terms for centroid-constrained semi-supervised training.

Labeled rows: additive-margin softmax over cosine scores plus the squared
distance from each normalized feature to its class centroid, combined as
``lambda2 * am + lambda1 * mse ** (1 / n_root)``. Unlabeled rows: KL
consistency between original and augmented predictions (teacher side frozen)
plus the unbiased Gaussian-kernel MMD between features and centroids.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .pedcc import CentroidSet
from .tensor import Tensor

COS_BAND = 1e-6
PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class HyperParams:
    """Loss weights and shapes. Defaults are the CIFAR-10 row of the reference settings."""

    s: float = 7.5
    m: float = 0.35
    n_root: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 400.0
    lambda4: float = 0.2
    sigma: float | None = None  # None: median heuristic per batch
    normalize_mse: bool = True

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not 0 <= self.m < 1:
            raise ValueError(f"m must lie in [0, 1), got {self.m}")
        if not self.n_root >= 1:
            raise ValueError(f"n_root must be >= 1, got {self.n_root}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def replace(self, **changes) -> HyperParams:
        return HyperParams(**{**asdict(self), **changes})


PRESETS = {
    "paper-cifar10": HyperParams(s=7.5, m=0.35, n_root=1, lambda1=1, lambda2=1, lambda3=400, lambda4=0.2),
    "paper-svhn": HyperParams(s=7.5, m=0.35, n_root=1, lambda1=1, lambda2=1, lambda3=1600, lambda4=0.04),
}


@dataclass(frozen=True)
class LossBreakdown:
    l1_mse: float
    l2_am: float
    l3_kl: float
    l4_mmd: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def am_softmax_loss(cosines: Tensor, labels, s: float, m: float) -> Tensor:
    """Mean additive-margin softmax cross-entropy over cosine scores."""
    cosines = T.as_tensor(cosines)
    if cosines.ndim != 2:
        raise T.DimensionError(f"cosines must be M x C, got {cosines.shape}")
    labels = _check_labels(labels, cosines.shape[1])
    if labels.size != cosines.shape[0]:
        raise ValueError(f"{labels.size} labels for {cosines.shape[0]} rows")
    if np.any(np.abs(cosines.data) > 1 + COS_BAND):
        raise ValueError("cosines must lie in [-1, 1]")
    onehot = _one_hot(labels, cosines.shape[1])
    logits = T.scale(T.sub(cosines, onehot * m), s)
    target = T.sum(T.mul(logits, onehot), axis=1, keepdims=True)
    per_row = T.sub(T.logsumexp(logits, axis=1), target)
    return T.mean(per_row)


def pedcc_mse_loss(features: Tensor, labels, centroids: CentroidSet) -> Tensor:
    """Mean squared Euclidean distance from each feature row to its class centroid."""
    features = T.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != centroids.dim:
        raise ValueError(f"features {features.shape} do not match centroid dim {centroids.dim}")
    labels = _check_labels(labels, centroids.num_classes)
    if labels.size != features.shape[0]:
        raise ValueError(f"{labels.size} labels for {features.shape[0]} rows")
    target = centroids.points[labels]
    diff = T.sub(features, target)
    return T.scale(T.sum(T.mul(diff, diff)), 1.0 / features.shape[0])


def root_loss(l1: Tensor, n_root: float) -> Tensor:
    """``l1 ** (1/n_root)`` with subgradient 0 at l1 == 0."""
    l1 = T.as_tensor(l1)
    if l1.item() < 0:
        raise T.ContractError(f"root of a negative loss {l1.item()}")
    if n_root == 1:
        return l1
    if l1.item() == 0:
        return T.scale(l1, 0.0)
    return T.power(l1, 1.0 / n_root)


def labeled_loss(l1: Tensor, l2: Tensor, hp: HyperParams) -> Tensor:
    return T.add(T.scale(l2, hp.lambda2), T.scale(root_loss(l1, hp.n_root), hp.lambda1))


def kl_consistency_loss(p_teacher: Tensor, p_student: Tensor) -> Tensor:
    """Mean KL(teacher || student) over rows; the teacher must be a constant."""
    p_teacher, p_student = T.as_tensor(p_teacher), T.as_tensor(p_student)
    if p_teacher.shape != p_student.shape or p_teacher.ndim != 2:
        raise T.DimensionError(f"KL needs matching S x C inputs, got {p_teacher.shape} and {p_student.shape}")
    if p_teacher.requires_grad:
        raise T.ContractError("teacher probabilities must pass through stop_gradient")
    for name, p in (("teacher", p_teacher), ("student", p_student)):
        if np.any(p.data < 0) or np.any(np.abs(p.data.sum(axis=1) - 1) > ROW_SUM_TOL):
            raise ValueError(f"{name} rows must be probability vectors")
    pt = p_teacher.data
    log_pt = np.log(np.maximum(pt, PROB_FLOOR))
    log_ps = T.log(T.clamp_min(p_student, PROB_FLOOR))
    # 0 * log(0 / q) == 0: zero teacher mass contributes nothing.
    weighted = T.mul(pt, T.sub(log_pt, log_ps))
    return T.scale(T.sum(weighted), 1.0 / pt.shape[0])


def gaussian_kernel(x, y, sigma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * sigma * sigma)))


def median_sigma(*samples) -> float:
    """Bandwidth with ``2 sigma^2`` equal to the median pairwise squared distance of the pooled rows."""
    pooled = np.ascontiguousarray(np.vstack([np.asarray(s, dtype=np.float64) for s in samples]))
    d2 = kernels.pairwise_sqdist(pooled, pooled)
    med = float(np.median(d2[np.triu_indices(pooled.shape[0], 1)]))
    return float(np.sqrt(med / 2.0)) if med > 0 else 1.0


def _kernel_matrix(a, b, sigma: float) -> Tensor:
    return T.exp(T.scale(T.pairwise_sqdist(a, b), -1.0 / (2.0 * sigma * sigma)))


def _offdiag_mean(k: Tensor) -> Tensor:
    n = k.shape[0]
    mask = 1.0 - np.eye(n)
    return T.scale(T.sum(T.mul(k, mask)), 1.0 / (n * (n - 1)))


def mmd_loss(z_u: Tensor, centroids, sigma: float | None = None) -> Tensor:
    """Unbiased squared MMD between feature rows and centroid rows (Gaussian kernel).

    ``centroids`` may be a :class:`CentroidSet` or any constant matrix; it
    receives no gradient. ``sigma=None`` uses :func:`median_sigma`.
    """
    z_u = T.as_tensor(z_u)
    pts = centroids.points if isinstance(centroids, CentroidSet) else np.asarray(T.as_tensor(centroids).data)
    if z_u.ndim != 2 or z_u.shape[1] != pts.shape[1]:
        raise ValueError(f"features {z_u.shape} do not match centroids {pts.shape}")
    s, c = z_u.shape[0], pts.shape[0]
    if s < 2 or c < 2:
        raise ValueError(f"unbiased MMD needs at least 2 rows per sample, got S={s}, C={c}")
    if sigma is None:
        sigma = median_sigma(z_u.data, pts)
    kzz = _offdiag_mean(_kernel_matrix(z_u, z_u, sigma))
    kcc = _offdiag_mean(_kernel_matrix(pts, pts, sigma))
    kzc = T.scale(T.sum(_kernel_matrix(z_u, pts, sigma)), 2.0 / (s * c))
    return T.sub(T.add(kzz, kcc), kzc)


def unlabeled_loss(l3: Tensor, l4: Tensor, hp: HyperParams) -> Tensor:
    return T.add(T.scale(l3, hp.lambda3), T.scale(l4, hp.lambda4))


def total_loss(features_x: Tensor, cosines_x: Tensor, labels, p_u_teacher: Tensor | None,
               p_u_student: Tensor | None, features_u: Tensor | None, centroids: CentroidSet,
               hp: HyperParams) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of all four terms and the breakdown of their values.

    ``features_x`` / ``features_u`` are raw backbone outputs; they are
    row-normalized here (MSE normalization follows ``hp.normalize_mse``).
    Terms with zero weight, or without the inputs they need, are skipped and
    reported as 0.
    """
    zero = Tensor(0.0)
    l1 = l2 = l3 = l4 = zero
    if labels is not None and len(labels):
        fx = T.l2_normalize_rows(features_x) if hp.normalize_mse else T.as_tensor(features_x)
        if hp.lambda1 > 0:
            l1 = pedcc_mse_loss(fx, labels, centroids)
        if hp.lambda2 > 0:
            l2 = am_softmax_loss(cosines_x, labels, hp.s, hp.m)
    if p_u_student is not None and hp.lambda3 > 0:
        l3 = kl_consistency_loss(p_u_teacher, p_u_student)
    if features_u is not None and hp.lambda4 > 0:
        l4 = mmd_loss(T.l2_normalize_rows(features_u), centroids, hp.sigma)
    total = T.add(labeled_loss(l1, l2, hp), unlabeled_loss(l3, l4, hp))
    parts = LossBreakdown(l1.item(), l2.item(), l3.item(), l4.item(), total.item())
    return total, parts
