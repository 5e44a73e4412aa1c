"""Predefined evenly-distributed class centroids on the unit hypersphere.

Two generators:

* :func:`generate_pedcc` -- charge-repulsion equilibrium. Points repel with
  force ``1 / dist**force_exponent``; each iteration moves every point along
  the tangential part of its net force and projects back onto the sphere.
* :func:`simplex_centroids` -- the closed-form regular simplex, which is the
  optimum whenever ``C <= D + 1`` and serves as an oracle for the solver.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

HEADER_TAG = "PEDCC"
FORMAT_VERSION = 1
LOAD_NORM_TOL = 1e-6
UNCONVERGED = "unconverged"  # optional 7th header token
_COINCIDE = 1e-9
_MAX_GROWTH = 1000.0
_STALL = 1e-12
_ENERGY_SLACK = 64 * np.finfo(np.float64).eps


class FormatError(ValueError):
    """A centroid or checkpoint file does not follow the documented layout."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20000
    step_size: float = 0.05
    convergence_tol: float = 1e-9
    force_exponent: float = 2.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for name in ("step_size", "convergence_tol", "force_exponent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class CentroidSet:
    """C unit-norm class centroids in D dimensions. ``points`` is read-only."""

    points: np.ndarray
    seed: int = 0
    method: str = "repulsion"
    converged: bool = True
    residual: float = 0.0
    iterations: int = 0
    monotone: bool = True
    history: tuple = field(default=(), repr=False)
    energies: tuple = field(default=(), repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"centroid matrix must be 2-D, got shape {pts.shape}")
        c, d = pts.shape
        if c < 2 or d < 2:
            raise ValueError(f"need at least 2 classes and 2 dimensions, got C={c}, D={d}")
        if self.method not in ("repulsion", "simplex"):
            raise ValueError(f"unknown method {self.method!r}")
        if c > 2 * d:
            warnings.warn(f"{c} centroids in {d} dimensions: separation will be poor", stacklevel=3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if min_pairwise_distance(self) <= 0:
            raise ValueError("centroid rows must be pairwise distinct")

    @property
    def num_classes(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def gram(self) -> np.ndarray:
        return self.points @ self.points.T


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True))


def _tangential(forces: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forces - (forces * x).sum(axis=1, keepdims=True) * x


def _separate_coincident(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    for _ in range(100):
        d2 = kernels.pairwise_sqdist(x, x)
        d2[np.diag_indices(n)] = np.inf
        bad = np.argwhere(d2 < _COINCIDE ** 2)
        if bad.size == 0:
            return x
        for j in sorted({max(i, k) for i, k in bad}):
            x[j] = rng.standard_normal(x.shape[1])
        x = _normalize(x)
    raise RuntimeError("could not separate coincident initial points")


def random_init(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """The seeded starting configuration used by :func:`generate_pedcc`."""
    rng = np.random.default_rng(seed)
    x = _normalize(rng.standard_normal((num_classes, dim)))
    return _separate_coincident(x, rng)


def _residuals(tang: np.ndarray) -> tuple[float, float]:
    """(largest per-point tangential force norm, root-sum-square over all points)."""
    sq = (tang * tang).sum(axis=1)
    return float(np.sqrt(sq.max())), float(np.sqrt(sq.sum()))


def generate_pedcc(num_classes: int, dim: int, seed: int = 0, cfg: SolverConfig | None = None) -> CentroidSet:
    """Relax ``num_classes`` repelling charges on the (dim-1)-sphere to equilibrium.

    Each trial move follows the tangential forces. A move that lowers the
    potential energy by more than summation roundoff is accepted. A move whose
    energy change is lost in roundoff is accepted only if it lowers the total
    tangential force norm, which keeps the solver converging once energy can
    no longer resolve progress. Anything else halves the step; accepted moves
    let it grow by 1.5x. Clear energy descent is allowed to raise the force
    norm so the solver can leave saddle configurations (for example a square
    inside a great circle when a tetrahedron is wanted).

    ``history`` holds the largest per-point tangential force norm after each
    accepted move and ``monotone`` says whether it never increased;
    ``energies`` is the matching potential energy trace. Stops once
    that norm is below ``cfg.convergence_tol``, after ``cfg.max_iters`` trial
    moves, or when the step underflows.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError(f"need C >= 2 and D >= 2, got C={num_classes}, D={dim}")
    cfg = cfg or SolverConfig()
    p = cfg.force_exponent
    x = random_init(num_classes, dim, seed)
    forces, energy = kernels.repulsion_forces(x, p)
    tang = _tangential(forces, x)
    residual, total = _residuals(tang)
    history = [residual]
    energies = [energy]
    step = cfg.step_size
    it = 0
    while it < cfg.max_iters and residual >= cfg.convergence_tol:
        it += 1
        cand = _normalize(x + step * tang)
        c_forces, c_energy = kernels.repulsion_forces(cand, p)
        c_tang = _tangential(c_forces, cand)
        c_residual, c_total = _residuals(c_tang)
        slack = _ENERGY_SLACK * abs(energy)
        if c_energy > energy + slack or (c_energy >= energy - slack and c_total > total):
            step *= 0.5
            if step < cfg.step_size * _STALL:
                break
            continue
        x, energy, tang, residual, total = cand, c_energy, c_tang, c_residual, c_total
        history.append(residual)
        energies.append(energy)
        step = min(step * 1.5, cfg.step_size * _MAX_GROWTH)
    monotone = bool(np.all(np.diff(history) <= 0))
    return CentroidSet(x, seed=seed, method="repulsion", converged=residual < cfg.convergence_tol,
                       residual=residual, iterations=it, history=tuple(history), monotone=monotone,
                       energies=tuple(energies))


def simplex_centroids(num_classes: int, dim: int) -> CentroidSet:
    """Vertices of the regular simplex: pairwise dot products are exactly ``-1/(C-1)``.

    The centered standard basis of R^C is expressed in an orthonormal (Helmert)
    basis of the hyperplane orthogonal to the all-ones vector, giving C-1
    coordinates, then zero-padded to ``dim``.
    """
    c = num_classes
    if c < 2 or dim < 2:
        raise ValueError(f"need C >= 2 and D >= 2, got C={c}, D={dim}")
    if c > dim + 1:
        raise ValueError(f"a regular simplex with {c} vertices does not fit in {dim} dimensions")
    basis = np.zeros((c - 1, c))
    for k in range(1, c):
        basis[k - 1, :k] = 1.0
        basis[k - 1, k] = -k
        basis[k - 1] /= np.sqrt(k * (k + 1))
    centered = np.eye(c) - 1.0 / c
    coords = centered @ basis.T
    coords = _normalize(coords)
    pts = np.zeros((c, dim))
    pts[:, : c - 1] = coords
    return CentroidSet(pts, seed=0, method="simplex")


def min_pairwise_distance(cs) -> float:
    """Smallest Euclidean distance between two distinct rows."""
    pts = cs.points if isinstance(cs, CentroidSet) else np.asarray(cs, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    d2 = kernels.pairwise_sqdist(np.ascontiguousarray(pts), np.ascontiguousarray(pts))
    iu = np.triu_indices(n, 1)
    return float(np.sqrt(d2[iu].min()))


# -- file format ----------------------------------------------------------------
def format_row(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def dumps_centroids(cs: CentroidSet) -> str:
    header = f"{HEADER_TAG} {FORMAT_VERSION} {cs.num_classes} {cs.dim} {cs.seed} {cs.method}"
    lines = [header if cs.converged else header + " " + UNCONVERGED]
    lines.extend(format_row(row) for row in cs.points)
    return "\n".join(lines) + "\n"


def save_centroids(cs: CentroidSet, path) -> None:
    Path(path).write_text(dumps_centroids(cs), encoding="utf-8", newline="\n")


def parse_centroids(lines: list[str], first_lineno: int = 1) -> CentroidSet:
    """Parse a centroid block; ``first_lineno`` is the file line of the header."""
    if not lines:
        raise FormatError(f"line {first_lineno}: missing centroid header")
    head = lines[0].split()
    if len(head) not in (6, 7) or head[0] != HEADER_TAG or head[6:] not in ([], [UNCONVERGED]):
        raise FormatError(f"line {first_lineno}: malformed header {lines[0]!r}")
    try:
        version, c, d, seed = (int(v) for v in head[1:5])
    except ValueError:
        raise FormatError(f"line {first_lineno}: non-integer field in header {lines[0]!r}") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"line {first_lineno}: unsupported version {version}")
    method = head[5]
    if len(lines) - 1 < c:
        raise FormatError(f"line {first_lineno}: header declares {c} rows, file has {len(lines) - 1}")
    pts = np.empty((c, d))
    for i in range(c):
        lineno = first_lineno + 1 + i
        fields = lines[1 + i].split(" ")
        if len(fields) != d:
            raise FormatError(f"line {lineno}: row {i} has {len(fields)} values, expected {d}")
        try:
            pts[i] = [float(v) for v in fields]
        except ValueError:
            raise FormatError(f"line {lineno}: row {i} contains a non-numeric value") from None
        if not np.isfinite(pts[i]).all():
            raise FormatError(f"line {lineno}: row {i} contains a non-finite value")
        norm = float(np.sqrt(pts[i] @ pts[i]))
        if abs(norm - 1.0) > LOAD_NORM_TOL:
            raise FormatError(f"line {lineno}: row {i} has norm {norm!r}, expected 1")
    try:
        return CentroidSet(pts, seed=seed, method=method, converged=len(head) == 6)
    except ValueError as exc:
        raise FormatError(f"line {first_lineno}: {exc}") from None


def load_centroids(path) -> CentroidSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    cs = parse_centroids(lines)
    extra = len(lines) - 1 - cs.num_classes
    if extra:
        raise FormatError(f"line {cs.num_classes + 2}: {extra} unexpected trailing line(s)")
    return cs
