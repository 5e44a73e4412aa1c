"""Numpy fallbacks for the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def pairwise_sqdist(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def repulsion_forces(x, exponent):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, 1.0)
    coef = dist ** -(exponent + 1.0)
    np.fill_diagonal(coef, 0.0)
    forces = np.einsum("ij,ijk->ik", coef, diff)
    iu = np.triu_indices(n, 1)
    pair = dist[iu]
    if exponent == 1.0:
        energy = float(-np.log(pair).sum())
    else:
        energy = float((pair ** (1.0 - exponent)).sum() / (exponent - 1.0))
    return forces, energy
