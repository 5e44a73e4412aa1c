# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``_pykernels`` exactly."""
import numpy as np
from libc.math cimport log, pow, sqrt


def pairwise_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    if b.shape[1] != d:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            o[i, j] = acc
    return out


def repulsion_forces(const double[:, ::1] x, double exponent):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double dist2, dist, coef, energy = 0.0
    forces = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] f = forces
    cdef double[::1] diff = np.empty(d, dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            dist2 = 0.0
            for k in range(d):
                diff[k] = x[i, k] - x[j, k]
                dist2 += diff[k] * diff[k]
            dist = sqrt(dist2)
            coef = 1.0 / pow(dist, exponent + 1.0)
            for k in range(d):
                f[i, k] += coef * diff[k]
                f[j, k] -= coef * diff[k]
            if exponent == 1.0:
                energy -= log(dist)
            else:
                energy += pow(dist, 1.0 - exponent) / (exponent - 1.0)
    return forces, energy
