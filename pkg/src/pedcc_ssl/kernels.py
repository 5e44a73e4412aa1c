"""Kernel dispatch: compiled Cython loops when built, numpy otherwise.

Set ``PEDCC_SSL_PURE=1`` to force the numpy path. ``BACKEND`` names the
implementation actually in use.
"""
import os

from . import _pykernels

if os.environ.get("PEDCC_SSL_PURE", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

pairwise_sqdist = _impl.pairwise_sqdist
repulsion_forces = _impl.repulsion_forces

__all__ = ["BACKEND", "pairwise_sqdist", "repulsion_forces"]
