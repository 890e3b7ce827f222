"""Hot loops: neighbour-pruned interaction field and the batched RK advance.

Two interchangeable backends exist. The numba one is used when numba is
importable unless ``DEFHAM_DISABLE_NUMBA`` is set to a truthy value; the
pure-numpy one is always available as :mod:`defham.kernels._numpy`.
"""
from __future__ import annotations

import os

from . import _numpy as numpy_backend
from ._numpy import ALIVE, ESCAPED, NONFINITE, brute_field, potential_grad, potential_value
from .grid import CellGrid, build_grid

_disabled = os.environ.get("DEFHAM_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

numba_backend = None
if not _disabled:
    try:
        from . import _numba as numba_backend
    except ImportError:  # pragma: no cover - numba missing
        numba_backend = None

backend = numba_backend if numba_backend is not None else numpy_backend
BACKEND_NAME = "numba" if backend is numba_backend else "numpy"


def field_query(x, grid, kind, kp):
    return backend.field_query(x, grid, kind, kp)


def advance(P, Q, S, active, dt, tol, xmax, hmin, hinit, grid, kind, kp, pp):
    return backend.advance(P, Q, S, active, dt, tol, xmax, hmin, hinit, grid, kind, kp, pp)


def set_threads(n: int) -> None:
    if numba_backend is not None and n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


__all__ = [
    "ALIVE", "ESCAPED", "NONFINITE", "BACKEND_NAME", "CellGrid", "advance", "brute_field",
    "build_grid", "field_query", "numba_backend", "numpy_backend", "potential_grad",
    "potential_value", "set_threads",
]
