"""Uniform cell grid over particle positions.

The grid is built once per scheme step in plain numpy and then shared,
read-only, by both kernel backends. Particles are sorted by a linear cell
key so that the members of any cell form a contiguous slice that can be
located with ``searchsorted``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

# linear keys must fit comfortably in int64
_MAX_CELLS = 2**62


@dataclass(frozen=True)
class CellGrid:
    q: np.ndarray          # (N, d) positions, sorted by key
    w: np.ndarray          # (N,) weights, same order
    keys: np.ndarray       # (N,) int64, sorted ascending
    origin: np.ndarray     # (d,)
    shape: np.ndarray      # (d,) int64 cells per axis
    strides: np.ndarray    # (d,) int64
    offsets: np.ndarray    # (3**d, d) int64 neighbour offsets
    cell: float
    brute: bool            # single bucket holding everything

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


def neighbour_offsets(d: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64).reshape(-1, d)


def build_grid(q: np.ndarray, w: np.ndarray, cell: float) -> CellGrid:
    """Bucket positions ``q`` (N, d) with weights ``w`` into cells of side ``cell``.

    Falls back to a single bucket (brute-force summation) when the bounding
    box would need more cells than a 63-bit key can index.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    n, d = q.shape
    if cell <= 0:
        raise ValueError("cell size must be positive")
    if n == 0:
        return CellGrid(q, w, np.zeros(0, np.int64), np.zeros(d), np.ones(d, np.int64),
                        np.ones(d, np.int64), neighbour_offsets(d), float(cell), True)

    origin = q.min(axis=0)
    span = q.max(axis=0) - origin
    shape = np.floor(span / cell).astype(np.int64) + 1
    total = 1.0
    for s in shape:
        total *= float(s)
    if total >= _MAX_CELLS:
        order = np.arange(n)
        return CellGrid(q[order], w[order], np.zeros(n, np.int64), origin, np.ones(d, np.int64),
                        np.ones(d, np.int64), neighbour_offsets(d), float(cell), True)

    strides = np.ones(d, dtype=np.int64)
    for j in range(d - 2, -1, -1):
        strides[j] = strides[j + 1] * shape[j + 1]
    coords = np.floor((q - origin) / cell).astype(np.int64)
    np.clip(coords, 0, shape - 1, out=coords)
    keys = coords @ strides
    order = np.argsort(keys, kind="stable")
    return CellGrid(
        q=q[order], w=w[order], keys=keys[order], origin=origin, shape=shape,
        strides=strides, offsets=neighbour_offsets(d), cell=float(cell), brute=False,
    )
