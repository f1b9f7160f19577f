"""
Portable 16x16 tile kernels and the elementwise operators used by the update rules.

Matrices are split into 16x16 tiles, zero padded past their logical extent, and
multiplied tile by tile with D = A.B + C, accumulating over the inner tile index in
ascending order. Leading axes are treated as a stack of independent matrices, so a
wave of batches goes through one kernel call.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

TILE = 16


class ShapeError(ValueError):
    """Raised when kernel operands have incompatible shapes."""


def _tiles(n: int) -> int:
    return -(-n // TILE)


def tile_mma(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    D = A.B + C on 16x16 tiles (or stacks of them).

    Args:
        a, b, c: arrays of shape (..., 16, 16)

    Returns:
        D with the broadcast leading shape
    """
    for name, t in (("a", a), ("b", b), ("c", c)):
        if t.shape[-2:] != (TILE, TILE):
            raise ShapeError(f"tile {name} has shape {t.shape[-2:]}, expected (16, 16)")
    return np.matmul(a, b) + c


@dataclass
class TiledMatrix:
    """
    A (stack of) matrices stored as a zero-padded grid of 16x16 tiles.

    Attributes:
        data: (..., P*16, Q*16) padded array
        rows: logical row count
        cols: logical column count
        row_mask: optional (..., rows) validity of logical rows; invalid rows are zero
    """

    data: np.ndarray
    rows: int
    cols: int
    row_mask: Optional[np.ndarray] = None

    @classmethod
    def from_array(cls, array: np.ndarray, row_mask: Optional[np.ndarray] = None) -> "TiledMatrix":
        """Pad an (..., rows, cols) array to whole tiles; masked-out rows are zeroed."""
        array = np.asarray(array)
        if array.ndim < 2:
            raise ShapeError("need at least a 2-d array")
        rows, cols = array.shape[-2:]
        data = np.zeros(array.shape[:-2] + (_tiles(rows) * TILE, _tiles(cols) * TILE), dtype=array.dtype)
        if row_mask is not None:
            data[..., :rows, :cols] = np.where(row_mask[..., None], array, 0)
        else:
            data[..., :rows, :cols] = array
        return cls(data, rows, cols, row_mask)

    @property
    def grid(self) -> tuple:
        return _tiles(self.rows), _tiles(self.cols)

    def tile(self, p: int, q: int) -> np.ndarray:
        return self.data[..., p * TILE:(p + 1) * TILE, q * TILE:(q + 1) * TILE]

    def to_array(self) -> np.ndarray:
        return self.data[..., :self.rows, :self.cols]

    def padding_is_zero(self) -> bool:
        pad_rows = self.data[..., self.rows:, :]
        pad_cols = self.data[..., :, self.cols:]
        return not (np.any(pad_rows) or np.any(pad_cols))


def matmul_tiled(x: TiledMatrix, y: TiledMatrix) -> TiledMatrix:
    """
    Tiled product of an M x K and a K x R matrix.

    Output tile (i, q) accumulates tile_mma(x(i, p), y(p, q), .) for p ascending,
    starting from a zero tile.
    """
    if x.cols != y.rows:
        raise ShapeError(f"inner dimensions differ: {x.cols} vs {y.rows}")

    row_tiles, inner_tiles = x.grid
    col_tiles = y.grid[1]
    lead = np.broadcast_shapes(x.data.shape[:-2], y.data.shape[:-2])
    dtype = np.result_type(x.data, y.data)

    # row tiles become a stack axis: (..., row_tiles, 16, K_padded)
    xs = x.data.reshape(x.data.shape[:-2] + (row_tiles, TILE, inner_tiles * TILE))
    out = np.zeros(lead + (row_tiles, TILE, col_tiles * TILE), dtype=dtype)
    zero = np.zeros(lead + (row_tiles, TILE, TILE), dtype=dtype)

    for q in range(col_tiles):
        acc = zero
        for p in range(inner_tiles):
            a = xs[..., p * TILE:(p + 1) * TILE]
            b = y.tile(p, q)[..., None, :, :]
            acc = tile_mma(a, b, acc)
        out[..., q * TILE:(q + 1) * TILE] = acc
    out = out.reshape(lead + (row_tiles * TILE, col_tiles * TILE))
    return TiledMatrix(out, x.rows, y.cols, x.row_mask)


# ============================================================================
# ELEMENTWISE OPERATORS
# ============================================================================


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of equally shaped matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def r_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Row-wise dot product: out[m] = a[m, :] . b[:, m].

    Args:
        a: (..., M, R)
        b: (..., R, M)

    Returns:
        (..., M, 1) column
    """
    if a.shape[-2:] != b.shape[-2:][::-1]:
        raise ShapeError(f"r_dot needs M x R and R x M, got {a.shape} and {b.shape}")
    return np.sum(a * np.swapaxes(b, -1, -2), axis=-1, keepdims=True)


def r_hadamard(v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Column r of the output is v * b[:, r].

    Args:
        v: (..., M, 1) column
        b: (..., M, R)
    """
    if v.shape[-1] != 1 or v.shape[-2] != b.shape[-2]:
        raise ShapeError(f"r_hadamard needs an M x 1 column and M x R matrix, got {v.shape} and {b.shape}")
    return v * b


# ============================================================================
# BACKENDS
# ============================================================================


class KernelBackend:
    """
    Base class for matrix product backends.
    Products take (..., M, K) and (..., K, R) arrays and return (..., M, R).
    """

    name = "base"

    def matmul(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement matmul")


class TiledKernels(KernelBackend):
    """Every product goes through 16x16 tiles."""

    name = "tiled"

    def matmul(self, x, y):
        if x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"inner dimensions differ: {x.shape} vs {y.shape}")
        return matmul_tiled(TiledMatrix.from_array(x), TiledMatrix.from_array(y)).to_array()


class FlatKernels(KernelBackend):
    """Plain dense products, no tiling."""

    name = "flat"

    def matmul(self, x, y):
        if x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"inner dimensions differ: {x.shape} vs {y.shape}")
        return np.matmul(x, y)


def create_kernels(name: str = "tiled") -> KernelBackend:
    """
    Factory for a kernel backend by name.

    Args:
        name: 'tiled' or 'flat'

    Returns:
        KernelBackend instance
    """
    if name == "tiled":
        return TiledKernels()
    elif name == "flat":
        return FlatKernels()
    raise ValueError(f"unknown kernel backend '{name}'")
