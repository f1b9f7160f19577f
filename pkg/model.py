"""
FastTucker model: factor matrices A^(n) (I_n x J_n) and core matrices B^(n) (J_n x R).

Element prediction is x = sum_r prod_n (a^(n)_{i_n,:} . b^(n)_{:,r}). The dense
helpers (materialize_core, n_mode_product, reconstruct_dense) are small-scale
oracles for checking the sparse paths.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"FTKP1\n"
MAX_DENSE_CELLS = 10**6


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


@dataclass
class Hyperparams:
    """SGD hyperparameters shared by every variant."""

    lr_a: float = 1e-3
    lr_b: float = 1e-3
    reg_a: float = 1e-4
    reg_b: float = 1e-4
    epochs: int = 50
    batch_size: int = 16

    def validate(self):
        if self.lr_a <= 0 or self.lr_b <= 0:
            raise ValueError("learning rates must be positive")
        if self.reg_a < 0 or self.reg_b < 0:
            raise ValueError("regularization must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


class Model:
    """
    Factor and core matrices of a FastTucker decomposition.

    Args:
        factors: A^(1)..A^(N), shapes (I_n, J_n)
        cores: B^(1)..B^(N), shapes (J_n, R)
    """

    def __init__(self, factors: Sequence[np.ndarray], cores: Sequence[np.ndarray]):
        if len(factors) != len(cores) or not factors:
            raise ValueError("need one core matrix per factor matrix")
        factors = [np.ascontiguousarray(a) for a in factors]
        cores = [np.ascontiguousarray(b) for b in cores]
        rank = cores[0].shape[1]
        for n, (a, b) in enumerate(zip(factors, cores)):
            if a.ndim != 2 or b.ndim != 2:
                raise ValueError(f"mode {n}: factor and core must be matrices")
            if a.shape[1] != b.shape[0]:
                raise ValueError(
                    f"mode {n}: factor has {a.shape[1]} columns but core has {b.shape[0]} rows"
                )
            if b.shape[1] != rank:
                raise ValueError(f"mode {n}: core has {b.shape[1]} columns, expected {rank}")
        self.factors: List[np.ndarray] = factors
        self.cores: List[np.ndarray] = cores

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple:
        return tuple(a.shape[0] for a in self.factors)

    @property
    def ranks(self) -> tuple:
        return tuple(a.shape[1] for a in self.factors)

    @property
    def rank(self) -> int:
        return self.cores[0].shape[1]

    @property
    def dtype(self):
        return self.factors[0].dtype

    def copy(self) -> "Model":
        return Model([a.copy() for a in self.factors], [b.copy() for b in self.cores])

    def astype(self, dtype) -> "Model":
        return Model(
            [a.astype(dtype) for a in self.factors], [b.astype(dtype) for b in self.cores]
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(m)) for m in self.factors + self.cores)


def init_model(
    dims: Sequence[int],
    ranks: Sequence[int],
    rank: int,
    seed: int,
    scale: float = 1.0,
    dtype=np.float32,
) -> Model:
    """
    Random model with entries i.i.d. uniform on [0, scale).

    All factor matrices are drawn first, then all core matrices.

    Args:
        dims: I_1..I_N
        ranks: J_1..J_N
        rank: R
        seed: Random seed
        scale: Upper bound of the uniform draw
        dtype: Storage precision (float32 for training, float64 for oracles)

    Returns:
        Model
    """
    if len(dims) != len(ranks):
        raise ValueError("dims and ranks must have the same length")
    if min(dims) < 1 or min(ranks) < 1 or rank < 1:
        raise ValueError("dims and ranks must be positive")
    if not scale > 0:
        raise ValueError("scale must be positive")

    rng = np.random.default_rng(seed)
    factors = [rng.uniform(0.0, scale, size=(i, j)).astype(dtype) for i, j in zip(dims, ranks)]
    cores = [rng.uniform(0.0, scale, size=(j, rank)).astype(dtype) for j in ranks]
    return Model(factors, cores)


def default_init_scale(values: np.ndarray, ranks: Sequence[int], rank: int) -> float:
    """
    Scale s for which a uniform [0, s) model predicts the data's mean magnitude.

    With independent uniform entries E[a.b_r] = J_n s^2 / 4, hence
    E[x] = R prod_n (J_n s^2 / 4); solve E[x] = mean|x| for s.

    Args:
        values: Training values
        ranks: J_1..J_N
        rank: R

    Returns:
        Positive scale
    """
    order = len(ranks)
    mean_abs = float(np.mean(np.abs(values))) if len(values) else 0.0
    if mean_abs <= 0.0:
        logger.warning("Training values are all zero; using init scale 1e-3")
        return 1e-3
    log_s = (order * np.log(4.0) + np.log(mean_abs) - np.log(rank) - np.sum(np.log(ranks))) / (
        2 * order
    )
    return float(np.exp(log_s))


# ============================================================================
# PREDICTION
# ============================================================================


def predict_element(model: Model, index: Sequence[int]) -> float:
    """
    Predict one element (0-based index tuple).

    Args:
        model: Model
        index: i_1..i_N

    Returns:
        sum_r prod_n (a^(n)_{i_n,:} . b^(n)_{:,r})
    """
    if len(index) != model.order:
        raise IndexError(f"index has {len(index)} modes, model has {model.order}")
    product = None
    for n, i in enumerate(index):
        if not 0 <= i < model.dims[n]:
            raise IndexError(f"index {i} out of range for mode {n} (dim {model.dims[n]})")
        c = model.factors[n][i] @ model.cores[n]
        product = c if product is None else product * c
    return float(product.sum())


def predict_entries(model: Model, indices: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """
    Vectorized predict_element over rows of an (nnz, N) index array.

    Returns:
        (nnz,) predictions in the model's precision
    """
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(indices.shape[0], dtype=model.dtype)
    for start in range(0, indices.shape[0], chunk):
        rows = indices[start:start + chunk]
        product = None
        for n in range(model.order):
            c = model.factors[n][rows[:, n]] @ model.cores[n]
            product = c if product is None else product * c
        out[start:start + chunk] = product.sum(axis=1)
    return out


# ============================================================================
# DENSE ORACLES
# ============================================================================


def materialize_core(model: Model, max_cells: int = MAX_DENSE_CELLS) -> np.ndarray:
    """
    Dense core G[j_1..j_N] = sum_r prod_n b^(n)_{j_n,r}.

    Raises:
        ValueError: when prod J_n exceeds max_cells
    """
    cells = int(np.prod(model.ranks, dtype=np.int64))
    if cells > max_cells:
        raise ValueError(f"dense core has {cells} cells, limit is {max_cells}")

    core = model.cores[0]
    for b in model.cores[1:]:
        core = core[..., None, :] * b.reshape((1,) * (core.ndim - 1) + b.shape)
    return core.sum(axis=-1)


def n_mode_product(tensor: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    """
    Mode-n product: contracts tensor axis `mode` (length J) with matrix (I x J).

    Returns:
        Tensor whose axis `mode` has length I
    """
    if tensor.shape[mode] != matrix.shape[1]:
        raise ValueError(
            f"axis {mode} has length {tensor.shape[mode]}, matrix has {matrix.shape[1]} columns"
        )
    return np.moveaxis(np.tensordot(matrix, tensor, axes=(1, mode)), 0, mode)


def reconstruct_dense(model: Model, max_cells: int = MAX_DENSE_CELLS) -> np.ndarray:
    """Full dense tensor G x_1 A^(1) x_2 ... x_N A^(N)."""
    cells = int(np.prod(model.dims, dtype=np.int64))
    if cells > max_cells:
        raise ValueError(f"dense tensor has {cells} cells, limit is {max_cells}")
    dense = materialize_core(model, max_cells)
    for n, a in enumerate(model.factors):
        dense = n_mode_product(dense, a, n)
    return dense


# ============================================================================
# PERSISTENCE
# ============================================================================


def save_model(model: Model, path: Union[str, Path]):
    """
    Write the model file: magic, ASCII header `N R J_1..J_N I_1..I_N`, then
    little-endian float32 A^(1)..A^(N), B^(1)..B^(N), each row-major.
    """
    header = [model.order, model.rank, *model.ranks, *model.dims]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write((" ".join(str(v) for v in header) + "\n").encode("ascii"))
        for matrix in model.factors + model.cores:
            f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    logger.info("Saved model (order %d, R=%d) to %s", model.order, model.rank, path)


def load_model(path: Union[str, Path]) -> Model:
    """
    Read a model file written by save_model.

    Returns:
        Model in float32
    """
    with open(path, "rb") as f:
        data = f.read()

    if not data.startswith(MAGIC):
        raise ModelFormatError(f"{path}: bad magic, not a model file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise ModelFormatError(f"{path}: corrupt header")
    try:
        header = [int(tok) for tok in data[len(MAGIC):end].decode("ascii").split()]
    except (UnicodeDecodeError, ValueError):
        raise ModelFormatError(f"{path}: corrupt header")
    if len(header) < 2 or len(header) != 2 + 2 * header[0] or min(header) < 1:
        raise ModelFormatError(f"{path}: corrupt header")

    order, rank = header[0], header[1]
    ranks = header[2:2 + order]
    dims = header[2 + order:]
    shapes = [(i, j) for i, j in zip(dims, ranks)] + [(j, rank) for j in ranks]
    expected = sum(r * c for r, c in shapes) * 4
    payload = data[end + 1:]
    if len(payload) != expected:
        raise ModelFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected} (truncated?)"
        )

    matrices = []
    offset = 0
    for rows, cols in shapes:
        count = rows * cols
        block = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        matrices.append(block.reshape(rows, cols).astype(np.float32))
        offset += count * 4
    return Model(matrices[:order], matrices[order:])


def model_matches(model: Model, dims: Sequence[int], ranks: Optional[Sequence[int]] = None) -> bool:
    """Whether a model covers a tensor of the given dims (and ranks, if given)."""
    if model.order != len(dims):
        return False
    if any(d > md for d, md in zip(dims, model.dims)):
        return False
    return ranks is None or tuple(ranks) == model.ranks
