"""
Synthetic sparse tensors: uniform-random values, or values planted from a known
FastTucker model for recovery tests.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from model import Model, predict_entries
from tensor_store import SparseTensor

logger = logging.getLogger(__name__)

PLANTED = "planted"
UNIFORM = "uniform"

DESK_NNZ = 10**6
FULL_NNZ = 10**8

# Cell counts up to this size are enumerated and sampled without replacement
DENSE_LIMIT = 10**7
LINEAR_ID_LIMIT = 2**62


@dataclass
class SynthSpec:
    """Parameters of a synthetic tensor."""

    order: int = 3
    dim: int = 10_000
    nnz: int = DESK_NNZ
    mode: str = UNIFORM

    # planted
    ranks: Optional[Sequence[int]] = None  # None = rank_j for every mode
    rank_j: int = 16
    rank: int = 16
    noise: float = 0.0
    target_mean: float = 1.0

    # uniform
    min_value: float = 1.0
    max_value: float = 5.0

    seed: int = 0

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.dim,) * self.order

    @property
    def cells(self) -> int:
        return self.dim**self.order

    def resolved_ranks(self) -> Tuple[int, ...]:
        if self.ranks is None:
            return (self.rank_j,) * self.order
        return tuple(int(j) for j in self.ranks)

    def validate(self):
        if self.order < 3:
            raise ValueError("synthetic tensors need order >= 3")
        if self.dim < 1 or self.nnz < 1:
            raise ValueError("dim and nnz must be positive")
        if self.nnz > self.cells:
            raise ValueError(f"nnz {self.nnz} exceeds the {self.cells} cells of the tensor")
        if self.mode not in (PLANTED, UNIFORM):
            raise ValueError(f"unknown generator mode '{self.mode}'")
        if self.mode == UNIFORM and self.min_value > self.max_value:
            raise ValueError("min value exceeds max value")
        if self.mode == PLANTED:
            ranks = self.resolved_ranks()
            if len(ranks) != self.order or min(ranks) < 1 or self.rank < 1:
                raise ValueError("planted ranks must be positive, one per mode")
            if self.noise < 0 or self.target_mean <= 0:
                raise ValueError("noise must be non-negative and target mean positive")


def sample_distinct_indices(dims: Sequence[int], nnz: int, rng: np.random.Generator) -> np.ndarray:
    """
    nnz distinct 0-based index tuples, uniformly at random, sorted lexicographically.

    Small tensors are enumerated; larger ones use rejection sampling on linear cell
    ids, or on whole rows when the cell count does not fit in 62 bits.
    """
    dims = tuple(int(d) for d in dims)
    cells = math.prod(dims)
    if nnz > cells:
        raise ValueError(f"nnz {nnz} exceeds the {cells} cells of the tensor")

    if cells <= DENSE_LIMIT:
        ids = np.sort(rng.choice(cells, size=nnz, replace=False))
        return np.column_stack(np.unravel_index(ids, dims)).astype(np.int64)

    if cells < LINEAR_ID_LIMIT:
        ids = np.zeros(0, dtype=np.int64)
        while ids.size < nnz:
            draw = rng.integers(0, cells, size=nnz - ids.size, dtype=np.int64)
            ids = np.unique(np.concatenate([ids, draw]))
        return np.column_stack(np.unravel_index(ids, dims)).astype(np.int64)

    rows = np.zeros((0, len(dims)), dtype=np.int64)
    while rows.shape[0] < nnz:
        draw = np.column_stack([rng.integers(0, d, size=nnz - rows.shape[0]) for d in dims])
        rows = np.unique(np.concatenate([rows, draw]), axis=0)
    return rows


def generate_uniform(spec: SynthSpec) -> SparseTensor:
    """Distinct random tuples with values uniform on [min_value, max_value]."""
    spec.validate()
    if spec.mode != UNIFORM:
        raise ValueError("generate_uniform needs mode 'uniform'")
    rng = np.random.default_rng(spec.seed)
    indices = sample_distinct_indices(spec.dims, spec.nnz, rng)
    values = rng.uniform(spec.min_value, spec.max_value, size=spec.nnz)
    logger.info("Generated uniform tensor: order %d, dim %d, nnz %d", spec.order, spec.dim, spec.nnz)
    return SparseTensor(indices, values, spec.dims)


def planted_truth(spec: SynthSpec, rng: np.random.Generator) -> Model:
    """
    Ground-truth model with A uniform [0,1) and B uniform [0,1) / normalizer.

    B^(n) is scaled by 4 (target/R)^(1/N) / J_n, which makes the expected element
    value equal target_mean. Entries are rounded to float32 so the model file
    reproduces the values exactly.
    """
    ranks = spec.resolved_ranks()
    k = (spec.target_mean / spec.rank) ** (1.0 / spec.order)
    factors = [rng.uniform(0.0, 1.0, size=(spec.dim, j)) for j in ranks]
    cores = [rng.uniform(0.0, 1.0, size=(j, spec.rank)) * (4.0 * k / j) for j in ranks]
    rounded = [m.astype(np.float32).astype(np.float64) for m in factors + cores]
    return Model(rounded[: spec.order], rounded[spec.order:])


def generate_planted(spec: SynthSpec) -> Tuple[SparseTensor, Model]:
    """
    Tensor sampled from a random ground-truth model plus Gaussian noise.

    Returns:
        (tensor, ground-truth model in float32)
    """
    spec.validate()
    if spec.mode != PLANTED:
        raise ValueError("generate_planted needs mode 'planted'")
    rng = np.random.default_rng(spec.seed)
    truth = planted_truth(spec, rng)
    indices = sample_distinct_indices(spec.dims, spec.nnz, rng)
    values = predict_entries(truth, indices)
    if spec.noise > 0:
        values = values + rng.normal(0.0, spec.noise, size=spec.nnz)
    logger.info(
        "Generated planted tensor: order %d, dim %d, nnz %d, noise %g",
        spec.order, spec.dim, spec.nnz, spec.noise,
    )
    return SparseTensor(indices, values, spec.dims), truth.astype(np.float32)
