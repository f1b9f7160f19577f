"""
Loss, RMSE/MAE metrics and the parameter-read / multiplication cost model.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from model import Model, predict_entries
from tensor_store import SparseTensor

logger = logging.getLogger(__name__)

EVAL_CHUNK = 65536

COST_FIELDS = ("reads", "c_mults", "d_mults", "bdt_mults", "updates", "cache_mults")


# ============================================================================
# COST COUNTERS
# ============================================================================


@dataclass
class CostCounters:
    """
    Logical parameter reads and multiplications.

    D-stage multiplications are c_mults (C = A_Psi B) plus d_mults (Hadamard
    products forming D). cache_mults counts full C^(n) cache builds.
    """

    reads: int = 0
    c_mults: int = 0
    d_mults: int = 0
    bdt_mults: int = 0
    updates: int = 0
    cache_mults: int = 0
    batches: int = 0

    @property
    def d_stage(self) -> int:
        return self.c_mults + self.d_mults

    @property
    def multiplications(self) -> int:
        return self.c_mults + self.d_mults + self.bdt_mults + self.cache_mults

    def __add__(self, other: "CostCounters") -> "CostCounters":
        return CostCounters(
            **{name: getattr(self, name) + getattr(other, name) for name in COST_FIELDS + ("batches",)}
        )

    def per_batch(self) -> "CostCounters":
        """Cost of one batch; every field must divide evenly by the batch count."""
        if self.batches == 0:
            return CostCounters()
        values = {}
        for name in COST_FIELDS:
            total = getattr(self, name)
            if total % self.batches:
                raise ValueError(f"{name}={total} is not a whole multiple of {self.batches} batches")
            values[name] = total // self.batches
        return CostCounters(**values, batches=1)

    def to_dict(self) -> Dict[str, int]:
        result = asdict(self)
        result["d_stage"] = self.d_stage
        result["multiplications"] = self.multiplications
        return result


@dataclass
class CostTally:
    """
    Per-epoch cost tallies keyed by (phase, mode).

    `total` collects every batch; `full` collects only batches with exactly M rows.
    Mode key -1 stands for batches that touch every mode at once.
    """

    total: CostCounters = field(default_factory=CostCounters)
    full: Dict[Tuple[str, int], CostCounters] = field(default_factory=dict)

    def record(
        self,
        phase: str,
        mode: int,
        sizes: np.ndarray,
        batch_size: int,
        per_row: Optional[Dict[str, int]] = None,
        fixed: Optional[Dict[str, int]] = None,
    ):
        """
        Charge a group of batches whose cost is per_row * rows + fixed each.

        Args:
            phase: 'factor' or 'core'
            mode: 0-based mode, or -1 for all-mode batches
            sizes: valid rows per batch
            batch_size: M
            per_row: cost per valid row, by counter field
            fixed: cost per batch, by counter field
        """
        per_row = per_row or {}
        fixed = fixed or {}
        sizes = np.asarray(sizes, dtype=np.int64)
        n_full = int(np.count_nonzero(sizes == batch_size))
        rows = int(sizes.sum())
        step = CostCounters(batches=len(sizes))
        full_step = CostCounters(batches=n_full)
        for name in set(per_row) | set(fixed):
            unit, const = per_row.get(name, 0), fixed.get(name, 0)
            setattr(step, name, unit * rows + const * len(sizes))
            setattr(full_step, name, (unit * batch_size + const) * n_full)
        self.total = self.total + step
        key = (phase, mode)
        self.full[key] = self.full.get(key, CostCounters()) + full_step

    def record_fixed(self, **costs: int):
        """Charge costs that belong to no batch (cache builds, epoch-level updates)."""
        self.total = self.total + CostCounters(**costs)

    def merge(self, other: "CostTally") -> "CostTally":
        merged = CostTally(self.total + other.total, dict(self.full))
        for key, counters in other.full.items():
            merged.full[key] = merged.full.get(key, CostCounters()) + counters
        return merged


def predicted_costs(order: int, batch_size: int, rank: int, ranks: Sequence[int], variant: str) -> CostCounters:
    """
    Closed-form factor-phase cost per batch, summed over all modes.

    Args:
        order: N
        batch_size: M
        rank: R
        ranks: J_1..J_N
        variant: 'fasttucker', 'fastertucker', 'fastertucker-coo' or 'plus'

    Returns:
        CostCounters with batches=1
    """
    if order < 1 or batch_size < 1 or rank < 1 or len(ranks) != order or min(ranks) < 1:
        raise ValueError("cost model arguments must be positive and ranks must have N entries")
    n, m, r, sj = order, batch_size, rank, int(sum(ranks))

    if variant == "plus":
        return CostCounters(
            reads=(m + r) * sj,
            c_mults=m * r * sj,
            d_mults=m * r * n * (n - 2),
            bdt_mults=m * r * sj,
            updates=m * sj,
            batches=1,
        )
    if variant == "fastertucker":
        return CostCounters(
            reads=(m + r) * sj + n * (n - 1) * r,
            d_mults=n * (n - 2) * r,
            bdt_mults=r * sj,
            updates=m * sj,
            batches=1,
        )
    if variant == "fastertucker-coo":
        return CostCounters(
            reads=(m + r) * sj + m * n * (n - 1) * r,
            d_mults=m * n * (n - 2) * r,
            bdt_mults=m * r * sj,
            updates=m * sj,
            batches=1,
        )
    if variant == "fasttucker":
        return CostCounters(
            reads=(m * n - m + r + 1) * sj,
            c_mults=m * r * (n - 1) * sj,
            d_mults=m * r * n * (n - 2),
            bdt_mults=m * r * sj,
            updates=sj,
            batches=1,
        )
    raise ValueError(f"unknown variant '{variant}'")


def measured_costs(stats, phase: str = "factor") -> CostCounters:
    """
    Per-full-batch cost of one phase of an instrumented epoch.

    Per-mode tallies are normalized separately and summed, so for the per-mode
    variants the result is the cost of one batch of every mode.

    Args:
        stats: EpochStats (anything with a `costs` CostTally)
        phase: 'factor' or 'core'

    Returns:
        CostCounters with batches=1, or zeros when the phase had no full batch
    """
    result = CostCounters()
    for (key_phase, _), counters in sorted(stats.costs.full.items()):
        if key_phase == phase and counters.batches:
            result = result + counters.per_batch()
    if result.batches:
        result.batches = 1
    return result


# ============================================================================
# METRICS
# ============================================================================


@dataclass
class Metrics:
    """Prediction error over a test set."""

    rmse: float
    mae: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def residuals(model: Model, tensor: SparseTensor, workers: int = 1) -> np.ndarray:
    """
    x - x_hat for every entry, in float64.

    Chunks are predicted in parallel and concatenated in chunk order.
    """
    if model.order != tensor.order:
        raise ValueError(f"model has order {model.order}, tensor has order {tensor.order}")
    if any(d > md for d, md in zip(tensor.dims, model.dims)):
        raise ValueError(f"tensor dims {tensor.dims} exceed model dims {model.dims}")

    starts = range(0, tensor.nnz, EVAL_CHUNK)

    def chunk(start):
        rows = tensor.indices[start:start + EVAL_CHUNK]
        return tensor.values[start:start + EVAL_CHUNK] - predict_entries(model, rows).astype(np.float64)

    if workers > 1 and tensor.nnz > EVAL_CHUNK:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def loss(model: Model, tensor: SparseTensor, reg_a: float, reg_b: float, workers: int = 1) -> float:
    """
    Regularized squared loss: sum (x - x_hat)^2 + reg_a sum_n ||A^(n)||^2 + reg_b sum_n ||B^(n)||^2.
    """
    res = residuals(model, tensor, workers)
    data_term = float(np.dot(res, res))
    reg_term = reg_a * sum(float(np.sum(np.square(a, dtype=np.float64))) for a in model.factors)
    reg_term += reg_b * sum(float(np.sum(np.square(b, dtype=np.float64))) for b in model.cores)
    return data_term + reg_term


def evaluate(model: Model, testset: SparseTensor, workers: int = 1) -> Metrics:
    """RMSE and MAE over a nonempty test set."""
    if testset.nnz == 0:
        raise ValueError("empty test set")
    res = residuals(model, testset, workers)
    return Metrics(
        rmse=float(np.sqrt(np.mean(np.square(res)))),
        mae=float(np.mean(np.abs(res))),
        count=testset.nnz,
    )


def rmse(model: Model, testset: SparseTensor, workers: int = 1) -> float:
    return evaluate(model, testset, workers).rmse


def mae(model: Model, testset: SparseTensor, workers: int = 1) -> float:
    return evaluate(model, testset, workers).mae
