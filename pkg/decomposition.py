"""
SGD training for sparse FastTucker decomposition.

Every variant is built from the same per-batch quantities: C^(n) = A^(n)_Psi B^(n),
D^(n) = hadamard product of C^(k) over k != n, the prediction x_hat and the
residual x - x_hat.

- fasttucker: per mode, batches drawn from buckets sharing i_n update that single
  factor row with the batch-mean gradient; then global batches update each core
  matrix immediately.
- fastertucker: a cache of full C^(n) replaces the per-batch products; batches drawn
  from buckets sharing every index but i_n share one context row d. The cache is
  refreshed after each mode block.
- fastertucker-coo: the same cache with global batches and one d row per sample.
- plus: global batches update the factor rows of all modes simultaneously; core
  gradients are accumulated over a second pass and applied once per epoch.

Batches run in waves: consecutive batches evaluated from one model snapshot and
written back together. Waves are dealt round-robin to a thread pool whose workers
write factor rows without locks (Hogwild). With one worker and wave size 1 every
variant is strictly sequential and bit-reproducible.
"""

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import VARIANTS
from evaluation import CostTally, evaluate, loss
from model import Hyperparams, Model
from tensor_store import (
    FIXED_COMPLEMENT,
    FIXED_MODE,
    BatchPlan,
    BatchWave,
    ModeIndex,
    SparseTensor,
    build_mode_index,
    sample_batches_global,
    sample_batches_mode,
)
from tile_kernels import KernelBackend, create_kernels, hadamard, r_dot, r_hadamard

logger = logging.getLogger(__name__)

FACTOR = "factor"
CORE = "core"
ALL_MODES = -1
MAX_WAVE_SIZE = 64

Kernels = Union[str, KernelBackend, None]
Plans = Optional[Dict[Tuple[str, int], BatchPlan]]


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, value: float):
        super().__init__(
            f"training loss became {value} at epoch {epoch}; lower the learning rates"
        )
        self.epoch = epoch
        self.value = value


def _kernels(kernels: Kernels) -> KernelBackend:
    if kernels is None or isinstance(kernels, str):
        return create_kernels(kernels or "tiled")
    return kernels


def default_wave_size(dims: Sequence[int], batch_size: int) -> int:
    """Batches per wave, small enough that a wave rarely hits one row twice."""
    return int(min(MAX_WAVE_SIZE, max(1, min(dims) // (4 * batch_size))))


def phase_seed(seed: int, epoch: int, phase: str, mode: int = ALL_MODES) -> int:
    """Independent sampler seed for one (epoch, phase, mode)."""
    tag = 0 if phase == FACTOR else 1
    return int(np.random.SeedSequence([seed, epoch, tag, mode + 1]).generate_state(1)[0])


# ============================================================================
# WAVES AND WORKERS
# ============================================================================


def cut_waves(plan: BatchPlan, wave_size: int, by_round: bool = False) -> List[np.ndarray]:
    """
    Group a plan's batches into waves of about wave_size * M entries.

    Args:
        plan: Epoch plan
        wave_size: Batches per wave when all batches are full; 1 = one batch per wave
        by_round: Take the k-th batch of every bucket before any (k+1)-th, and never
            mix two rounds in one wave, so a wave holds at most one batch per bucket

    Returns:
        List of batch-id arrays, in processing order
    """
    n = len(plan)
    if n == 0:
        return []
    if by_round:
        order = np.lexsort((np.arange(n), plan.rounds))
        segments = np.split(order, np.flatnonzero(np.diff(plan.rounds[order])) + 1)
    else:
        segments = [np.arange(n)]

    if wave_size <= 1:
        return [seg[i:i + 1] for seg in segments for i in range(len(seg))]

    budget = wave_size * plan.batch_size
    sizes = plan.sizes
    waves = []
    for seg in segments:
        group = (np.cumsum(sizes[seg]) - 1) // budget
        waves.extend(np.split(seg, np.flatnonzero(np.diff(group)) + 1))
    return waves


@dataclass
class WorkerState:
    """Private per-worker tallies, merged in worker-id order at the barrier."""

    tally: CostTally = field(default_factory=CostTally)
    acc: Optional["CoreGradAccumulator"] = None


def run_waves(
    waves: Sequence[np.ndarray],
    process: Callable[[WorkerState, np.ndarray], None],
    workers: int = 1,
    make_state: Callable[[], WorkerState] = WorkerState,
) -> List[WorkerState]:
    """
    Run process(state, wave) over all waves; wave k goes to worker k mod workers.

    Returns:
        Worker states in worker-id order
    """
    workers = max(1, min(workers, len(waves)))
    states = [make_state() for _ in range(workers)]
    if workers == 1:
        for wave in waves:
            process(states[0], wave)
        return states

    def work(k):
        for wave in waves[k::workers]:
            process(states[k], wave)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in pool.map(work, range(workers)):
            pass
    return states


def merge_tallies(states: Sequence[WorkerState], into: CostTally) -> CostTally:
    for state in states:
        into = into.merge(state.tally)
    return into


def scatter_rows(target: np.ndarray, index: np.ndarray, delta: np.ndarray, mask: np.ndarray):
    """Add delta rows into target[index] for valid rows; repeated rows accumulate."""
    valid = mask[..., 0]
    np.add.at(target, index[valid], delta[valid].astype(target.dtype, copy=False))


# ============================================================================
# WORKSPACE AND ACCUMULATORS
# ============================================================================


@dataclass
class Workspace:
    """
    Per-wave scratch, all arrays stacked as (W, M, .).

    Attributes:
        rows: staged factor rows A^(n)_Psi
        c: C^(n)_Psi
        d: D^(n)_Psi
        xhat: predictions (W, M, 1)
        residual: x - x_hat, zero on masked rows
        mask: (W, M, 1) row validity
        dbt: D^(n) B^(n)T, factor phase only
        e: residual (*) A^(n)_Psi, core phase only
        products: Hadamard products performed building D
    """

    rows: List[np.ndarray]
    c: List[np.ndarray]
    d: List[np.ndarray]
    xhat: np.ndarray
    residual: np.ndarray
    mask: np.ndarray
    dbt: Optional[List[np.ndarray]] = None
    e: Optional[List[np.ndarray]] = None
    products: int = 0


@dataclass
class CoreGradAccumulator:
    """Grad(B^(n)) per mode, accumulated in float64 over an epoch."""

    grads: List[np.ndarray]
    count: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "CoreGradAccumulator":
        return cls([np.zeros(b.shape, dtype=np.float64) for b in model.cores])

    def reset(self):
        for g in self.grads:
            g.fill(0.0)
        self.count = 0

    def merge(self, other: "CoreGradAccumulator"):
        for g, h in zip(self.grads, other.grads):
            g += h
        self.count += other.count


class CCache:
    """
    Full C^(n) = A^(n) B^(n) per mode with staleness flags.

    A mode is invalidated when its block starts changing A^(n) or B^(n) and is
    fresh again after refresh().
    """

    def __init__(self, model: Model, kernels: Kernels = None):
        self.kernels = _kernels(kernels)
        self.matrices: List[Optional[np.ndarray]] = [None] * model.order
        self.fresh = [False] * model.order

    def refresh(self, model: Model, mode: Optional[int] = None) -> int:
        """Recompute one mode (or all); returns the multiplications spent."""
        modes = range(model.order) if mode is None else [mode]
        mults = 0
        for n in modes:
            self.matrices[n] = self.kernels.matmul(model.factors[n], model.cores[n])
            self.fresh[n] = True
            mults += model.dims[n] * model.ranks[n] * model.rank
        logger.debug("Refreshed C cache for mode(s) %s", list(modes))
        return mults

    def invalidate(self, mode: int):
        self.fresh[mode] = False

    def rows(self, mode: int, index: np.ndarray) -> np.ndarray:
        assert self.fresh[mode], f"stale C cache read for mode {mode}"
        return self.matrices[mode][index]

    @property
    def all_fresh(self) -> bool:
        return all(self.fresh)


# ============================================================================
# PER-BATCH PIPELINE
# ============================================================================


def stage_rows(model: Model, wave: BatchWave) -> List[np.ndarray]:
    """A^(n)_Psi for every mode, masked rows zeroed."""
    return [model.factors[n][wave.indices[..., n]] * wave.mask for n in range(model.order)]


def compute_c_batch(
    model: Model, wave: BatchWave, kernels: Kernels = None, rows: Optional[List[np.ndarray]] = None
) -> List[np.ndarray]:
    """C^(n)_Psi = A^(n)_Psi B^(n) for every mode, through the kernel backend."""
    kernels = _kernels(kernels)
    rows = rows if rows is not None else stage_rows(model, wave)
    return [kernels.matmul(rows[n], model.cores[n]) for n in range(model.order)]


def compute_d_batch(cs: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], int]:
    """
    D^(n) = hadamard of C^(k) over k != n, with the shared-product schedule.

    Each C^(n) is folded into every D^(k), k != n, as soon as it is available. The
    first factor of a D is a copy, so N(N-2) products are performed in total.

    Returns:
        (D list, number of matrix Hadamard products)
    """
    order = len(cs)
    ds: List[Optional[np.ndarray]] = [None] * order
    products = 0
    for n in range(order):
        for k in range(order):
            if k == n:
                continue
            if ds[k] is None:
                ds[k] = cs[n].copy()
            else:
                ds[k] = hadamard(ds[k], cs[n])
                products += 1
    return ds, products


def predict_batch(
    d1: np.ndarray,
    a1: Optional[np.ndarray] = None,
    b1: Optional[np.ndarray] = None,
    c1: Optional[np.ndarray] = None,
    bdt1: Optional[np.ndarray] = None,
    kernels: Kernels = None,
) -> np.ndarray:
    """
    Batch predictions from mode-1 quantities.

    C-side: r_dot(C^(1), D^(1)T). Factor side: r_dot(A^(1), B^(1) D^(1)T), where
    bdt1 = D^(1) B^(1)T may be passed precomputed.

    Returns:
        (..., M, 1) predictions
    """
    if c1 is not None:
        return r_dot(c1, np.swapaxes(d1, -1, -2))
    if a1 is None:
        raise ValueError("predict_batch needs either C^(1) or A^(1)")
    if bdt1 is None:
        if b1 is None:
            raise ValueError("predict_batch needs B^(1) with A^(1)")
        bdt1 = _kernels(kernels).matmul(d1, b1.T)
    return r_dot(a1, np.swapaxes(bdt1, -1, -2))


def fill_workspace(
    model: Model,
    wave: BatchWave,
    kernels: Kernels = None,
    phase: str = FACTOR,
    cache: Optional[CCache] = None,
) -> Workspace:
    """
    Compute C, D, x_hat and the residual for a wave before any write.

    In the factor phase D B^T is kept for the update and x_hat is taken from the
    factor side; in the core phase x_hat is taken from the C side. A cache, when
    given, supplies C rows instead of the products.
    """
    kernels = _kernels(kernels)
    rows = stage_rows(model, wave)
    if cache is not None:
        c = [cache.rows(n, wave.indices[..., n]) * wave.mask for n in range(model.order)]
    else:
        c = compute_c_batch(model, wave, kernels, rows)
    d, products = compute_d_batch(c)

    dbt = None
    if phase == FACTOR:
        dbt = [kernels.matmul(d[n], model.cores[n].T) for n in range(model.order)]
        xhat = predict_batch(d[0], a1=rows[0], bdt1=dbt[0])
    else:
        xhat = predict_batch(d[0], c1=c[0])

    values = wave.values.astype(model.dtype, copy=False)
    residual = (values - xhat) * wave.mask
    return Workspace(rows, c, d, xhat, residual, wave.mask, dbt=dbt, products=products)


def update_factors_plus(
    model: Model, wave: BatchWave, hyper: Hyperparams, ws: Workspace, kernels: Kernels = None
):
    """
    A^(n)_Psi += lr_a [residual (*) (D^(n) B^(n)T) - reg_a A^(n)_Psi] for all modes.

    All deltas come from the workspace snapshot, then rows are written back.
    """
    if ws.dbt is None:
        kernels = _kernels(kernels)
        ws.dbt = [kernels.matmul(ws.d[n], model.cores[n].T) for n in range(model.order)]
    deltas = [
        hyper.lr_a * (r_hadamard(ws.residual, ws.dbt[n]) - hyper.reg_a * ws.rows[n]) * ws.mask
        for n in range(model.order)
    ]
    for n, delta in enumerate(deltas):
        scatter_rows(model.factors[n], wave.indices[..., n], delta, wave.mask)


def accumulate_core_grads_plus(
    wave: BatchWave, ws: Workspace, acc: CoreGradAccumulator, kernels: Kernels = None
):
    """Grad(B^(n)) += E^(n)T D^(n) with E^(n) = residual (*) A^(n)_Psi; the model is untouched."""
    kernels = _kernels(kernels)
    ws.e = [r_hadamard(ws.residual, rows) for rows in ws.rows]
    for n, e in enumerate(ws.e):
        grad = kernels.matmul(np.swapaxes(e, -1, -2), ws.d[n])
        acc.grads[n] += grad.reshape((-1,) + grad.shape[-2:]).sum(axis=0, dtype=np.float64)
    acc.count += wave.rows


def apply_core_update(model: Model, acc: CoreGradAccumulator, omega_size: int, hyper: Hyperparams):
    """B^(n) += lr_b (Grad(B^(n)) / |Omega| - reg_b B^(n)) for every mode."""
    if omega_size <= 0:
        raise ValueError("omega_size must be positive")
    for b, grad in zip(model.cores, acc.grads):
        step = hyper.lr_b * (grad / omega_size - hyper.reg_b * b.astype(np.float64))
        b += step.astype(b.dtype)


# ============================================================================
# PER-SAMPLE OBJECTIVES
# ============================================================================


def sample_context(model: Model, index: Sequence[int], mode: int) -> np.ndarray:
    """d = hadamard over k != mode of a^(k)_{i_k} B^(k), length R."""
    d = np.ones(model.rank, dtype=np.float64)
    for k, i in enumerate(index):
        if k != mode:
            d = d * (model.factors[k][i] @ model.cores[k])
    return d


def sample_objective(
    model: Model, index: Sequence[int], value: float, reg_a: float = 0.0, reg_b: float = 0.0
) -> float:
    """
    Per-sample objective 1/2 (x - x_hat)^2 + 1/2 reg_a sum_n |a^(n)_{i_n}|^2
    + 1/2 reg_b sum_n |B^(n)|^2.
    """
    xhat = float(np.sum(sample_context(model, index, -1)))
    reg = reg_a * sum(float(model.factors[n][i] @ model.factors[n][i]) for n, i in enumerate(index))
    reg += reg_b * sum(float(np.sum(b * b)) for b in model.cores)
    return 0.5 * (value - xhat) ** 2 + 0.5 * reg


def sample_factor_gradient(
    model: Model, index: Sequence[int], value: float, mode: int, reg_a: float = 0.0
) -> np.ndarray:
    """Gradient of sample_objective with respect to a^(mode)_{i_mode}."""
    d = sample_context(model, index, mode)
    a = model.factors[mode][index[mode]]
    residual = value - float(a @ model.cores[mode] @ d)
    return -residual * (model.cores[mode] @ d) + reg_a * a


def sample_core_gradient(
    model: Model, index: Sequence[int], value: float, mode: int, reg_b: float = 0.0
) -> np.ndarray:
    """Gradient of sample_objective with respect to B^(mode)."""
    d = sample_context(model, index, mode)
    a = model.factors[mode][index[mode]]
    residual = value - float(a @ model.cores[mode] @ d)
    return -residual * np.outer(a, d) + reg_b * model.cores[mode]


# ============================================================================
# FASTTUCKER
# ============================================================================


def _product(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = mats[0].copy()
    for m in mats[1:]:
        out = hadamard(out, m)
    return out


def _fasttucker_factor_wave(model, plan, mode, hyper, kernels, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    others = [k for k in range(order) if k != mode]
    cs = [
        kernels.matmul(model.factors[k][wave.indices[..., k]] * wave.mask, model.cores[k])
        for k in others
    ]
    d = _product(cs)
    dbt = kernels.matmul(d, model.cores[mode].T)

    target = wave.indices[:, 0, mode]
    a = model.factors[mode][target]
    xhat = np.matmul(dbt, a[..., None])
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask
    grad = r_hadamard(residual, dbt).sum(axis=1) / wave.sizes[:, None]
    delta = hyper.lr_a * (grad - hyper.reg_a * a)
    np.add.at(model.factors[mode], target, delta.astype(model.dtype))

    j_n = model.ranks[mode]
    j_other = sum(model.ranks) - j_n
    state.tally.record(
        FACTOR,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=j_other, c_mults=rank * j_other, d_mults=(order - 2) * rank, bdt_mults=rank * j_n),
        fixed=dict(reads=j_n + rank * j_n, updates=j_n),
    )


def _fasttucker_core_wave(model, plan, mode, hyper, kernels, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    rows = stage_rows(model, wave)
    cs = compute_c_batch(model, wave, kernels, rows)
    d = _product([cs[k] for k in range(order) if k != mode])
    xhat = r_dot(cs[mode], np.swapaxes(d, -1, -2))
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask

    e = r_hadamard(residual, rows[mode])
    grad = kernels.matmul(np.swapaxes(e, -1, -2), d) / wave.sizes[:, None, None]
    core = model.cores[mode]
    step = hyper.lr_b * (grad.sum(axis=0) - wave.count * hyper.reg_b * core)
    core += step.astype(core.dtype)

    j_n, sum_j = model.ranks[mode], sum(model.ranks)
    state.tally.record(
        CORE,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=sum_j, c_mults=rank * sum_j, d_mults=(order - 2) * rank, bdt_mults=rank * j_n),
        fixed=dict(reads=rank * sum_j, updates=rank * j_n),
    )


def epoch_fasttucker(
    tensor: SparseTensor,
    mode_indices: Sequence[ModeIndex],
    model: Model,
    hyper: Hyperparams,
    workers: int = 1,
    seed: int = 0,
    *,
    epoch: int = 0,
    kernels: Kernels = None,
    wave_size: Optional[int] = None,
    plans: Plans = None,
) -> "EpochStats":
    """
    One FastTucker epoch.

    For each mode in order, batches from fixed-i_n buckets update a^(n)_{i_n} with
    the batch-mean gradient; then for each mode, global batches update B^(n)
    immediately.

    Args:
        tensor: Train tensor
        mode_indices: fixed-n ModeIndex per mode
        model: Model, updated in place
        hyper: Hyperparameters
        workers: Thread count
        seed: Base seed
        epoch: Epoch number (seeds the samplers)
        kernels: Kernel backend or its name
        wave_size: Batches per wave; None derives it from the dims
        plans: Optional fixed plans keyed by (phase, mode), replacing the samplers

    Returns:
        EpochStats with timings and cost tallies
    """
    kernels = _kernels(kernels)
    wave_size = wave_size or default_wave_size(model.dims, hyper.batch_size)
    stats = EpochStats(epoch, "fasttucker")
    tally = CostTally()
    m = hyper.batch_size

    start = time.perf_counter()
    for n in range(model.order):
        plan = (plans or {}).get((FACTOR, n)) or sample_batches_mode(
            tensor, mode_indices[n], n, m, phase_seed(seed, epoch, FACTOR, n), FIXED_MODE
        )
        step = partial(_fasttucker_factor_wave, model, plan, n, hyper, kernels)
        tally = merge_tallies(run_waves(cut_waves(plan, wave_size, by_round=True), step, workers), tally)
    stats.factor_seconds = time.perf_counter() - start

    start = time.perf_counter()
    for n in range(model.order):
        plan = (plans or {}).get((CORE, n)) or sample_batches_global(
            tensor, m, phase_seed(seed, epoch, CORE, n)
        )
        step = partial(_fasttucker_core_wave, model, plan, n, hyper, kernels)
        tally = merge_tallies(run_waves(cut_waves(plan, wave_size), step, workers), tally)
    stats.core_seconds = time.perf_counter() - start

    stats.seconds = stats.factor_seconds + stats.core_seconds
    stats.costs = tally
    return stats


# ============================================================================
# FASTERTUCKER
# ============================================================================


def _cached_context(cache: CCache, index: np.ndarray, mode: int, order: int) -> np.ndarray:
    """Hadamard product of cached C^(k) rows over k != mode."""
    return _product([cache.rows(k, index[..., k]) for k in range(order) if k != mode])


def _fastertucker_factor_wave(model, plan, mode, hyper, cache, kernels, eager, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    d = _cached_context(cache, wave.indices[:, 0, :], mode, order)
    bd = kernels.matmul(d[:, None, :], model.cores[mode].T)

    rows = model.factors[mode][wave.indices[..., mode]] * wave.mask
    xhat = np.matmul(rows, np.swapaxes(bd, -1, -2))
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask
    delta = hyper.lr_a * (residual * bd - hyper.reg_a * rows) / wave.sizes[:, None, None]
    scatter_rows(model.factors[mode], wave.indices[..., mode], delta * wave.mask, wave.mask)

    j_n = model.ranks[mode]
    state.tally.record(
        FACTOR,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=j_n, updates=j_n),
        fixed=dict(reads=(order - 1) * rank + rank * j_n, d_mults=(order - 2) * rank, bdt_mults=rank * j_n),
    )
    if eager:
        state.tally.record_fixed(cache_mults=cache.refresh(model, mode))


def _fastertucker_core_wave(model, plan, mode, hyper, cache, kernels, eager, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    d = _cached_context(cache, wave.indices[:, 0, :], mode, order)
    core = model.cores[mode]
    bd = kernels.matmul(d[:, None, :], core.T)

    rows = model.factors[mode][wave.indices[..., mode]] * wave.mask
    xhat = np.matmul(rows, np.swapaxes(bd, -1, -2))
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask

    e_sum = r_hadamard(residual, rows).sum(axis=1)
    grad = e_sum[:, :, None] * d[:, None, :] / wave.sizes[:, None, None]
    step = hyper.lr_b * (grad.sum(axis=0) - wave.count * hyper.reg_b * core)
    core += step.astype(core.dtype)

    j_n = model.ranks[mode]
    state.tally.record(
        CORE,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=j_n),
        fixed=dict(reads=(order - 1) * rank + rank * j_n, d_mults=(order - 2) * rank, bdt_mults=rank * j_n, updates=rank * j_n),
    )
    if eager:
        state.tally.record_fixed(cache_mults=cache.refresh(model, mode))


def _fastertucker_coo_factor_wave(model, plan, mode, hyper, cache, kernels, eager, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    d = _cached_context(cache, wave.indices, mode, order) * wave.mask
    bd = kernels.matmul(d, model.cores[mode].T)

    rows = model.factors[mode][wave.indices[..., mode]] * wave.mask
    xhat = r_dot(rows, np.swapaxes(bd, -1, -2))
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask
    delta = hyper.lr_a * (r_hadamard(residual, bd) - hyper.reg_a * rows) / wave.sizes[:, None, None]
    scatter_rows(model.factors[mode], wave.indices[..., mode], delta * wave.mask, wave.mask)

    j_n = model.ranks[mode]
    state.tally.record(
        FACTOR,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=j_n + (order - 1) * rank, d_mults=(order - 2) * rank, bdt_mults=rank * j_n, updates=j_n),
        fixed=dict(reads=rank * j_n),
    )
    if eager:
        state.tally.record_fixed(cache_mults=cache.refresh(model, mode))


def _fastertucker_coo_core_wave(model, plan, mode, hyper, cache, kernels, eager, state, ids):
    wave = plan.wave(ids)
    order, rank = model.order, model.rank
    d = _cached_context(cache, wave.indices, mode, order) * wave.mask
    core = model.cores[mode]
    bd = kernels.matmul(d, core.T)

    rows = model.factors[mode][wave.indices[..., mode]] * wave.mask
    xhat = r_dot(rows, np.swapaxes(bd, -1, -2))
    residual = (wave.values.astype(model.dtype, copy=False) - xhat) * wave.mask

    e = r_hadamard(residual, rows)
    grad = kernels.matmul(np.swapaxes(e, -1, -2), d) / wave.sizes[:, None, None]
    step = hyper.lr_b * (grad.sum(axis=0) - wave.count * hyper.reg_b * core)
    core += step.astype(core.dtype)

    j_n = model.ranks[mode]
    state.tally.record(
        CORE,
        mode,
        wave.sizes,
        plan.batch_size,
        per_row=dict(reads=j_n + (order - 1) * rank, d_mults=(order - 2) * rank, bdt_mults=rank * j_n),
        fixed=dict(reads=rank * j_n, updates=rank * j_n),
    )
    if eager:
        state.tally.record_fixed(cache_mults=cache.refresh(model, mode))


def _cached_epoch(
    name, tensor, plan_for, factor_wave, core_wave, model, ccache, hyper, workers, seed,
    epoch, kernels, wave_size, plans, refresh, by_round,
):
    kernels = _kernels(kernels)
    wave_size = wave_size or default_wave_size(model.dims, hyper.batch_size)
    if refresh not in ("block", "batch"):
        raise ValueError(f"unknown refresh cadence '{refresh}'")
    eager = refresh == "batch"
    stats = EpochStats(epoch, name)
    tally = CostTally()

    stale = [n for n in range(model.order) if not ccache.fresh[n]]
    for n in stale:
        tally.record_fixed(cache_mults=ccache.refresh(model, n))

    for phase, wave_fn in ((FACTOR, factor_wave), (CORE, core_wave)):
        start = time.perf_counter()
        for n in range(model.order):
            ccache.invalidate(n)
            plan = (plans or {}).get((phase, n)) or plan_for(phase, n)
            step = partial(wave_fn, model, plan, n, hyper, ccache, kernels, eager)
            tally = merge_tallies(
                run_waves(cut_waves(plan, wave_size, by_round=by_round), step, workers), tally
            )
            tally.record_fixed(cache_mults=ccache.refresh(model, n))
        elapsed = time.perf_counter() - start
        if phase == FACTOR:
            stats.factor_seconds = elapsed
        else:
            stats.core_seconds = elapsed

    stats.seconds = stats.factor_seconds + stats.core_seconds
    stats.costs = tally
    return stats


def epoch_fastertucker(
    tensor: SparseTensor,
    mode_indices: Sequence[ModeIndex],
    model: Model,
    ccache: CCache,
    hyper: Hyperparams,
    workers: int = 1,
    seed: int = 0,
    *,
    epoch: int = 0,
    kernels: Kernels = None,
    wave_size: Optional[int] = None,
    plans: Plans = None,
    refresh: str = "block",
) -> "EpochStats":
    """
    One FasterTucker epoch.

    Per mode, batches from fixed-complement buckets share one context row d built
    from cached C^(k) rows (k != n) and update their factor rows with the batch-mean
    gradient; C^(n) is refreshed after the block. The core phase does the same for
    B^(n), with the prediction computed from the current A^(n)_Psi and B^(n).

    Args:
        mode_indices: fixed-complement ModeIndex per mode
        ccache: C cache; stale modes are refreshed on entry
        refresh: 'block' (after each mode block) or 'batch' (after every wave)

    See epoch_fasttucker for the remaining arguments.
    """
    m = hyper.batch_size

    def plan_for(phase, n):
        return sample_batches_mode(
            tensor, mode_indices[n], n, m, phase_seed(seed, epoch, phase, n), FIXED_COMPLEMENT
        )

    return _cached_epoch(
        "fastertucker", tensor, plan_for, _fastertucker_factor_wave, _fastertucker_core_wave,
        model, ccache, hyper, workers, seed, epoch, kernels, wave_size, plans, refresh, True,
    )


def epoch_fastertucker_coo(
    tensor: SparseTensor,
    model: Model,
    ccache: CCache,
    hyper: Hyperparams,
    workers: int = 1,
    seed: int = 0,
    *,
    epoch: int = 0,
    kernels: Kernels = None,
    wave_size: Optional[int] = None,
    plans: Plans = None,
    refresh: str = "block",
) -> "EpochStats":
    """
    One FasterTucker epoch over global batches, with a context row per sample.

    Same cache and update rules as epoch_fastertucker without sharing d across a batch.
    """
    m = hyper.batch_size

    def plan_for(phase, n):
        return sample_batches_global(tensor, m, phase_seed(seed, epoch, phase, n))

    return _cached_epoch(
        "fastertucker-coo", tensor, plan_for, _fastertucker_coo_factor_wave, _fastertucker_coo_core_wave,
        model, ccache, hyper, workers, seed, epoch, kernels, wave_size, plans, refresh, False,
    )


# ============================================================================
# FASTTUCKERPLUS
# ============================================================================


def epoch_plus(
    tensor: SparseTensor,
    model: Model,
    hyper: Hyperparams,
    workers: int = 1,
    seed: int = 0,
    *,
    epoch: int = 0,
    kernels: Kernels = None,
    wave_size: Optional[int] = None,
    store_c: bool = False,
    plans: Plans = None,
) -> "EpochStats":
    """
    One FastTuckerPlus epoch.

    Phase 1: a full pass of global batches updates the factor rows of every mode
    simultaneously. Phase 2: an independent full pass accumulates core gradients in
    per-worker accumulators, reduced in worker-id order and applied once, scaled by
    1/|Omega|.

    Args:
        store_c: Read C rows from a cache built at the start of phase 2 instead of
            computing them per batch

    See epoch_fasttucker for the remaining arguments.
    """
    kernels = _kernels(kernels)
    wave_size = wave_size or default_wave_size(model.dims, hyper.batch_size)
    stats = EpochStats(epoch, "plus")
    tally = CostTally()
    m, order, rank = hyper.batch_size, model.order, model.rank
    sum_j = sum(model.ranks)

    start = time.perf_counter()
    plan = (plans or {}).get((FACTOR, ALL_MODES)) or sample_batches_global(
        tensor, m, phase_seed(seed, epoch, FACTOR)
    )

    def factor_step(state, ids):
        wave = plan.wave(ids)
        ws = fill_workspace(model, wave, kernels, FACTOR)
        update_factors_plus(model, wave, hyper, ws, kernels)
        state.tally.record(
            FACTOR,
            ALL_MODES,
            wave.sizes,
            m,
            per_row=dict(
                reads=sum_j,
                c_mults=rank * sum_j,
                d_mults=ws.products * rank,
                bdt_mults=rank * sum_j,
                updates=sum_j,
            ),
            fixed=dict(reads=rank * sum_j),
        )

    tally = merge_tallies(run_waves(cut_waves(plan, wave_size), factor_step, workers), tally)
    stats.factor_seconds = time.perf_counter() - start

    start = time.perf_counter()
    core_plan = (plans or {}).get((CORE, ALL_MODES)) or sample_batches_global(
        tensor, m, phase_seed(seed, epoch, CORE)
    )
    cache = None
    if store_c:
        cache = CCache(model, kernels)
        tally.record_fixed(cache_mults=cache.refresh(model))

    def core_step(state, ids):
        wave = core_plan.wave(ids)
        ws = fill_workspace(model, wave, kernels, CORE, cache=cache)
        accumulate_core_grads_plus(wave, ws, state.acc, kernels)
        if cache is None:
            per_row = dict(reads=sum_j, c_mults=rank * sum_j)
            fixed = dict(reads=rank * sum_j)
        else:
            per_row = dict(reads=sum_j + order * rank)
            fixed = {}
        per_row.update(d_mults=ws.products * rank, bdt_mults=rank * sum_j)
        state.tally.record(CORE, ALL_MODES, wave.sizes, m, per_row=per_row, fixed=fixed)

    states = run_waves(
        cut_waves(core_plan, wave_size),
        core_step,
        workers,
        make_state=lambda: WorkerState(acc=CoreGradAccumulator.zeros_like(model)),
    )
    acc = states[0].acc
    for state in states[1:]:
        acc.merge(state.acc)
    apply_core_update(model, acc, tensor.nnz, hyper)
    tally = merge_tallies(states, tally)
    tally.record_fixed(updates=rank * sum_j)
    stats.core_seconds = time.perf_counter() - start

    stats.seconds = stats.factor_seconds + stats.core_seconds
    stats.costs = tally
    return stats


# ============================================================================
# VARIANT RUNNERS
# ============================================================================


class VariantRunner:
    """
    Base class for training variants.
    Holds the per-run state (mode indices, caches) that outlives a single epoch.
    """

    name = "base"

    def __init__(
        self,
        tensor: SparseTensor,
        model: Model,
        hyper: Hyperparams,
        workers: int = 1,
        seed: int = 0,
        kernels: Kernels = "tiled",
        wave_size: Optional[int] = None,
    ):
        """
        Initialize the runner.

        Args:
            tensor: Train tensor
            model: Model, updated in place by run_epoch
            hyper: Hyperparameters
            workers: Thread count
            seed: Base seed
            kernels: Kernel backend or its name
            wave_size: Batches per wave; None derives it from the dims
        """
        self.tensor = tensor
        self.model = model
        self.hyper = hyper
        self.workers = workers
        self.seed = seed
        self.kernels = _kernels(kernels)
        self.wave_size = wave_size or default_wave_size(model.dims, hyper.batch_size)

    def run_epoch(self, epoch: int) -> "EpochStats":
        """
        Run one epoch. Must be implemented by subclasses.

        Args:
            epoch: 1-based epoch number

        Returns:
            EpochStats
        """
        raise NotImplementedError("Subclasses must implement run_epoch")


class FastTuckerRunner(VariantRunner):
    """Convex block scheme with fixed-i_n buckets."""

    name = "fasttucker"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.mode_indices = [
            build_mode_index(self.tensor, n, FIXED_MODE) for n in range(self.tensor.order)
        ]

    def run_epoch(self, epoch):
        return epoch_fasttucker(
            self.tensor, self.mode_indices, self.model, self.hyper, self.workers, self.seed,
            epoch=epoch, kernels=self.kernels, wave_size=self.wave_size,
        )


class FasterTuckerRunner(VariantRunner):
    """Cached C^(n) with fixed-complement buckets sharing one context row."""

    name = "fastertucker"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.mode_indices = [
            build_mode_index(self.tensor, n, FIXED_COMPLEMENT) for n in range(self.tensor.order)
        ]
        self.cache = CCache(self.model, self.kernels)
        self.cache.refresh(self.model)

    def run_epoch(self, epoch):
        return epoch_fastertucker(
            self.tensor, self.mode_indices, self.model, self.cache, self.hyper, self.workers,
            self.seed, epoch=epoch, kernels=self.kernels, wave_size=self.wave_size,
        )


class FasterTuckerCOORunner(VariantRunner):
    """Cached C^(n) with global batches and per-sample context rows."""

    name = "fastertucker-coo"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cache = CCache(self.model, self.kernels)
        self.cache.refresh(self.model)

    def run_epoch(self, epoch):
        return epoch_fastertucker_coo(
            self.tensor, self.model, self.cache, self.hyper, self.workers, self.seed,
            epoch=epoch, kernels=self.kernels, wave_size=self.wave_size,
        )


class FastTuckerPlusRunner(VariantRunner):
    """Simultaneous factor updates and epoch-level core updates."""

    name = "plus"

    def __init__(self, *args, store_c: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.store_c = store_c

    def run_epoch(self, epoch):
        return epoch_plus(
            self.tensor, self.model, self.hyper, self.workers, self.seed,
            epoch=epoch, kernels=self.kernels, wave_size=self.wave_size, store_c=self.store_c,
        )


def create_runner(variant: str, *args, store_c: bool = False, **kwargs) -> VariantRunner:
    """
    Factory function to create a VariantRunner by variant name.

    Args:
        variant: One of VARIANTS
        store_c: Plus only; read C rows from a cache in the core phase
        *args, **kwargs: Passed to the runner constructor

    Returns:
        VariantRunner instance
    """
    if store_c and variant != "plus":
        raise ValueError("store_c only applies to the plus variant")
    if variant == "plus":
        return FastTuckerPlusRunner(*args, store_c=store_c, **kwargs)
    elif variant == "fasttucker":
        return FastTuckerRunner(*args, **kwargs)
    elif variant == "fastertucker":
        return FasterTuckerRunner(*args, **kwargs)
    elif variant == "fastertucker-coo":
        return FasterTuckerCOORunner(*args, **kwargs)
    raise ValueError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")


# ============================================================================
# HISTORY AND TRAINING
# ============================================================================


@dataclass
class EpochStats:
    """Timing, cost and quality figures for one epoch."""

    epoch: int
    variant: str
    seconds: float = 0.0
    factor_seconds: float = 0.0
    core_seconds: float = 0.0
    costs: CostTally = field(default_factory=CostTally)
    train_loss: Optional[float] = None
    test_rmse: Optional[float] = None
    test_mae: Optional[float] = None

    def to_record(self) -> Dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_rmse": self.test_rmse,
            "test_mae": self.test_mae,
            "seconds": self.seconds,
            "reads": self.costs.total.reads,
            "mults": self.costs.total.multiplications,
            "variant": self.variant,
            "factor_seconds": self.factor_seconds,
            "core_seconds": self.core_seconds,
        }


@dataclass
class History:
    """Per-epoch records of a training run."""

    variant: str
    records: List[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i) -> EpochStats:
        return self.records[i]

    def append(self, stats: EpochStats):
        self.records.append(stats)

    @property
    def last(self) -> Optional[EpochStats]:
        return self.records[-1] if self.records else None

    def to_records(self) -> List[Dict]:
        return [stats.to_record() for stats in self.records]

    def write_jsonl(self, path: Union[str, Path]):
        """One JSON object per epoch."""
        with open(path, "w", encoding="utf-8") as f:
            for record in self.to_records():
                f.write(json.dumps(record) + "\n")

    def write_csv(self, path: Union[str, Path]):
        records = self.to_records()
        with open(path, "w", encoding="utf-8", newline="") as f:
            if not records:
                return
            writer = csv.DictWriter(f, fieldnames=list(records[0]))
            writer.writeheader()
            writer.writerows(records)


def train(
    tensor: SparseTensor,
    test: Optional[SparseTensor],
    model: Model,
    hyper: Hyperparams,
    variant: str = "plus",
    store_c: bool = False,
    workers: int = 1,
    seed: int = 0,
    kernels: Kernels = "tiled",
    wave_size: Optional[int] = None,
    callback: Optional[Callable[[EpochStats], None]] = None,
) -> History:
    """
    Train a model for hyper.epochs epochs of one variant.

    Args:
        tensor: Train tensor
        test: Test tensor for RMSE/MAE, or None
        model: Model, updated in place
        hyper: Hyperparameters
        variant: One of VARIANTS
        store_c: Plus only; calculate-vs-store switch for the core phase
        workers: Thread count
        seed: Base seed
        kernels: 'tiled', 'flat' or a KernelBackend
        wave_size: Batches per wave; None derives it from the dims
        callback: Called with each epoch's stats

    Returns:
        History with one record per epoch

    Raises:
        DivergenceError: when the train loss is not finite after an epoch
    """
    hyper.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")
    history = History(variant)
    if hyper.epochs == 0:
        return history

    runner = create_runner(
        variant, tensor, model, hyper, workers, seed, kernels, wave_size, store_c=store_c
    )
    logger.debug("%s: wave size %d, %d worker(s)", variant, runner.wave_size, workers)

    for epoch in range(1, hyper.epochs + 1):
        stats = runner.run_epoch(epoch)
        stats.train_loss = loss(model, tensor, hyper.reg_a, hyper.reg_b, workers)
        if not math.isfinite(stats.train_loss):
            raise DivergenceError(epoch, stats.train_loss)
        if test is not None and test.nnz:
            metrics = evaluate(model, test, workers)
            stats.test_rmse, stats.test_mae = metrics.rmse, metrics.mae
        history.append(stats)
        logger.info(
            "%s epoch %d: loss %.6g, test rmse %s, %.3fs (factor %.3fs, core %.3fs)",
            variant,
            epoch,
            stats.train_loss,
            "n/a" if stats.test_rmse is None else f"{stats.test_rmse:.6f}",
            stats.seconds,
            stats.factor_seconds,
            stats.core_seconds,
        )
        if callback is not None:
            callback(stats)
    return history
