import json

import numpy as np
import pytest

import decomposition
from conftest import fiber_tensor
from decomposition import (
    CORE,
    FACTOR,
    CCache,
    CoreGradAccumulator,
    DivergenceError,
    EpochStats,
    History,
    WorkerState,
    accumulate_core_grads_plus,
    apply_core_update,
    compute_c_batch,
    compute_d_batch,
    create_runner,
    cut_waves,
    default_wave_size,
    epoch_fasttucker,
    epoch_fastertucker,
    epoch_fastertucker_coo,
    epoch_plus,
    fill_workspace,
    predict_batch,
    sample_core_gradient,
    sample_factor_gradient,
    sample_objective,
    train,
    update_factors_plus,
)
from config import VARIANTS
from evaluation import loss, measured_costs, predicted_costs, rmse
from model import Hyperparams, init_model, predict_element, predict_entries
from synthgen import PLANTED, SynthSpec, generate_planted
from tensor_store import (
    FIXED_COMPLEMENT,
    FIXED_MODE,
    SparseTensor,
    build_mode_index,
    sample_batches_global,
    sample_batches_mode,
)
from tile_kernels import create_kernels

EPS = 1e-6


def one_wave(tensor, batch_size=16, seed=0):
    plan = sample_batches_global(tensor, batch_size, seed)
    return plan, plan.wave(np.arange(len(plan)))


def planted(noise=0.0, nnz=600, dim=12, seed=4):
    spec = SynthSpec(order=3, dim=dim, nnz=nnz, mode=PLANTED, rank_j=4, rank=3, noise=noise, seed=seed)
    tensor, truth = generate_planted(spec)
    return tensor, truth.astype(np.float64)


# ============================================================================
# PIPELINE PIECES
# ============================================================================


def test_compute_d_batch_products():
    rng = np.random.default_rng(0)
    for order in (3, 4, 5):
        cs = [rng.standard_normal((4, 3)) for _ in range(order)]
        ds, products = compute_d_batch(cs)
        assert products == order * (order - 2)
        for n in range(order):
            expected = np.prod([cs[k] for k in range(order) if k != n], axis=0)
            np.testing.assert_allclose(ds[n], expected, rtol=1e-12)


def test_predict_batch_both_sides_agree(small_model, small_tensor):
    kernels = create_kernels("tiled")
    _, wave = one_wave(small_tensor)
    cs = compute_c_batch(small_model, wave, kernels)
    ds, _ = compute_d_batch(cs)
    rows = small_model.factors[0][wave.indices[..., 0]] * wave.mask
    c_side = predict_batch(ds[0], c1=cs[0])
    a_side = predict_batch(ds[0], a1=rows, b1=small_model.cores[0], kernels=kernels)
    np.testing.assert_allclose(c_side, a_side, rtol=1e-10)

    b, m = 2, 5
    assert c_side[b, m, 0] == pytest.approx(predict_element(small_model, tuple(wave.indices[b, m])))
    with pytest.raises(ValueError):
        predict_batch(ds[0])


def test_fill_workspace_residual_masked(small_model, small_tensor):
    plan, wave = one_wave(small_tensor)
    ws = fill_workspace(small_model, wave, "tiled", FACTOR)
    expected = small_tensor.values[plan.positions] - predict_entries(small_model, small_tensor.indices[plan.positions])
    got = ws.residual[..., 0][wave.mask[..., 0]]
    np.testing.assert_allclose(got, expected, rtol=1e-9)
    assert np.all(ws.residual[~wave.mask[..., 0]] == 0.0)


def test_default_wave_size():
    assert default_wave_size((16, 16, 16), 16) == 1
    assert default_wave_size((1000, 2000, 3000), 16) == 15
    assert default_wave_size((10**6,) * 3, 16) == 64


def test_cut_waves_respects_rounds(fibers):
    index = build_mode_index(fibers, 0, FIXED_MODE)
    plan = sample_batches_mode(fibers, index, 0, 4, seed=0)
    waves = cut_waves(plan, 8, by_round=True)
    assert sorted(np.concatenate(waves).tolist()) == list(range(len(plan)))
    for ids in waves:
        assert len(set(plan.rounds[ids].tolist())) == 1
        assert len(set(plan.buckets[ids].tolist())) == len(ids)


def test_cut_waves_sequential_and_budget(small_tensor):
    plan = sample_batches_global(small_tensor, 16, seed=0)
    assert [w.tolist() for w in cut_waves(plan, 1)] == [[b] for b in range(len(plan))]
    waves = cut_waves(plan, 3)
    assert [len(w) for w in waves] == [3, 3, 2]


# ============================================================================
# GRADIENTS AND UPDATE RULES
# ============================================================================


@pytest.mark.parametrize("mode", [0, 1, 2])
def test_factor_gradient_finite_difference(small_model, mode):
    index, value, reg = (3, 4, 5), 2.5, 0.1
    grad = sample_factor_gradient(small_model, index, value, mode, reg)
    for j in range(small_model.ranks[mode]):
        plus, minus = small_model.copy(), small_model.copy()
        plus.factors[mode][index[mode], j] += EPS
        minus.factors[mode][index[mode], j] -= EPS
        fd = (sample_objective(plus, index, value, reg, 0.0) - sample_objective(minus, index, value, reg, 0.0)) / (2 * EPS)
        assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("mode", [0, 2])
def test_core_gradient_finite_difference(small_model, mode):
    index, value, reg = (1, 2, 3), 1.5, 0.05
    grad = sample_core_gradient(small_model, index, value, mode, reg)
    for j, r in [(0, 0), (1, 2), (small_model.ranks[mode] - 1, 1)]:
        plus, minus = small_model.copy(), small_model.copy()
        plus.cores[mode][j, r] += EPS
        minus.cores[mode][j, r] -= EPS
        fd = (sample_objective(plus, index, value, 0.0, reg) - sample_objective(minus, index, value, 0.0, reg)) / (2 * EPS)
        assert grad[j, r] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_update_factors_plus_single_sample(small_model):
    index, value = (2, 3, 4), 3.0
    t = SparseTensor(np.array([index]), np.array([value]), small_model.dims)
    _, wave = one_wave(t, batch_size=1)
    hyper = Hyperparams(lr_a=0.01, reg_a=0.1)
    before = small_model.copy()
    ws = fill_workspace(small_model, wave, "tiled", FACTOR)
    update_factors_plus(small_model, wave, hyper, ws)
    for n in range(3):
        grad = sample_factor_gradient(before, index, value, n, hyper.reg_a)
        delta = small_model.factors[n][index[n]] - before.factors[n][index[n]]
        np.testing.assert_allclose(delta, -hyper.lr_a * grad, rtol=1e-9, atol=1e-14)


def test_update_factors_plus_uses_snapshot(small_model, small_tensor):
    _, wave = one_wave(small_tensor)
    hyper = Hyperparams(lr_a=0.01)
    reordered = small_model.copy()

    ws = fill_workspace(small_model, wave, "flat", FACTOR)
    update_factors_plus(small_model, wave, hyper, ws, "flat")

    # same deltas computed mode by mode from the untouched snapshot
    snapshot = reordered.copy()
    ws2 = fill_workspace(snapshot, wave, "flat", FACTOR)
    for n in reversed(range(3)):
        delta = hyper.lr_a * (ws2.residual * ws2.dbt[n] - hyper.reg_a * ws2.rows[n]) * wave.mask
        decomposition.scatter_rows(reordered.factors[n], wave.indices[..., n], delta, wave.mask)
    for a, b in zip(small_model.factors, reordered.factors):
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_core_accumulation_matches_per_sample(small_model, small_tensor):
    plan, wave = one_wave(small_tensor)
    acc = CoreGradAccumulator.zeros_like(small_model)
    ws = fill_workspace(small_model, wave, "tiled", CORE)
    accumulate_core_grads_plus(wave, ws, acc)
    assert acc.count == small_tensor.nnz
    for n in range(3):
        expected = -sum(
            sample_core_gradient(small_model, tuple(small_tensor.indices[p]), small_tensor.values[p], n)
            for p in plan.positions
        )
        np.testing.assert_allclose(acc.grads[n], expected, rtol=1e-9, atol=1e-12)


def test_apply_core_update(small_model):
    acc = CoreGradAccumulator.zeros_like(small_model)
    acc.grads[0] += 10.0
    before = [b.copy() for b in small_model.cores]
    hyper = Hyperparams(lr_b=0.1, reg_b=0.5)
    apply_core_update(small_model, acc, 5, hyper)
    expected = before[0] + 0.1 * (10.0 / 5 - 0.5 * before[0])
    np.testing.assert_allclose(small_model.cores[0], expected)
    np.testing.assert_allclose(small_model.cores[1], before[1] * (1 - 0.05))
    with pytest.raises(ValueError):
        apply_core_update(small_model, acc, 0, hyper)


def test_accumulator_merge_and_reset(small_model):
    a = CoreGradAccumulator.zeros_like(small_model)
    b = CoreGradAccumulator.zeros_like(small_model)
    a.grads[1] += 1.0
    b.grads[1] += 2.0
    b.count = 3
    a.merge(b)
    assert np.all(a.grads[1] == 3.0) and a.count == 3
    a.reset()
    assert a.count == 0 and not np.any(a.grads[1])


def dense_tensor(dims=(4, 5, 6), seed=0):
    indices = np.array(list(np.ndindex(*dims)), dtype=np.int64)
    values = np.random.default_rng(seed).uniform(1.0, 5.0, size=len(indices))
    return SparseTensor(indices, values, dims)


def central_difference(model, matrix_of, position, index, value, reg_a, reg_b):
    plus, minus = model.copy(), model.copy()
    matrix_of(plus)[position] += EPS
    matrix_of(minus)[position] -= EPS
    high = sample_objective(plus, index, value, reg_a, reg_b)
    low = sample_objective(minus, index, value, reg_a, reg_b)
    return (high - low) / (2 * EPS)


@pytest.mark.parametrize("seed", range(50))
def test_gradients_and_update_directions_random_instances(seed):
    rng = np.random.default_rng(seed)
    model = init_model((6, 6, 6), (2, 2, 2), 3, seed=seed, scale=1.0, dtype=np.float64)
    index = tuple(int(i) for i in rng.integers(0, 6, size=3))
    value = float(rng.uniform(1.0, 5.0))
    reg_a, reg_b, lr = 0.1, 0.05, 0.01
    t = SparseTensor(np.array([index]), np.array([value]), model.dims)
    _, wave = one_wave(t, batch_size=1)

    updated = model.copy()
    ws = fill_workspace(updated, wave, "flat", FACTOR)
    update_factors_plus(updated, wave, Hyperparams(lr_a=lr, reg_a=reg_a), ws, "flat")
    acc = CoreGradAccumulator.zeros_like(model)
    accumulate_core_grads_plus(wave, fill_workspace(model, wave, "flat", CORE), acc)

    for mode in range(3):
        row = index[mode]
        fd_a = np.array([
            central_difference(model, lambda m: m.factors[mode], (row, j), index, value, reg_a, reg_b)
            for j in range(2)
        ])
        fd_b = np.array([
            [central_difference(model, lambda m: m.cores[mode], (j, r), index, value, reg_a, reg_b) for r in range(3)]
            for j in range(2)
        ])
        np.testing.assert_allclose(sample_factor_gradient(model, index, value, mode, reg_a), fd_a, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(sample_core_gradient(model, index, value, mode, reg_b), fd_b, rtol=1e-5, atol=1e-8)

        delta = updated.factors[mode][row] - model.factors[mode][row]
        np.testing.assert_allclose(delta, -lr * fd_a, rtol=1e-5, atol=1e-10)
        np.testing.assert_allclose(acc.grads[mode], -(fd_b - reg_b * model.cores[mode]), rtol=1e-5, atol=1e-8)


RULE_HYPER = Hyperparams(lr_a=0.05, lr_b=0.05, reg_a=0.02, reg_b=0.02, batch_size=4)


def rule_case(trial):
    tensor = dense_tensor(seed=trial)
    model = init_model(tensor.dims, (3, 4, 2), 3, seed=trial, scale=0.7, dtype=np.float64)
    return tensor, model, trial % 3


def batch_entries(wave):
    k = int(wave.sizes[0])
    return [tuple(int(i) for i in row) for row in wave.indices[0, :k]], wave.values[0, :k, 0]


def mean_core_step(before, entries, mode):
    grads = [sample_core_gradient(before, i, v, mode, RULE_HYPER.reg_b) for i, v in zip(*entries)]
    return before.cores[mode] - RULE_HYPER.lr_b * np.mean(grads, axis=0)


@pytest.mark.parametrize("trial", range(20))
def test_fasttucker_factor_batch_matches_scalar_rule(trial):
    tensor, model, mode = rule_case(trial)
    plan = sample_batches_mode(tensor, build_mode_index(tensor, mode, FIXED_MODE), mode, 4, trial, FIXED_MODE)
    ids = np.array([trial % len(plan)])
    entries = batch_entries(plan.wave(ids))
    before = model.copy()
    decomposition._fasttucker_factor_wave(model, plan, mode, RULE_HYPER, create_kernels("tiled"), WorkerState(), ids)

    grads = [sample_factor_gradient(before, i, v, mode, RULE_HYPER.reg_a) for i, v in zip(*entries)]
    row = entries[0][0][mode]
    expected = before.factors[mode][row] - RULE_HYPER.lr_a * np.mean(grads, axis=0)
    np.testing.assert_allclose(model.factors[mode][row], expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_fasttucker_core_batch_matches_scalar_rule(trial):
    tensor, model, mode = rule_case(trial)
    plan = sample_batches_global(tensor, 4, trial)
    ids = np.array([trial % len(plan)])
    entries = batch_entries(plan.wave(ids))
    before = model.copy()
    decomposition._fasttucker_core_wave(model, plan, mode, RULE_HYPER, create_kernels("tiled"), WorkerState(), ids)
    np.testing.assert_allclose(model.cores[mode], mean_core_step(before, entries, mode), rtol=0, atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_fastertucker_factor_batch_matches_scalar_rule(trial):
    tensor, model, mode = rule_case(trial)
    index = build_mode_index(tensor, mode, FIXED_COMPLEMENT)
    plan = sample_batches_mode(tensor, index, mode, 4, trial, FIXED_COMPLEMENT)
    ids = np.array([trial % len(plan)])
    entries = batch_entries(plan.wave(ids))
    kernels = create_kernels("tiled")
    cache = CCache(model, kernels)
    cache.refresh(model)
    before = model.copy()
    decomposition._fastertucker_factor_wave(model, plan, mode, RULE_HYPER, cache, kernels, False, WorkerState(), ids)

    size = len(entries[1])
    for i, v in zip(*entries):
        grad = sample_factor_gradient(before, i, v, mode, RULE_HYPER.reg_a)
        expected = before.factors[mode][i[mode]] - RULE_HYPER.lr_a * grad / size
        np.testing.assert_allclose(model.factors[mode][i[mode]], expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_fastertucker_core_batch_matches_scalar_rule(trial):
    tensor, model, mode = rule_case(trial)
    index = build_mode_index(tensor, mode, FIXED_COMPLEMENT)
    plan = sample_batches_mode(tensor, index, mode, 4, trial, FIXED_COMPLEMENT)
    ids = np.array([trial % len(plan)])
    entries = batch_entries(plan.wave(ids))
    kernels = create_kernels("tiled")
    cache = CCache(model, kernels)
    cache.refresh(model)
    cache.invalidate(mode)
    before = model.copy()
    decomposition._fastertucker_core_wave(model, plan, mode, RULE_HYPER, cache, kernels, False, WorkerState(), ids)
    np.testing.assert_allclose(model.cores[mode], mean_core_step(before, entries, mode), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_fasttucker_block_step_never_increases_objective(seed):
    rng = np.random.default_rng(seed)
    model = init_model((6, 6, 6), (2, 2, 2), 3, seed=seed, scale=1.0, dtype=np.float64)
    index = tuple(int(i) for i in rng.integers(0, 6, size=3))
    value = float(rng.uniform(1.0, 5.0))
    plan = sample_batches_global(SparseTensor(np.array([index]), np.array([value]), model.dims), 1, seed)
    hyper = Hyperparams(lr_a=1e-3, lr_b=1e-3, reg_a=0.01, reg_b=0.01, batch_size=1)
    kernels = create_kernels("tiled")
    for mode in range(3):
        for block in (decomposition._fasttucker_factor_wave, decomposition._fasttucker_core_wave):
            before = sample_objective(model, index, value, hyper.reg_a, hyper.reg_b)
            block(model, plan, mode, hyper, kernels, WorkerState(), np.array([0]))
            assert sample_objective(model, index, value, hyper.reg_a, hyper.reg_b) <= before + 1e-12


def test_ccache_staleness(small_model):
    cache = CCache(small_model)
    mults = cache.refresh(small_model)
    assert mults == sum(i * j * 3 for i, j in zip(small_model.dims, small_model.ranks))
    assert cache.all_fresh
    np.testing.assert_allclose(cache.rows(1, np.array([2])), small_model.factors[1][[2]] @ small_model.cores[1])
    cache.invalidate(1)
    with pytest.raises(AssertionError):
        cache.rows(1, np.array([0]))
    cache.refresh(small_model, 1)
    assert cache.all_fresh


# ============================================================================
# EPOCHS
# ============================================================================


@pytest.mark.parametrize("refresh", ["batch", "block"])
def test_fasttucker_matches_fastertucker(small_tensor, refresh):
    hyper = Hyperparams(lr_a=0.01, lr_b=0.01, reg_a=0.01, reg_b=0.01, epochs=1, batch_size=1)
    plans = {}
    for n in range(3):
        plans[(FACTOR, n)] = sample_batches_global(small_tensor, 1, seed=10 + n)
        plans[(CORE, n)] = sample_batches_global(small_tensor, 1, seed=20 + n)

    fast = init_model(small_tensor.dims, (4, 5, 6), 3, seed=1, scale=0.6, dtype=np.float64)
    faster = fast.copy()
    epoch_fasttucker(small_tensor, None, fast, hyper, wave_size=1, plans=plans)

    cache = CCache(faster)
    cache.refresh(faster)
    epoch_fastertucker(small_tensor, None, faster, cache, hyper, wave_size=1, plans=plans, refresh=refresh)

    for a, b in zip(fast.factors + fast.cores, faster.factors + faster.cores):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("variant", ["fasttucker", "fastertucker", "fastertucker-coo", "plus"])
def test_factor_costs_match_closed_form(variant):
    tensor = fiber_tensor(order=3, dim=16)
    ranks, rank = (4, 5, 6), 3
    model = init_model(tensor.dims, ranks, rank, seed=0, scale=0.3)
    hyper = Hyperparams(epochs=1, batch_size=16)
    runner = create_runner(variant, tensor, model, hyper, 1, 0, "flat", None)
    stats = runner.run_epoch(1)
    assert measured_costs(stats, FACTOR) == predicted_costs(3, 16, rank, ranks, variant)


@pytest.mark.parametrize("order", [3, 4])
def test_plus_costs_grow_with_order(order):
    tensor = fiber_tensor(order=order, dim=16)
    ranks = (4,) * order
    model = init_model(tensor.dims, ranks, 2, seed=0, scale=0.3)
    stats = epoch_plus(tensor, model, Hyperparams(batch_size=16), kernels="flat")
    assert measured_costs(stats, FACTOR) == predicted_costs(order, 16, 2, ranks, "plus")


TILE_SIZE_READS = {"fasttucker": 2352, "fastertucker": 1632, "fastertucker-coo": 3072, "plus": 1536}


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("order", [3, 4, 5])
def test_costs_at_tile_sizes(order, variant):
    tensor = fiber_tensor(order=order, dim=16)
    ranks = (16,) * order
    model = init_model(tensor.dims, ranks, 16, seed=0, scale=0.1)
    runner = create_runner(variant, tensor, model, Hyperparams(epochs=1, batch_size=16), 1, 0, "flat", None)
    measured = measured_costs(runner.run_epoch(1), FACTOR)
    assert measured == predicted_costs(order, 16, 16, ranks, variant)
    if order == 3:
        assert measured.reads == TILE_SIZE_READS[variant]
    assert model.is_finite()


def test_store_c_changes_core_counters_not_result():
    tensor = fiber_tensor(order=3, dim=16)
    ranks, rank, m = (4, 4, 4), 3, 16
    base = init_model(tensor.dims, ranks, rank, seed=2, scale=0.4, dtype=np.float64)
    calc, store = base.copy(), base.copy()
    hyper = Hyperparams(lr_a=0.01, lr_b=0.01, batch_size=m)
    calc_stats = epoch_plus(tensor, calc, hyper, seed=3)
    store_stats = epoch_plus(tensor, store, hyper, seed=3, store_c=True)

    for a, b in zip(calc.factors + calc.cores, store.factors + store.cores):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    calc_core = measured_costs(calc_stats, CORE)
    store_core = measured_costs(store_stats, CORE)
    assert calc_core.reads == (m + rank) * 12
    assert calc_core.c_mults == m * rank * 12
    assert store_core.reads == m * (12 + 3 * rank)
    assert store_core.c_mults == 0
    assert store_stats.costs.total.cache_mults == sum(16 * 4 * rank for _ in range(3))


@pytest.mark.parametrize("variant", ["fasttucker", "fastertucker", "fastertucker-coo", "plus"])
def test_exact_model_is_stationary(variant):
    tensor, truth = planted(noise=0.0)
    model = truth.copy()
    hyper = Hyperparams(lr_a=0.01, lr_b=0.01, reg_a=0.0, reg_b=0.0, epochs=1, batch_size=8)
    runner = create_runner(variant, tensor, model, hyper, 1, 0, "tiled", None)
    runner.run_epoch(1)
    assert rmse(model, tensor) < 1e-6
    for a, b in zip(model.factors + model.cores, truth.factors + truth.cores):
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_single_worker_is_reproducible(small_tensor):
    hyper = Hyperparams(lr_a=0.01, lr_b=0.01, epochs=1, batch_size=8)
    results = []
    for _ in range(2):
        model = init_model(small_tensor.dims, (4, 4, 4), 4, seed=5, scale=0.5)
        epoch_plus(small_tensor, model, hyper, workers=1, seed=9, wave_size=3)
        results.append(model)
    for a, b in zip(results[0].factors + results[0].cores, results[1].factors + results[1].cores):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("variant", ["fasttucker", "fastertucker", "fastertucker-coo", "plus"])
def test_multi_worker_epoch_runs(variant, small_tensor):
    model = init_model(small_tensor.dims, (4, 4, 4), 4, seed=5, scale=0.5)
    hyper = Hyperparams(lr_a=0.01, lr_b=0.01, epochs=1, batch_size=4)
    stats = create_runner(variant, small_tensor, model, hyper, 4, 0, "tiled", 2).run_epoch(1)
    assert model.is_finite()
    assert stats.costs.total.batches > 0
    assert stats.seconds == pytest.approx(stats.factor_seconds + stats.core_seconds)


def test_fastertucker_rejects_unknown_refresh(small_tensor, small_model):
    with pytest.raises(ValueError):
        epoch_fastertucker_coo(small_tensor, small_model, CCache(small_model), Hyperparams(), refresh="never")


def test_fastertucker_block_refresh_leaves_cache_fresh(small_tensor):
    model = init_model(small_tensor.dims, (4, 4, 4), 4, seed=5, scale=0.5)
    indices = [build_mode_index(small_tensor, n, FIXED_COMPLEMENT) for n in range(3)]
    cache = CCache(model)
    stats = epoch_fastertucker(small_tensor, indices, model, cache, Hyperparams(batch_size=4))
    assert cache.all_fresh
    for n in range(3):
        np.testing.assert_allclose(cache.matrices[n], model.factors[n] @ model.cores[n], rtol=1e-5)
    assert stats.costs.total.cache_mults > 0


# ============================================================================
# TRAINING
# ============================================================================


def test_train_zero_epochs(small_tensor, small_model):
    before = small_model.copy()
    history = train(small_tensor, None, small_model, Hyperparams(epochs=0))
    assert len(history) == 0 and history.last is None
    np.testing.assert_array_equal(before.factors[0], small_model.factors[0])


def test_train_rejects_store_c_for_other_variants(small_tensor, small_model):
    with pytest.raises(ValueError):
        train(small_tensor, None, small_model, Hyperparams(epochs=1), variant="fastertucker", store_c=True)
    with pytest.raises(ValueError):
        train(small_tensor, None, small_model, Hyperparams(epochs=1), variant="cp")


def test_train_divergence(monkeypatch, small_tensor, small_model):
    monkeypatch.setattr(decomposition, "loss", lambda *args, **kwargs: float("nan"))
    with pytest.raises(DivergenceError) as info:
        train(small_tensor, None, small_model, Hyperparams(epochs=3))
    assert info.value.epoch == 1


def test_train_reduces_loss():
    tensor, _ = planted(noise=0.01, nnz=1500, dim=20)
    test = tensor.subset(np.arange(0, tensor.nnz, 10))
    model = init_model(tensor.dims, (4, 4, 4), 3, seed=0, scale=0.8)
    initial = rmse(model, test)
    initial_loss = loss(model, tensor, 1e-4, 1e-4)
    hyper = Hyperparams(lr_a=0.05, lr_b=0.05, reg_a=1e-4, reg_b=1e-4, epochs=15, batch_size=16)
    seen = []
    history = train(tensor, test, model, hyper, variant="plus", seed=1, callback=seen.append)
    assert len(history) == 15 and len(seen) == 15
    assert [s.epoch for s in history] == list(range(1, 16))
    assert history.last.train_loss < 0.5 * initial_loss
    assert history.last.test_rmse < initial


def test_history_files(tmp_path):
    history = History("plus")
    stats = EpochStats(1, "plus", seconds=0.5, factor_seconds=0.2, core_seconds=0.3, train_loss=2.0, test_rmse=0.7, test_mae=0.5)
    history.append(stats)
    jsonl, csv_path = tmp_path / "h.jsonl", tmp_path / "h.csv"
    history.write_jsonl(jsonl)
    history.write_csv(csv_path)
    record = json.loads(jsonl.read_text().splitlines()[0])
    assert record["epoch"] == 1 and record["variant"] == "plus" and record["test_rmse"] == 0.7
    assert set(record) >= {"epoch", "train_loss", "test_rmse", "test_mae", "seconds", "reads", "mults"}
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("epoch,train_loss") and len(lines) == 2
