#!/usr/bin/env python3
"""
Test suite for layercode.

Usage:
    pytest test.py                  # Everything, acceptance-scale runs included
    python test.py                  # Quick unit tests
    python test.py --full           # Unit tests plus the 5000-job experiments
"""

import json
import math
import argparse
import functools
import itertools

import numpy as np
import pytest

from layercode import (APIUsageError, DecodingError, MissingMiniJobError,
    NonInvertibleError, UnstableQueueError, round_half_up)
from layercode.field import (FieldMatrix, FieldPrime, coding_prime, ff_add, ff_inv, ff_mul,
    ff_sub, find_prime_above, is_prime, mat_mul_transpose, matmul_mod)
from layercode.chunking import (ChunkParams, LayeredAccumulator, MiniJob, all_mini_jobs,
    cumulative_fraction, decompose, integer_product, layer_sizes, mini_jobs_of_layer,
    recompose, resolution_assemble)
from layercode.polycode import (CodeParams, compute_task, decode, encode,
    interpolate_coefficients, lagrange_basis, num_tasks, task_complexity)
from layercode.scheduler import (SchedulerConfig, WorkerProfile, erlang_profile,
    hamilton_round, kappa_of_theta, solve_split, total_kappa)
from layercode.analysis import (ArrivalProcess, ServiceStats, computation_times,
    kingman_delay, layer_bounds, mean_in_system, queueing_delay, service_lower_bound)
from layercode.simulator import (JobRecord, SimConfig, Simulation, histogram, paired,
    replicate, run, success_rate, summarize)
from layercode import cli, sweep, vector

WORKER_RATES = [385.95, 650.92, 373.40, 415.75, 373.98]
P101 = FieldPrime(101)
P10007 = FieldPrime(10007)


### Finite field
def test_scalar_arithmetic():
    p7 = FieldPrime(7)
    assert ff_mul(3, 5, p7) == 1
    assert ff_inv(1, P101) == 1
    assert ff_inv(3, p7) == 5
    assert ff_add(5, 4, p7) == 2
    assert ff_sub(2, 5, p7) == 4
    with pytest.raises(APIUsageError):
        ff_add(7, 1, p7)

def test_inverse_of_zero():
    with pytest.raises(NonInvertibleError, match='non-invertible element'):
        ff_inv(0, P101)

def test_field_axioms():
    rng = np.random.default_rng(0)
    p = P10007
    for _ in range(200):
        a, b, c = (int(v) for v in rng.integers(0, p.p, size=3))
        assert ff_mul(ff_mul(a, b, p), c, p) == ff_mul(a, ff_mul(b, c, p), p)
        assert ff_mul(a, ff_add(b, c, p), p) == ff_add(ff_mul(a, b, p), ff_mul(a, c, p), p)
        if a:
            assert ff_mul(a, ff_inv(a, p), p) == 1

def test_primes():
    assert [n for n in range(30) if is_prime(n)] == [2, 3, 5, 7, 11, 13, 17, 19, 23, 29]
    assert is_prime(2**61 - 1)
    assert not is_prime(2**61 + 1)
    assert find_prime_above(6).p == 7
    assert find_prime_above(100).p == 101
    assert find_prime_above(2**16).p == 65537
    assert find_prime_above(2).p == 3
    with pytest.raises(APIUsageError):
        find_prime_above(1)
    with pytest.raises(APIUsageError):
        FieldPrime(100)

def test_coding_prime():
    # n=4 rows of base-256 chunks: 4*255**2 = 260100
    p = coding_prime(4, 256, 1060)
    assert p.p > 4 * 255**2
    assert is_prime(p.p)
    assert coding_prime(1, 2, 50).p == 53

def test_mat_mul_transpose_small():
    p7 = FieldPrime(7)
    eye = FieldMatrix.identity(2, p7)
    assert mat_mul_transpose(eye, eye) == eye

    a = FieldMatrix([[1], [2]], P101)
    b = FieldMatrix([[3], [4]], P101)
    assert mat_mul_transpose(a, b).entries == [11]

    with pytest.raises(APIUsageError):
        mat_mul_transpose(FieldMatrix.zeros(3, 2, P101), FieldMatrix.zeros(2, 2, P101))
    with pytest.raises(APIUsageError):
        mat_mul_transpose(FieldMatrix.zeros(2, 2, P101), FieldMatrix.zeros(2, 2, p7))

def test_mat_mul_transpose_matches_schoolbook():
    rng = np.random.default_rng(1)
    a = FieldMatrix.random(4, 3, P10007, rng)
    b = FieldMatrix.random(4, 2, P10007, rng)
    out = mat_mul_transpose(a, b)
    assert out.shape == (3, 2)
    for i in range(3):
        for j in range(2):
            expected = sum(int(a.values[r, i]) * int(b.values[r, j]) for r in range(4)) % P10007.p
            assert int(out.values[i, j]) == expected

def test_matmul_mod_blocked_and_object_paths():
    rng = np.random.default_rng(2)
    for p in (2**31 - 1, find_prime_above(2**40).p):
        x = rng.integers(0, 2**30, size=(3, 7)).astype(np.int64) % p
        y = rng.integers(0, 2**30, size=(7, 2)).astype(np.int64) % p
        expected = np.mod(np.dot(x.astype(object), y.astype(object)), p)
        assert np.array_equal(np.asarray(matmul_mod(x, y, p), dtype=object), expected)

def test_field_matrix_is_immutable():
    m = FieldMatrix([[1, 2]], P101)
    with pytest.raises(AttributeError):
        m.values = None
    with pytest.raises(ValueError):
        m.values[0, 0] = 5
    with pytest.raises(APIUsageError):
        FieldMatrix([[101]], P101)
    assert FieldMatrix.from_array([[-1, 205]], P101).entries == [100, 3]

def test_no_wraparound_equals_integer_product():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 10, size=(5, 3))
        b = rng.integers(0, 10, size=(5, 4))
        out = mat_mul_transpose(FieldMatrix(a, P10007), FieldMatrix(b, P10007))
        assert np.array_equal(out.to_numpy(), a.T @ b)


### Chunking
def test_decompose_scalar():
    params = ChunkParams(q=2, d=8, m=2)
    chunked = decompose([[0xABCD]], params)
    assert [int(c[0, 0]) for c in chunked.chunks] == [0xCD, 0xAB]
    assert [int(c[0, 0]) for c in decompose([[0]], params).chunks] == [0, 0]

    params = ChunkParams(q=5, d=2, m=3)
    chunked = decompose([[12345]], params)
    assert sum(int(c[0, 0]) * 25**i for i, c in enumerate(chunked.chunks)) == 12345
    assert all(0 <= int(c[0, 0]) < 25 for c in chunked.chunks)

def test_decompose_range_and_round_trip():
    params = ChunkParams(q=2, d=8, m=2)
    with pytest.raises(APIUsageError):
        decompose([[2**16]], params)
    with pytest.raises(APIUsageError):
        decompose([[-1]], params)
    with pytest.raises(APIUsageError):
        ChunkParams(q=4)

    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.integers(0, 2**16, size=(3, 5))
        assert np.array_equal(recompose(decompose(m, params), params), m)

def test_layer_sizes():
    assert layer_sizes(1) == [1]
    assert layer_sizes(2) == [1, 2, 1]
    assert layer_sizes(3) == [1, 2, 3, 2, 1]
    for m in range(1, 33):
        assert sum(layer_sizes(m)) == m**2
    assert [cumulative_fraction(l, 2) for l in range(3)] == [0.25, 0.75, 1.0]

def test_mini_jobs_of_layer():
    assert [(j.i, j.j) for j in mini_jobs_of_layer(1, 2)] == [(1, 0), (0, 1)]
    assert [(j.i, j.j) for j in mini_jobs_of_layer(0, 2)] == [(1, 1)]
    assert [(j.i, j.j) for j in mini_jobs_of_layer(0, 1)] == [(0, 0)]
    assert mini_jobs_of_layer(1, 2, d=8)[0].weight_exponent == 8
    for m in range(1, 6):
        for l in range(2*m - 1):
            jobs = mini_jobs_of_layer(l, m)
            assert all(j.i + j.j == 2*m - 2 - l for j in jobs)
            assert [j.i for j in jobs] == sorted((j.i for j in jobs), reverse=True)
        assert len(all_mini_jobs(m)) == m**2

    with pytest.raises(APIUsageError):
        mini_jobs_of_layer(3, 2)
    with pytest.raises(APIUsageError):
        mini_jobs_of_layer(-1, 2)

def _chunk_products(a, b, params):
    ac, bc = decompose(a, params), decompose(b, params)
    return {(i, j): integer_product(ac[i], bc[j]) for i in range(params.m) for j in range(params.m)}

def test_three_layer_decomposition():
    params = ChunkParams(q=2, d=8, m=2)
    rng = np.random.default_rng(5)
    a = rng.integers(0, 2**16, size=(3, 3))
    b = rng.integers(0, 2**16, size=(3, 3))
    products = _chunk_products(a, b, params)

    top = products[(1, 1)] * 2**16
    assert np.array_equal(resolution_assemble(products, 0, params), top)
    full = top + (products[(1, 0)] + products[(0, 1)]) * 2**8 + products[(0, 0)]
    assert np.array_equal(resolution_assemble(products, 2, params), full)
    assert np.array_equal(full, integer_product(a, b))

def test_scalar_layers():
    params = ChunkParams(q=2, d=8, m=2)
    alpha, beta = 0xBEEF, 0x1234
    products = _chunk_products([[alpha]], [[beta]], params)
    a1, a0, b1, b0 = 0xBE, 0xEF, 0x12, 0x34
    assert int(resolution_assemble(products, 0, params)[0, 0]) == a1*b1 * 2**16
    assert int(resolution_assemble(products, 1, params)[0, 0]) == a1*b1 * 2**16 + (a1*b0 + a0*b1) * 2**8
    assert int(resolution_assemble(products, 2, params)[0, 0]) == alpha * beta

def test_full_resolution_matches_integer_product():
    rng = np.random.default_rng(6)
    for trial in range(100):
        m = int(rng.integers(1, 4))
        params = ChunkParams(q=2, d=int(rng.integers(1, 9)), m=m)
        n, c1, c2 = (int(v) for v in rng.integers(1, 5, size=3))
        a = rng.integers(0, params.element_bound, size=(n, c1))
        b = rng.integers(0, params.element_bound, size=(n, c2))
        out = resolution_assemble(_chunk_products(a, b, params), params.num_layers - 1, params)
        assert np.array_equal(out, integer_product(a, b)), trial

def test_refinement_adds_only_lower_terms():
    params = ChunkParams(q=2, d=4, m=3)
    rng = np.random.default_rng(7)
    a = rng.integers(0, params.element_bound, size=(2, 2))
    b = rng.integers(0, params.element_bound, size=(2, 2))
    products = _chunk_products(a, b, params)
    for l in range(params.num_layers):
        for l2 in range(l + 1, params.num_layers):
            diff = resolution_assemble(products, l2, params) - resolution_assemble(products, l, params)
            expected = sum(products[(i, j)] * 2**((i + j) * params.d)
                for (i, j) in products if l2 >= (2*params.m - 2) - (i + j) > l)
            assert np.array_equal(diff, expected)

def test_missing_mini_job():
    params = ChunkParams(q=2, d=8, m=2)
    products = _chunk_products([[1]], [[2]], params)
    del products[(0, 1)]
    with pytest.raises(MissingMiniJobError, match=r'layer=1, i=0, j=1'):
        resolution_assemble(products, 1, params)
    assert resolution_assemble(products, 0, params).shape == (1, 1)

def test_accumulator_enforces_layer_order():
    params = ChunkParams(q=2, d=8, m=2)
    acc = LayeredAccumulator(params, (1, 1))
    products = {MiniJob(0, 1, 1, 16): np.array([[3]])}
    with pytest.raises(APIUsageError):
        acc.absorb(1, products)
    assert int(acc.absorb(0, products)[0, 0]) == 3 * 2**16
    assert acc.completed_layers == 1


### Polynomial codes
def test_uncoded_passthrough():
    a = FieldMatrix([[1, 2], [3, 4]], P101)
    b = FieldMatrix([[5], [6]], P101)
    params = CodeParams(1, 1, 1, P101)
    tasks = encode(a, b, params)
    assert len(tasks) == 1
    assert tasks[0].x_block == a and tasks[0].y_block == b
    assert decode([compute_task(tasks[0])], params) == mat_mul_transpose(a, b)

def test_task_counts():
    params = CodeParams(2, 1, 1.5, P101)
    assert params.num_tasks == 3
    assert len(set(params.eval_points)) == 3
    assert num_tasks(1000, 1.06) == 1060
    assert num_tasks(2, 1.25) == 3
    assert num_tasks(100, 1.0) == 100
    assert round_half_up(2.5) == 3
    with pytest.raises(APIUsageError):
        CodeParams(2, 2, 2.0, FieldPrime(7))
    with pytest.raises(APIUsageError):
        CodeParams(2, 2, 0.9, P101)

def test_encoded_blocks_at_one():
    rng = np.random.default_rng(8)
    a = FieldMatrix.random(3, 4, P10007, rng)
    b = FieldMatrix.random(3, 4, P10007, rng)
    params = CodeParams(2, 2, 1.0, P10007)
    task = encode(a, b, params)[0]
    assert task.eval_point == 1
    a0, a1 = a.hsplit(2)
    b0, b1 = b.hsplit(2)
    assert task.x_block == a0 + a1
    assert task.y_block == b0 + b1

def test_decode_from_every_subset():
    rng = np.random.default_rng(9)
    a = FieldMatrix.random(4, 4, P10007, rng)
    b = FieldMatrix.random(4, 4, P10007, rng)
    params = CodeParams(2, 2, 1.5, P10007)
    results = [compute_task(t) for t in encode(a, b, params)]
    assert len(results) == 6

    expected = mat_mul_transpose(a, b)
    subsets = list(itertools.combinations(results, 4))
    assert len(subsets) == 15
    for subset in subsets:
        assert decode(subset, params) == expected

def test_decode_random_instances():
    rng = np.random.default_rng(10)
    for trial in range(100):
        n1, n2 = (int(v) for v in rng.integers(1, 4, size=2))
        omega = [1, 1.5, 2][trial % 3]
        rows = int(rng.integers(1, 6))
        a = rng.integers(0, 10, size=(rows, n1 * int(rng.integers(1, 3))))
        b = rng.integers(0, 10, size=(rows, n2 * int(rng.integers(1, 3))))
        params = CodeParams(n1, n2, omega, P10007)
        results = [compute_task(t) for t in encode(FieldMatrix(a, P10007), FieldMatrix(b, P10007), params)]
        order = rng.permutation(len(results))
        decoded = decode([results[i] for i in order], params)
        assert np.array_equal(decoded.to_numpy(), a.T @ b), trial

def test_decode_padding_and_errors():
    rng = np.random.default_rng(11)
    a = FieldMatrix.random(3, 3, P10007, rng)
    b = FieldMatrix.random(3, 5, P10007, rng)
    params = CodeParams(2, 2, 1.0, P10007)
    with pytest.raises(APIUsageError):
        encode(a, b, params)

    results = [compute_task(t) for t in encode(a, b, params, pad=True)]
    assert decode(results, params, shape=(3, 5)) == mat_mul_transpose(a, b)

    with pytest.raises(DecodingError):
        decode(results[:3], params)
    with pytest.raises(DecodingError):
        decode([results[0]] * 4, params)

def test_interpolate_coefficients():
    assert interpolate_coefficients([(1, 5)], P101) == [5]
    assert interpolate_coefficients([(1, 2), (2, 3)], FieldPrime(7)) == [1, 1]

    rng = np.random.default_rng(12)
    xs = [int(x) for x in rng.choice(np.arange(1, 101), size=5, replace=False)]
    points = [(x, int(rng.integers(0, 101))) for x in xs]
    coeffs = interpolate_coefficients(points, P101)
    for x, y in points:
        assert sum(c * pow(x, d, 101) for d, c in enumerate(coeffs)) % 101 == y

    with pytest.raises(DecodingError):
        interpolate_coefficients([(1, 2), (1, 3)], P101)
    with pytest.raises(DecodingError, match='at least one point'):
        interpolate_coefficients([], P101)
    with pytest.raises(DecodingError, match='at least one evaluation point'):
        lagrange_basis([], P101)

def test_layered_task_complexity():
    assert task_complexity(50, 2) == 12.5
    assert task_complexity(50, 1) == 50


### Scheduler
def test_kappa_closed_form():
    unit = WorkerProfile(0, 1.0, 1.0)
    assert kappa_of_theta(unit, 2.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert kappa_of_theta(unit, 1e-12, 1.0) < 1e-9

    m, gamma, theta = 2.0, 0.5, 3.0
    deterministic = WorkerProfile(1, m, m*m)
    expected = (1 / (2*gamma*m)) * (-1 + math.sqrt(1 + 4*gamma*theta))
    assert kappa_of_theta(deterministic, theta, gamma) == pytest.approx(expected, rel=1e-12)

    noisy = WorkerProfile(2, 3.0, 13.0)
    b = 3.0 + 0.7*4.0
    textbook = (b / (2*0.7*9)) * (-1 + math.sqrt(1 + 4*0.7*9*5.0/b**2))
    assert kappa_of_theta(noisy, 5.0, 0.7) == pytest.approx(textbook, rel=1e-9)

    with pytest.raises(APIUsageError):
        kappa_of_theta(unit, 0.0, 1.0)

def test_kappa_is_increasing():
    profiles = [erlang_profile(p, r, 100, 500) for p, r in enumerate(WORKER_RATES)]
    grid = np.logspace(-6, 12, 60)
    totals = [total_kappa(profiles, t, 1.0) for t in grid]
    assert all(b > a for a, b in zip(totals, totals[1:]))

def test_split_symmetry_and_single_worker():
    profiles = [WorkerProfile(p, 2.0, 5.0) for p in range(5)]
    assert solve_split(profiles, SchedulerConfig(1000)).int_kappa == [200] * 5
    assert solve_split(profiles[:1], SchedulerConfig(37)).int_kappa == [37]
    with pytest.raises(APIUsageError):
        SchedulerConfig(0)
    with pytest.raises(APIUsageError):
        solve_split([], SchedulerConfig(5))

def test_split_heterogeneous_workers():
    profiles = [erlang_profile(p, r, 1000, 50) for p, r in enumerate(WORKER_RATES)]
    split = solve_split(profiles, SchedulerConfig(1060, gamma=1.0))
    assert abs(sum(split.real_kappa) - 1060) < 1e-6
    assert sum(split.int_kappa) == 1060

    by_rate = sorted(range(5), key=lambda p: WORKER_RATES[p])
    real = [split.real_kappa[p] for p in by_rate]
    ints = [split.int_kappa[p] for p in by_rate]
    assert all(b > a for a, b in zip(real, real[1:]))
    assert all(b >= a for a, b in zip(ints, ints[1:]))
    assert split.int_kappa[1] == max(split.int_kappa)

def test_split_randomized_sums():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        means = rng.uniform(0.1, 10, size=n)
        profiles = [WorkerProfile(p, float(m), float(m*m + rng.uniform(0, 5))) for p, m in enumerate(means)]
        total = int(rng.integers(1, 2000))
        split = solve_split(profiles, SchedulerConfig(total, gamma=float(rng.uniform(0.1, 2))))
        assert sum(split.int_kappa) == total
        assert min(split.int_kappa) >= 0
        assert abs(sum(split.real_kappa) - total) < 1e-6

def test_dominance():
    fast = WorkerProfile(0, 1.0, 1.5)
    slow = WorkerProfile(1, 2.0, 4.5)
    split = solve_split([fast, slow], SchedulerConfig(50))
    assert split.real_kappa[0] > split.real_kappa[1]

def test_hamilton_ties_go_to_lower_id():
    assert hamilton_round([1.5, 1.5], 3, [0, 1]) == [2, 1]
    assert hamilton_round([1.5, 1.5], 3, [1, 0]) == [1, 2]
    assert hamilton_round([0.2, 0.9, 1.9], 3, [0, 1, 2]) == [0, 1, 2]

def test_erlang_profile_moments():
    profile = erlang_profile(0, 4.0, 10, 2.0)
    assert profile.mean_job_time == pytest.approx(5.0)
    assert profile.sigma2 == pytest.approx(10 * 0.25)


### Analysis
def test_service_lower_bound():
    assert service_lower_bound([WorkerProfile(0, 5.0, 25.0)]) == 5.0
    assert service_lower_bound([WorkerProfile(p, 10.0, 100.0) for p in range(2)]) == pytest.approx(5.0)
    profiles = [erlang_profile(p, r, 1000, 50) for p, r in enumerate(WORKER_RATES)]
    assert service_lower_bound(profiles) == pytest.approx(50000 / 2200, abs=1e-9)
    with pytest.raises(APIUsageError):
        service_lower_bound([])

def test_kingman():
    deterministic = ArrivalProcess(100.0, 100.0**2)
    assert deterministic.ca2 == 0
    service = ServiceStats.with_cs2(22.727, 0.0)
    assert kingman_delay(service, deterministic) == pytest.approx(22.727)

    poisson = ArrivalProcess.poisson(0.01)
    assert poisson.ca2 == pytest.approx(1.0)
    assert kingman_delay(ServiceStats.with_cs2(22.727, 0.2), poisson) == pytest.approx(26.74, abs=0.01)
    assert kingman_delay(service, ArrivalProcess.poisson(1e-9)) == pytest.approx(22.727, rel=1e-6)

    with pytest.raises(UnstableQueueError, match='unstable queue'):
        kingman_delay(ServiceStats.with_cs2(150.0, 1.0), poisson)

def test_layer_bounds():
    profiles = [erlang_profile(p, r, 1000, 50) for p, r in enumerate(WORKER_RATES)]
    full = service_lower_bound(profiles)
    arrivals = ArrivalProcess.poisson(0.01)
    service = ServiceStats.with_cs2(full, 0.2)
    bounds = layer_bounds(profiles, 2, arrivals, service)
    assert bounds.ts_bounds == pytest.approx([5.68, 17.05, 22.73], abs=0.01)
    assert bounds.ts_bounds[-1] == full
    gaps = [d - t for d, t in zip(bounds.delay_bounds, bounds.ts_bounds)]
    assert max(gaps) - min(gaps) < 1e-12
    assert gaps[0] == pytest.approx(queueing_delay(service, arrivals))

    single = layer_bounds(profiles, 1, arrivals, service)
    assert single.ts_bounds == [full]

def test_service_stats_from_samples():
    stats = ServiceStats.from_samples([1.0, 3.0])
    assert stats.mean_service == 2.0
    assert stats.cs2 == pytest.approx(0.25)
    with pytest.raises(APIUsageError):
        ServiceStats.from_samples([])

def test_mean_in_system_by_hand():
    first, second = JobRecord(0, 0.0, 1), JobRecord(1, 1.0, 1)
    first.departure_time, second.departure_time = 2.0, 3.0
    assert mean_in_system([first, second]) == pytest.approx(4 / 3)
    assert mean_in_system([]) == 0.0


### Simulator
def scaled_config(**overrides):
    kwargs = dict(rates=WORKER_RATES, arrival_rate=0.01, k=100, omega=1.06, m=2, c=500,
        num_jobs=5000, seed=2024)
    kwargs.update(overrides)
    return SimConfig(**kwargs)

@functools.lru_cache(maxsize=None)
def scaled_run(**overrides):
    return replicate(scaled_config(**overrides))

def test_single_job_reference_trace():
    config = SimConfig(rates=[400.0], arrival_rate=1e-3, k=1, omega=1, m=1, c=50, num_jobs=1, seed=7)
    records = run(config)
    children = np.random.SeedSequence(7).spawn(3)
    arrival = np.random.default_rng(children[0]).standard_exponential(1024)[0] / 1e-3
    service = np.random.default_rng(children[1]).standard_exponential(1024)[0] * 50 / 400
    assert len(records) == 1
    assert records[0].arrival_time == arrival
    assert records[0].service_start == arrival
    assert records[0].delays[0] == pytest.approx(service, rel=1e-9)
    assert records[0].completed

def test_deterministic_schedule():
    config = SimConfig(rates=[2.0, 2.0], arrival_rate=1e-3, k=2, omega=1, m=1, c=4,
        num_jobs=1, seed=3, service='deterministic')
    assert run(config)[0].delays == [pytest.approx(2.0)]

    # Layer 1 has two mini-jobs queued back to back on both workers
    layered = paired(config, m=2)
    assert run(layered)[0].delays == [pytest.approx(0.5), pytest.approx(1.5), pytest.approx(2.0)]
    serial = paired(layered, intra_layer='serial')
    assert run(serial)[0].delays == [pytest.approx(0.5), pytest.approx(1.5), pytest.approx(2.0)]

def test_dispatch_layer_counts():
    sim = Simulation(SimConfig(rates=[1.0, 2.0], arrival_rate=1.0, k=3, omega=5/3, m=2, c=1, num_jobs=0))
    assert sim.num_tasks == 5
    assert sum(sim.split.int_kappa) == 5
    assert sim.split.ranges()[0] == (0, sim.split.int_kappa[0])
    assert sim.split.ranges()[1] == (sim.split.int_kappa[0], 5)

    sim._start_next_job()
    assert sim.active is None
    sim.master.append(JobRecord(0, 0.0, 3))
    sim._start_next_job()
    assert len(sim.active.minijobs) == 1
    assignments = sim.dispatch_layer(sim.active, 1, sim.split)
    assert [(job.i, job.j) for job, _ in assignments] == [(1, 0), (0, 1)]
    assert sim.diagnostics['dispatched_tasks'] == 3 * 5
    assert assignments[0][1] == sim.split.int_kappa

def test_purge_abandons_in_service_tasks():
    config = SimConfig(rates=[1.0, 1.0], arrival_rate=1e-3, k=1, omega=2, m=1, c=1,
        num_jobs=10, seed=5, service='deterministic')
    sim = Simulation(config)
    sim.run()
    assert sim.diagnostics['abandoned'] == 10
    assert sim.diagnostics['stale_events'] == 10
    assert sim.diagnostics['late_results'] == 0

    sim = Simulation(paired(config, purge='run-to-completion'))
    sim.run()
    assert sim.diagnostics['abandoned'] == 0
    assert sim.diagnostics['late_results'] == 10

def test_task_accounting():
    for overrides in (dict(), dict(purge='run-to-completion'), dict(intra_layer='serial'), dict(deadline=8.0, arrival_rate=0.04)):
        sim = Simulation(scaled_config(num_jobs=200, **overrides))
        sim.run()
        d = sim.diagnostics
        assert d['dispatched_tasks'] == d['completed_tasks'] + d['abandoned'] + d['purged_queued'], overrides

class ConservingSimulation(Simulation):
    '''Checks after every handled event that no worker idles over queued live tasks'''
    checks = 0

    def check_idle_workers(self):
        self.checks += 1
        for worker in self.workers:
            if worker.in_service is not None:
                continue
            live = [block for block in worker.queue if block[0].live and block[1] < block[2]]
            assert not live, (self.now, worker.worker_id)

    def on_arrival(self, job_id):
        super().on_arrival(job_id)
        self.check_idle_workers()

    def on_task_completion(self, worker_id, token):
        super().on_task_completion(worker_id, token)
        self.check_idle_workers()

    def on_deadline(self, job_id):
        super().on_deadline(job_id)
        self.check_idle_workers()

    def apply_deadline(self, job, now):
        action = super().apply_deadline(job, now)
        self.check_idle_workers()
        return action

def test_work_conservation():
    for overrides in (dict(), dict(purge='run-to-completion'), dict(intra_layer='serial'),
            dict(deadline=8.0, arrival_rate=0.04), dict(deadline=8.0, arrival_rate=0.04, purge='run-to-completion')):
        sim = ConservingSimulation(scaled_config(num_jobs=200, **overrides))
        records = sim.run()
        assert len(records) == 200
        assert sim.checks >= sim.diagnostics['events'], overrides
    assert sim.diagnostics['terminations'] > 0

def test_determinism_and_infinite_deadline():
    config = scaled_config(num_jobs=300)
    assert run(config) == run(config)
    assert run(paired(config, deadline=math.inf)) == run(config)

def test_simulation_invariants():
    records = run(scaled_config(num_jobs=500))
    starts = [r.service_start for r in records]
    assert all(b >= a for a, b in zip(starts, starts[1:]))
    for r in records:
        assert r.completed and r.last_layer == 2
        assert r.delays[0] < r.delays[1] < r.delays[2]
        assert r.arrival_time <= r.service_start
    assert [success_rate(records, l) for l in range(3)] == [1.0, 1.0, 1.0]

def test_unlayered_reduces_to_single_layer():
    records = run(scaled_config(num_jobs=50, m=1))
    assert all(len(r.delays) == 1 and r.last_layer == 0 for r in records)

def test_deadline_terminates_busy_jobs():
    config = SimConfig(rates=[1.0], arrival_rate=100.0, k=1, omega=1, m=2, c=4, num_jobs=3,
        seed=11, deadline=2.0, service='deterministic')
    records = run(config)
    for r in records[:2]:
        assert r.terminated and r.last_layer == 0
        assert r.delays[0] is not None and r.delays[1] is None
        assert r.departure_time == pytest.approx(r.service_start + 2.0)
    assert records[2].completed
    assert records[2].delays[2] == pytest.approx(records[2].service_start + 4.0 - records[2].arrival_time)
    assert success_rate(records, 0) == 1.0
    assert success_rate(records, 2) == pytest.approx(1 / 3)

def test_deadline_with_empty_queue_continues():
    config = SimConfig(rates=[1.0], arrival_rate=1e-3, k=1, omega=1, m=2, c=4, num_jobs=1,
        seed=11, deadline=0.5, service='deterministic')
    assert run(config)[0].completed

def test_invalid_configs():
    for overrides in (dict(omega=0.9), dict(rates=[]), dict(rates=[1.0, -1.0]), dict(m=0),
            dict(intra_layer='sideways'), dict(deadline=-1.0), dict(with_payload=True)):
        with pytest.raises(APIUsageError):
            Simulation(scaled_config(**overrides))
    assert run(scaled_config(num_jobs=0)) == []

def test_payload_mode_verifies_products():
    config = SimConfig(rates=WORKER_RATES, arrival_rate=0.01, k=4, omega=1.5, m=2, c=500,
        num_jobs=20, seed=9, with_payload=True, payload_dim=5, payload_n1=2, payload_n2=2)
    records = run(config)
    assert all(r.payload_ok is True for r in records)

    unlayered = run(paired(config, m=1))
    assert all(r.payload_ok is True for r in unlayered)

def test_summary_and_histogram():
    records, diagnostics = replicate(scaled_config(num_jobs=200))
    stats = summarize(records, 3)
    assert stats['jobs'] == 200 and stats['terminated'] == 0
    assert stats['layer'][0]['mean_delay'] < stats['layer'][2]['mean_delay']
    rows = histogram(records, 3, bins=10)
    assert len(rows) == 30
    assert sum(r['count'] for r in rows if r['layer'] == 1) == 200
    assert rows[0]['bin_lo'] == rows[10]['bin_lo']
    assert diagnostics['unstable'] is False


### Replication backends and sweep grids
def test_serial_backend():
    backend = vector.make('Serial')
    assert backend.map(abs, [-1, 2, -3]) == [1, 2, 3]
    backend.close()
    with pytest.raises(APIUsageError):
        backend.map(abs, [1])
    with pytest.raises(APIUsageError):
        vector.make('Ray')
    with pytest.raises(APIUsageError):
        vector.make('Serial', batch_size=4)

def test_multiprocessing_matches_serial():
    configs = [scaled_config(num_jobs=30, seed=s) for s in range(3)]
    backend = vector.make('Multiprocessing', num_workers=1)
    try:
        parallel = backend.map(replicate, configs)
    finally:
        backend.close()
    serial = vector.make('Serial').map(replicate, configs)
    assert [r for r, _ in parallel] == [r for r, _ in serial]

def test_multiprocessing_recovers_from_failed_map():
    import time
    backend = vector.Multiprocessing(num_workers=2, overwork=True)
    try:
        # Worker 0 fails at once while worker 1 is still sleeping
        with pytest.raises(RuntimeError, match='ValueError'):
            backend.map(time.sleep, [-1, 0.5])
        assert backend.map(abs, [-2, 3, -4]) == [2, 3, 4]
        with pytest.raises(RuntimeError, match='failed'):
            backend.map(time.sleep, [-1, 0.5])
    finally:
        backend.close()
    assert backend.closed
    assert not any(p.is_alive() for p in backend.processes)

def test_multiprocessing_detects_dead_worker():
    import os
    backend = vector.Multiprocessing(num_workers=1)
    try:
        with pytest.raises(RuntimeError, match='exited with code 3'):
            backend.map(os._exit, [3])
        with pytest.raises(RuntimeError, match='No live worker'):
            backend.map(abs, [-1])
    finally:
        backend.close()
    assert backend.closed

def test_multiprocessing_refuses_overwork():
    import psutil
    cores = psutil.cpu_count(logical=False) or 1
    with pytest.raises(APIUsageError):
        vector.Multiprocessing(num_workers=cores + 1)

def test_sweep_grids():
    assert sweep.Linear(1.0, 1.1).grid(6) == [1.0, 1.02, 1.04, 1.06, 1.08, 1.1]
    assert sweep.Log(1.0, 100.0).grid(3) == [1.0, 10.0, 100.0]
    assert sweep.grid_from_config({'values': [1.1, 1.0, 1.1]}) == [1.0, 1.1]
    assert sweep.grid_from_config({'distribution': 'uniform', 'min': 10, 'max': 40, 'num': 4}) == [10.0, 20.0, 30.0, 40.0]
    with pytest.raises(APIUsageError):
        sweep.grid_from_config({})
    with pytest.raises(APIUsageError):
        sweep.grid_from_config({'values': []})
    with pytest.raises(APIUsageError):
        sweep.grid_from_config({'distribution': 'normal', 'min': 1, 'max': 2, 'num': 2})


### CLI
def _read(path):
    with open(path) as f:
        return f.read()

def _main(*argv):
    return cli.main(list(argv) + ['--output.quiet', 'True'])

def test_cli_simulate_zero_jobs(tmp_path):
    out = str(tmp_path / 'jobs.csv')
    assert _main('simulate', '--jobs', '0', '--out', out) == 0
    lines = _read(out).splitlines()
    assert lines[0].startswith('# layercode ') and 'seed=42' in lines[0]
    assert lines[1:] == ['job_id,arrival_time,service_start,status,last_layer,D0,D1,D2']

def test_cli_simulate_is_byte_identical(tmp_path):
    paths = [str(tmp_path / f'run{i}.csv') for i in range(2)]
    for path in paths:
        assert _main('simulate', '--config', 'scaled', '--jobs', '100', '--out', path) == 0
    assert _read(paths[0]) == _read(paths[1])
    assert _read(paths[0] + '.hist.csv') == _read(paths[1] + '.hist.csv')
    rows = _read(paths[0]).splitlines()[2:]
    assert len(rows) == 100
    assert rows[0].split(',')[3] == 'completed'
    assert len(rows[0].split(',')[1].split('.')[1]) == 6

def test_cli_seed_precedence(tmp_path, monkeypatch):
    out = str(tmp_path / 'jobs.csv')
    monkeypatch.setenv('LAYERCODE_SEED', '77')
    assert _main('simulate', '--jobs', '0', '--out', out) == 0
    assert 'seed=77' in _read(out).splitlines()[0]
    assert _main('simulate', '--jobs', '0', '--seed', '5', '--out', out) == 0
    assert 'seed=5' in _read(out).splitlines()[0]

def test_cli_bounds(tmp_path):
    out = str(tmp_path / 'bounds.csv')
    assert _main('bounds', '--analysis.cs2', '0.2', '--out', out) == 0
    rows = [line.split(',') for line in _read(out).splitlines()[2:]]
    assert [r[3] for r in rows] == ['5.681818', '17.045455', '22.727273']
    assert [r[1] for r in rows] == ['1', '2', '1']

def test_cli_verify_codec(tmp_path):
    out = str(tmp_path / 'codec.csv')
    assert _main('verify-codec', '--verify.trials', '12', '--out', out) == 0
    rows = _read(out).splitlines()[2:]
    assert len(rows) == 12
    assert all(r.endswith(',true') for r in rows)

def test_cli_sweeps(tmp_path):
    out = str(tmp_path / 'omega.json')
    assert _main('sweep-omega', '--config', 'scaled', '--jobs', '40',
        '--sweep.omega.values', '[1.0, 1.1]', '--format', 'json', '--out', out) == 0
    data = json.loads(_read(out))
    assert data['provenance']['seed'] == 42
    assert [(r['omega'], r['series'], r['layer']) for r in data['rows']] == [
        (1.0, 'layered', 0), (1.0, 'layered', 1), (1.0, 'layered', 2), (1.0, 'unlayered', 0),
        (1.1, 'layered', 0), (1.1, 'layered', 1), (1.1, 'layered', 2), (1.1, 'unlayered', 0)]

    out = str(tmp_path / 'deadline.csv')
    assert _main('sweep-deadline', '--config', 'scaled', '--jobs', '40', '--deadline', '10', '--out', out) == 0
    rows = _read(out).splitlines()[2:]
    assert len(rows) == 4
    assert all(r.startswith('10.000000,') for r in rows)

def test_cli_errors(tmp_path):
    assert _main('simulate', '--config', str(tmp_path / 'missing.ini')) == 1
    assert _main('simulate', '--no-such-flag', '3') == 1
    assert _main('simulate', '--out', str(tmp_path / 'no' / 'dir.csv')) == 1
    assert _main('simulate', '--omega', '0.5', '--jobs', '0') == 1
    assert _main('teleport') == 1
    bad = tmp_path / 'bad.ini'
    bad.write_text('[sim\nk = 1\n')
    assert _main('simulate', '--config', str(bad)) == 1


### Acceptance-scale experiments
def test_layer_delay_ordering():
    layered, _ = scaled_run(omega=1.06)
    unlayered, _ = scaled_run(omega=1.06, m=1)
    means = [summarize(layered, 3)['layer'][l]['mean_delay'] for l in range(3)]
    assert means[0] < means[1] < means[2]
    assert means[1] - means[0] > means[2] - means[1]
    baseline = summarize(unlayered, 1)['layer'][0]['mean_delay']
    assert abs(means[2] - baseline) / baseline < 0.05

def test_bound_tightness():
    # Small k leaves too few spare tasks per mini-job for the bound to be tight
    config = scaled_config(k=1000, c=50)
    layered = run(config)
    profiles = [erlang_profile(p, r, config.k, config.c) for p, r in enumerate(config.rates)]
    bounds = layer_bounds(profiles, 2, ArrivalProcess.poisson(0.01),
        ServiceStats.with_cs2(service_lower_bound(profiles), 0.0))
    for l in range(3):
        mean = computation_times(layered, l).mean()
        assert bounds.ts_bounds[l] <= mean <= 1.1 * bounds.ts_bounds[l], l

def test_delay_spread_grows_with_layer():
    layered, _ = scaled_run(omega=1.06)
    stats = summarize(layered, 3)['layer']
    assert stats[0]['var_delay'] < stats[2]['var_delay']

def test_littles_law():
    layered, _ = scaled_run(omega=1.06)
    in_system = mean_in_system(layered)
    expected = 0.01 * summarize(layered, 3)['layer'][2]['mean_delay']
    assert abs(in_system - expected) / expected < 0.1

def test_deadline_success_rates():
    layered, _ = scaled_run(omega=1.06, arrival_rate=0.04, deadline=10.0)
    unlayered, _ = scaled_run(omega=1.06, arrival_rate=0.04, deadline=10.0, m=1)
    rates = [success_rate(layered, l) for l in range(3)]
    assert rates[0] >= 0.99
    assert rates[0] >= rates[1] >= rates[2]
    assert success_rate(unlayered, 0) <= 0.5

def test_acceptance_runs_are_deterministic():
    config = scaled_config(num_jobs=1000)
    assert run(config) == run(config)


def run_full_test_suite():
    """Run every test in this file, acceptance experiments included."""
    print('\n' + '='*60)
    print('FULL TEST SUITE')
    print('='*60 + '\n')
    status = pytest.main([__file__, '-q'])
    print('\n' + '='*60)
    print('ALL TESTS PASSED!' if status == 0 else 'FAILURES, see above')
    print('='*60 + '\n')
    return status


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='layercode test suite')
    parser.add_argument('--full', action='store_true',
                        help='Include the 5000-job acceptance experiments')
    args = parser.parse_args()

    if args.full:
        raise SystemExit(run_full_test_suite())
    raise SystemExit(pytest.main([__file__, '-q', '-k', 'not (layer_delay_ordering or bound_tightness '
        'or delay_spread or littles_law or deadline_success or acceptance_runs)']))
