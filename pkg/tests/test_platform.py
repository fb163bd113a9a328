import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetkrylov.krylov import DistributedSystem, distributed_spmv, halo_exchange
from hetkrylov.mesh import BoundarySpec, StructuredMesh, assemble_laplacian
from hetkrylov.partition import partition_weighted
from hetkrylov.platform import (
    CommLedger,
    DeadlockError,
    DependencyViolation,
    PlatformConfig,
    ScheduleError,
    WorkerSpec,
    global_reduce,
    iteration_time_model,
    overlap_time,
    preset,
    run_workers,
    schedule_iteration_time,
    tree_sum,
)


def work_task(flops, result=None):
    def task(ctx):
        ctx.charge(flops)
        yield ctx.allreduce([0.0])
        return result
    return task


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PlatformConfig(workers=[])
        with pytest.raises(ValueError):
            PlatformConfig.with_speeds([1.0, 0.0])
        with pytest.raises(ValueError):
            PlatformConfig.uniform(2, clock="sundial")
        with pytest.raises(ValueError):
            PlatformConfig.uniform(2, reduction_latency=-1.0)

    def test_costs(self):
        pl = PlatformConfig.uniform(5, reduction_latency=2e-6, p2p_latency=1e-6, p2p_bandwidth=1e9)
        assert pl.reduction_cost() == 2e-6 * 3
        assert PlatformConfig.uniform(1).reduction_cost() == 0.0
        assert pl.message_cost(1000) == 1e-6 + 1e-6

    def test_presets(self):
        pl = preset("tesla-c2050", workers=[WorkerSpec(0), WorkerSpec(1, 4.0)])
        assert pl.size == 2 and pl.mem_bandwidth > pl.link_bandwidth
        with pytest.raises(KeyError):
            preset("cray-1")


class TestReductions:
    def test_tree_sum_order(self):
        assert tree_sum([1.0, 2.0, 3.0, 4.0]) == 10.0
        # ((a+b)+(c+d)) rather than left fold
        vals = [1e16, 1.0, -1e16, 1.0]
        assert tree_sum(vals) == (1e16 + 1.0) + (-1e16 + 1.0)

    def test_global_reduce_counts_once(self):
        led = CommLedger()
        out = global_reduce([np.array([1.0, 2.0]), np.array([3.0, 4.0])], led, phase=1)
        np.testing.assert_array_equal(out, [4.0, 6.0])
        assert led.global_reductions == 1

    def test_zero_values(self):
        assert global_reduce([0.0, 0.0, 0.0]) == 0.0

    def test_broadcast(self):
        def make(r):
            def task(ctx):
                (s,) = yield ctx.allreduce([float(r + 1)])
                return s
            return task
        run = run_workers([make(r) for r in range(4)], PlatformConfig.uniform(4))
        assert run.results == [10.0] * 4
        assert run.ledger.global_reductions == 1

    def test_fused_tuple_is_one(self):
        def task(ctx):
            out = yield ctx.allreduce([1.0, 2.0])
            return out
        run = run_workers([task, task], PlatformConfig.uniform(2))
        assert run.results[0] == (2.0, 4.0)
        assert run.ledger.global_reductions == 1

    def test_partial_participation_deadlocks(self):
        def quitter(ctx):
            return None
            yield

        def waiter(ctx):
            yield ctx.allreduce([1.0])
        with pytest.raises(DeadlockError, match="missing ranks"):
            run_workers([waiter, quitter], PlatformConfig.uniform(2))


class TestVirtualClock:
    def test_single_worker(self):
        run = run_workers([work_task(5000)], PlatformConfig.uniform(1, reference_rate=1e6))
        assert run.ledger.elapsed == pytest.approx(5e-3, rel=1e-15)
        assert run.ledger.p2p_messages == 0

    def test_equal_workers(self):
        run = run_workers([work_task(1000), work_task(1000)], PlatformConfig.uniform(2))
        c = run.ledger.worker_compute
        assert abs(c[0] - c[1]) <= 1e-12 * c[0]

    def test_speed_factors(self):
        run = run_workers([work_task(1000), work_task(1000)], PlatformConfig.with_speeds([4.0, 1.0]))
        c = run.ledger.worker_compute
        assert c[1] == pytest.approx(4 * c[0], rel=1e-12)
        # rebalanced 80/20 equalises
        run = run_workers([work_task(800), work_task(200)], PlatformConfig.with_speeds([4.0, 1.0]))
        c = run.ledger.worker_compute
        assert c[1] == pytest.approx(c[0], rel=1e-12)

    def test_reduction_waits_for_slowest(self):
        pl = PlatformConfig.with_speeds([1.0, 1.0], reduction_latency=1e-3, reference_rate=1e6)
        run = run_workers([work_task(1000), work_task(3000)], pl)
        assert run.ledger.worker_elapsed == pytest.approx([3e-3 + 1e-3] * 2)


class TestHaloExchange:
    def test_no_neighbours(self):
        m = StructuredMesh.cube(3)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        _, led = distributed_spmv(DistributedSystem(A), [np.ones(27)])
        assert led.p2p_messages == 0

    def test_two_cell_chain(self):
        m = StructuredMesh(2, 1, 1)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        system = DistributedSystem(A, np.array([0, 1]), m)
        x = np.array([3.0, 5.0])
        y, led = distributed_spmv(system, system.scatter(x), PlatformConfig.uniform(2))
        np.testing.assert_array_equal(system.gather(y), A.to_dense() @ x)
        assert led.p2p_messages == 2 and led.p2p_bytes == 16

    @pytest.mark.parametrize("p", [2, 3, 5])
    def test_gather_oracle(self, p):
        m = StructuredMesh(5, 4, 3)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        plan = partition_weighted(m, np.full(p, 1 / p))
        system = DistributedSystem(A, plan, m)
        field = np.random.default_rng(p).standard_normal(m.n_cells)
        parts = system.scatter(field)

        def make(r):
            def task(ctx):
                return (yield from halo_exchange(ctx, system.subdomains[r], parts[r]))
            return task
        run = run_workers([make(r) for r in range(p)], PlatformConfig.uniform(p))
        for s, halo in zip(system.subdomains, run.results):
            np.testing.assert_array_equal(halo, field[s.halo])
        assert run.ledger.p2p_messages % 2 == 0
        assert run.ledger.p2p_messages == sum(len(s.neighbors) for s in system.subdomains)
        assert run.ledger.p2p_bytes == 8 * sum(s.n_halo for s in system.subdomains)

    def test_size_mismatch(self):
        def a(ctx):
            yield ctx.exchange({1: np.ones(2)}, {1: 2})

        def b(ctx):
            yield ctx.exchange({0: np.ones(3)}, {0: 2})
        with pytest.raises(ScheduleError):
            run_workers([a, b], PlatformConfig.uniform(2))

    def test_never_sent(self):
        def a(ctx):
            yield ctx.exchange({}, {1: 1})

        def b(ctx):
            return 0
            yield
        with pytest.raises(DeadlockError, match="halo messages from \\[1\\]"):
            run_workers([a, b], PlatformConfig.uniform(2))


class TestOverlap:
    def test_max_semantics(self):
        assert overlap_time(3.0, 0.0) == 3.0
        assert overlap_time(1e-6, 2.0) == 2.0

    def test_pending_read_raises(self):
        def task(ctx):
            h = yield ctx.ireduce([1.0])
            _ = h.value
            yield ctx.wait(h)
        with pytest.raises(DependencyViolation):
            run_workers([task, task], PlatformConfig.uniform(2))

    def test_overlapped_equals_sequential_numerics(self):
        def make(r, overlapped):
            def task(ctx):
                if overlapped:
                    h = yield ctx.ireduce([r + 0.5])
                    ctx.charge(10**6)
                    (s,) = yield ctx.wait(h)
                else:
                    (s,) = yield ctx.allreduce([r + 0.5])
                    ctx.charge(10**6)
                return s
            return task
        pl = PlatformConfig.uniform(4, reduction_latency=1e-4)
        seq = run_workers([make(r, False) for r in range(4)], pl)
        ovl = run_workers([make(r, True) for r in range(4)], pl)
        assert seq.results == ovl.results
        red = pl.reduction_cost()
        assert seq.ledger.elapsed == pytest.approx(red + 1e-3)
        assert ovl.ledger.elapsed == pytest.approx(max(red, 1e-3))

    @settings(max_examples=30, deadline=None)
    @given(lg=st.floats(1e-9, 1e-3), p=st.integers(2, 16))
    def test_pipelined_schedule_faster(self, lg, p):
        pl = PlatformConfig.uniform(p, reduction_latency=lg)
        flops, ovl = 10**6, 4 * 10**5
        assert schedule_iteration_time(pl, flops, ovl, True) < schedule_iteration_time(pl, flops, ovl, False)

    def test_speedup_monotone_in_latency(self):
        speedups = []
        for lg in np.geomspace(1e-8, 1e-2, 13):
            pl = PlatformConfig.uniform(8, reduction_latency=lg)
            std = schedule_iteration_time(pl, 10**6, 4 * 10**5, False)
            pip = schedule_iteration_time(pl, 10**6, 4 * 10**5, True)
            speedups.append(std / pip)
        assert all(b >= a - 1e-12 for a, b in zip(speedups, speedups[1:]))

    def test_time_model(self):
        assert iteration_time_model(1.0, 0.5, 0.1, 3, overlapped=False) == pytest.approx(1.3)
        assert iteration_time_model(1.0, 0.5, 0.1, 1, overlapped=True) == pytest.approx(1.0)
        assert iteration_time_model(1.0, 0.05, 0.1, 1, overlapped=True) == pytest.approx(1.05)


def test_threads_match_serial():
    m = StructuredMesh(6, 5, 4)
    A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
    system = DistributedSystem(A, partition_weighted(m, np.full(4, 0.25)), m)
    x = system.scatter(np.arange(m.n_cells, dtype=float))
    y1, l1 = distributed_spmv(system, x, PlatformConfig.uniform(4))
    y2, l2 = distributed_spmv(system, x, PlatformConfig.uniform(4, scheduler="threads"))
    for a, b in zip(y1, y2):
        np.testing.assert_array_equal(a, b)
    assert l1.elapsed == l2.elapsed and l1.p2p_bytes == l2.p2p_bytes


def test_worker_error_propagates():
    def bad(ctx):
        raise RuntimeError("boom")
        yield
    with pytest.raises(RuntimeError, match="boom"):
        run_workers([bad], PlatformConfig.uniform(1))


def test_reduction_cost_formula():
    for p in (2, 3, 8, 9):
        pl = PlatformConfig.uniform(p, reduction_latency=1.0)
        assert pl.reduction_cost() == math.ceil(math.log2(p))
