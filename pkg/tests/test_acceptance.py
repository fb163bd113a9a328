"""Acceptance suite: one test per criterion, verdicts listed in the terminal summary."""

import numpy as np
import pytest

from hetkrylov.krylov import DistributedSystem, SolverConfig, cg_solve, distributed_spmv, pipelined_cg_solve, solve
from hetkrylov.mesh import BoundarySpec, StructuredMesh, assemble_laplacian, assemble_periodic_laplacian
from hetkrylov.partition import partition_weighted
from hetkrylov.perf_model import heterogeneous_decomposition, measure_speed, rebalance_cells, relative_speeds, roofline
from hetkrylov.platform import PlatformConfig, preset, schedule_iteration_time
from hetkrylov.sparse_core import KERNELS, CsrMatrix, arithmetic_intensity

HOT_WALL = BoundarySpec.from_faces(0.0, 1.0)


def cube_system(n, bc=HOT_WALL):
    m = StructuredMesh.cube(n)
    A, b = assemble_laplacian(m, bc)
    return m, A, b


@pytest.mark.criterion(1, "3 reductions/iteration for CG, 1 for pipelined CG")
def test_reduction_counts(detail):
    seen = []
    for n, p in ((8, 1), (8, 4), (10, 3)):
        m, A, b = cube_system(n)
        s = DistributedSystem(A, partition_weighted(m, np.full(p, 1 / p)), m)
        pl = PlatformConfig.uniform(p, reduction_latency=1e-6)
        _, rc = cg_solve(s, b, None, pl)
        _, rp = pipelined_cg_solve(s, b, SolverConfig(variant="pipelined_cg"), pl)
        seen.append(f"{n}^3/p={p}: {rc.loop_reductions}/{rc.iterations} vs {rp.loop_reductions}/{rp.iterations}")
        assert rc.reductions_per_iteration() == [3] * rc.iterations
        assert rp.reductions_per_iteration() == [1] * rp.iterations
    detail("; ".join(seen))


@pytest.mark.criterion(2, "unpreconditioned CG: 64^3 in 280-400, 128^3 in 550-760 iterations")
def test_unpreconditioned_band(detail):
    counts = {}
    for n in (64, 128):
        _, A, b = cube_system(n)
        _, rep = cg_solve(A, b, SolverConfig(tolerance=1e-8))
        assert rep.converged
        counts[n] = rep.iterations
    detail(f"64^3: {counts[64]}, 128^3: {counts[128]}")
    assert 280 <= counts[64] <= 400
    assert 550 <= counts[128] <= 760


@pytest.mark.criterion(3, "AMG-CG: 64^3 in 5-60 iterations, 128^3/64^3 ratio <= 1.5")
def test_amg_band(detail):
    counts = {}
    for n in (64, 128):
        _, A, b = cube_system(n)
        _, rep = cg_solve(A, b, SolverConfig(tolerance=1e-8, preconditioner="amg"))
        assert rep.converged
        counts[n] = rep.iterations
    ratio = counts[128] / counts[64]
    detail(f"64^3: {counts[64]}, 128^3: {counts[128]}, ratio {ratio:.2f}")
    assert 5 <= counts[64] <= 60
    assert ratio <= 1.5


def random_spd_system(rng):
    """Haar-random eigenvectors, log-uniform spectrum in [1, kappa], kappa log-uniform below 1e4."""
    n = int(rng.integers(2, 33))
    kappa = 10 ** rng.uniform(0, 4)
    lam = np.exp(rng.uniform(0, np.log(kappa), n))
    lam[0], lam[-1] = 1.0, kappa
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = (Q * lam) @ Q.T
    A = (A + A.T) / 2
    return CsrMatrix.from_dense(A, symmetric=True), rng.standard_normal(n)


@pytest.mark.criterion(4, "pipelined == standard CG iterate-wise within 1e-6 on 50 random SPD systems")
def test_pipelined_equivalence(detail):
    rng = np.random.default_rng(20240)
    worst, failing = 0.0, 0
    tol = 1e-8
    for _ in range(50):
        A, b = random_spd_system(rng)
        n = A.n_rows
        _, full = cg_solve(A, b, SolverConfig(tolerance=tol, max_iterations=20 * n))
        sys_worst = 0.0
        for k in range(1, full.iterations + 1):
            xc, rc = cg_solve(A, b, SolverConfig(tolerance=tol, max_iterations=k))
            xp, rp = pipelined_cg_solve(A, b, SolverConfig(variant="pipelined_cg", tolerance=tol, max_iterations=k))
            if rc.iterations != rp.iterations:
                continue
            sys_worst = max(sys_worst, np.linalg.norm(xp - xc) / np.linalg.norm(xc))
        worst = max(worst, sys_worst)
        failing += sys_worst > 1e-6
    detail(f"worst relative difference {worst:.2e}, {failing}/50 systems above 1e-6")
    assert worst <= 1e-6


@pytest.mark.criterion(5, "heterogeneous decomposition: >= 10% faster per iteration, imbalance <= 1.1")
def test_heterogeneous_decomposition(detail):
    m = StructuredMesh(200, 100, 50)  # 1M-cell slab
    A, b = assemble_laplacian(m, HOT_WALL)
    pl = PlatformConfig.with_speeds([4.0, 1.0])
    cfg = SolverConfig(tolerance=1e-300, max_iterations=20)
    times = {}
    for mode in ("even", "heterogeneous"):
        dec = heterogeneous_decomposition(A, m, pl, mode=mode)
        _, rep = cg_solve(dec.system, b, cfg, pl)
        times[mode] = rep.time_per_iteration
        if mode == "heterogeneous":
            compute = np.array(rep.comm.worker_compute)
            imbalance = compute.max() / compute.min()
            sizes = dec.plan.achieved_sizes
    gain = 1 - times["heterogeneous"] / times["even"]
    detail(f"time/iteration improvement {gain:.1%}, imbalance {imbalance:.3f}, sizes {sizes.tolist()}")
    assert gain >= 0.10
    assert imbalance <= 1.1


@pytest.mark.criterion(6, "speed, relative speed and rebalance formulas")
def test_speed_formulas(detail):
    assert measure_speed(100, 300, 0.7) == pytest.approx(1000.0, rel=1e-15)
    np.testing.assert_array_equal(relative_speeds([2, 6]), [0.25, 0.75])
    np.testing.assert_array_equal(rebalance_cells(1000, [0.25, 0.75]), [250, 750])
    rng = np.random.default_rng(6)
    for _ in range(1000):
        f = rng.dirichlet(np.ones(int(rng.integers(1, 32))))
        N = int(rng.integers(1, 10**7))
        assert rebalance_cells(N, f).sum() == N
    detail("exact examples and 1000 random vectors")


@pytest.mark.criterion(7, "per-iteration counters 14N/112N, 2N/24N, 2N/16N; intensities 0.125/0.083/0.125")
def test_counters(detail):
    m = StructuredMesh.cube(12)
    A = assemble_periodic_laplacian(m)
    N = m.n_cells
    b = np.random.default_rng(7).standard_normal(N)
    runs = [cg_solve(A, b, SolverConfig(tolerance=1e-300, max_iterations=k))[1].counters for k in (1, 2)]
    d = {name: (getattr(runs[1], name).calls - getattr(runs[0], name).calls,
                getattr(runs[1], name).flops - getattr(runs[0], name).flops,
                getattr(runs[1], name).bytes - getattr(runs[0], name).bytes) for name in ("spmv", "update", "dot")}
    calls, fl, by = d["spmv"]
    assert calls == 1 and (fl, by) == (14 * N, 112 * N)
    calls, fl, by = d["update"]
    assert calls >= 1 and (fl, by) == (calls * 2 * N, calls * 24 * N)
    calls, fl, by = d["dot"]
    assert calls >= 1 and (fl, by) == (calls * 2 * N, calls * 16 * N)
    ai = {k: arithmetic_intensity(k) for k in KERNELS}
    assert ai["spmv_csr"] == 0.125 and ai["dot"] == 0.125 and ai["vector_update"] == 2 / 24
    assert round(ai["vector_update"], 3) == 0.083
    detail(f"N={N}: {d['update'][0]} updates, {d['dot'][0]} dots per iteration")


@pytest.mark.criterion(8, "distributed SpMV == global to 1e-12; solutions across p agree to 1e-8")
def test_distributed_oracle(detail):
    dims = [(n, n, n) for n in range(2, 9)] + [(8, 1, 1), (8, 8, 1), (7, 5, 3), (8, 6, 2), (3, 8, 5), (2, 2, 8)]
    rng = np.random.default_rng(8)
    worst_spmv = worst_sol = 0.0
    for d in dims:
        m = StructuredMesh(*d)
        A, b = assemble_laplacian(m, HOT_WALL)
        x = rng.standard_normal(m.n_cells)
        ref = A.to_scipy() @ x
        sols = []
        for p in (1, 2, 4, 8):
            if p > m.n_cells:
                continue
            s = DistributedSystem(A, partition_weighted(m, np.full(p, 1 / p)), m)
            pl = PlatformConfig.uniform(p)
            y, _ = distributed_spmv(s, s.scatter(x), pl)
            worst_spmv = max(worst_spmv, np.linalg.norm(s.gather(y) - ref) / np.linalg.norm(ref))
            sol, rep = solve(s, b, SolverConfig(tolerance=1e-10), pl)
            assert rep.converged
            sols.append(sol)
        for sol in sols[1:]:
            worst_sol = max(worst_sol, np.linalg.norm(sol - sols[0]) / np.linalg.norm(sols[0]))
    detail(f"{len(dims)} meshes: spmv {worst_spmv:.1e}, solutions {worst_sol:.1e}")
    assert worst_spmv <= 1e-12
    assert worst_sol <= 1e-8


@pytest.mark.criterion(9, "roofline: link-bound with a slow link slot, memory-bound without")
def test_roofline_binding(detail):
    settings = [preset("tesla-c2050"), preset("gtx-titan")]
    rng = np.random.default_rng(9)
    for _ in range(20):
        mem = 10 ** rng.uniform(9, 12)
        settings.append(PlatformConfig.uniform(1, peak_flops=1e15, mem_bandwidth=mem,
                                               link_bandwidth=mem * rng.uniform(0.01, 0.99)))
    for pl in settings:
        assert pl.link_bandwidth < pl.mem_bandwidth
        for k in KERNELS:
            ai = arithmetic_intensity(k)
            pt = roofline(ai, pl.peak_flops, pl.mem_bandwidth, pl.link_bandwidth)
            assert pt.binding == "interconnect-bandwidth" and pt.attainable == ai * pl.link_bandwidth
            pt = roofline(ai, pl.peak_flops, pl.mem_bandwidth)
            assert pt.binding == "memory-bandwidth" and pt.attainable == ai * pl.mem_bandwidth
    detail(f"{len(settings)} platforms x {len(KERNELS)} kernels")


@pytest.mark.criterion(10, "pipelined iteration faster than standard whenever L_g > 0, 100 random latencies")
def test_overlap_model(detail):
    # work of one unpreconditioned iteration on a 16^3 interior model
    N = 16**3
    flops, spmv_flops = 14 * N + 6 * N + 6 * N, 14 * N
    rng = np.random.default_rng(10)
    ratios = []
    for _ in range(100):
        pl = PlatformConfig.uniform(int(rng.integers(2, 65)), reduction_latency=10 ** rng.uniform(-9, -2),
                                    reference_rate=10 ** rng.uniform(8, 11))
        std = schedule_iteration_time(pl, flops, spmv_flops, pipelined=False)
        pip = schedule_iteration_time(pl, flops, spmv_flops, pipelined=True)
        ratios.append(std / pip)
        assert pip < std
    detail(f"speedup range {min(ratios):.4f}-{max(ratios):.2f}")
