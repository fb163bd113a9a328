"""Distributed standard and pipelined conjugate gradient.

Each subdomain runs as one worker of the simulated platform. Standard CG
issues three global reductions per iteration (``p.Ap``, ``r.z`` and the
residual norm); pipelined CG fuses its dot products into a single
nonblocking reduction that overlaps the preconditioner and SpMV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import amg as amg_mod
from .partition import PartitionPlan, Subdomain, build_subdomains, local_system, partition_weighted
from .platform import CommLedger, PlatformConfig, run_workers
from .sparse_core import (
    SPMV_BYTES_PER_NNZ,
    SPMV_FLOPS_PER_NNZ,
    CsrMatrix,
    DimensionError,
    KernelCounters,
    axpy,
    dot,
    xpay,
)

VARIANTS = ("cg", "pipelined_cg")
PRECONDITIONERS = ("none", "amg", "identity")


class BreakdownError(ArithmeticError):
    """Search direction with nonpositive curvature (matrix not SPD)."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"CG breakdown at iteration {iteration}: curvature {value:.3e} <= 0")
        self.iteration = iteration


@dataclass
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    variant: str = "cg"
    preconditioner: str = "none"
    drift_check_interval: int = 50
    amg_omega: float = amg_mod.DEFAULT_OMEGA
    amg_coarsest: int = amg_mod.DEFAULT_COARSEST
    amg_prolongation: str = "smoothed"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list[float]
    counters: KernelCounters
    comm: CommLedger
    variant: str = "cg"
    preconditioner: str = "none"
    precond_applications: int = 0
    residual_drift: bool = False
    true_residual: float | None = None
    n_parts: int = 1

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0

    @property
    def loop_reductions(self) -> int:
        """Reductions issued inside iterations 1..k (setup and final check excluded)."""
        return sum(st.reductions for ph, st in self.comm.phases.items()
                   if isinstance(ph, int) and 1 <= ph <= self.iterations)

    def reductions_per_iteration(self) -> list[int]:
        return [self.comm.phases[k].reductions if k in self.comm.phases else 0
                for k in range(1, self.iterations + 1)]

    @property
    def virtual_time(self) -> float:
        return self.comm.elapsed

    @property
    def time_per_iteration(self) -> float:
        return self.virtual_time / self.iterations if self.iterations else 0.0

    def summary(self) -> dict:
        return dict(
            variant=self.variant,
            preconditioner=self.preconditioner,
            parts=self.n_parts,
            converged=int(self.converged),
            iterations=self.iterations,
            final_residual=self.final_residual,
            reductions=self.loop_reductions,
            total_reductions=self.comm.global_reductions,
            p2p_messages=self.comm.p2p_messages,
            p2p_bytes=self.comm.p2p_bytes,
            flops=self.counters.flops,
            bytes=self.counters.bytes,
            virtual_time=self.virtual_time,
            time_per_iteration=self.time_per_iteration,
        )

    def write_csv(self, history_path, summary_path) -> None:
        with open(history_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residual_history, start=1):
                w.writerow([i, repr(float(r))])
        s = self.summary()
        with open(summary_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(s))
            w.writerow([repr(v) if isinstance(v, float) else v for v in s.values()])


@dataclass
class LocalSystem:
    sub: Subdomain
    A_owned: CsrMatrix
    coupling: CsrMatrix

    @property
    def nnz(self) -> int:
        return self.A_owned.nnz + self.coupling.nnz

    @property
    def off_diagonal_pairs(self) -> float:
        """Half the off-diagonal entries in the owned rows (o_i in n_i + 2 o_i)."""
        return (self.nnz - self.sub.n_owned) / 2


class DistributedSystem:
    """A global SPD matrix split into per-part local systems."""

    def __init__(self, A: CsrMatrix, plan: PartitionPlan | np.ndarray | None = None, adjacency=None):
        if A.n_rows != A.n_cols:
            raise DimensionError("system matrix must be square")
        self.A = A
        n = A.n_rows
        if plan is None:
            plan = np.zeros(n, dtype=np.int64)
        graph = adjacency if adjacency is not None else A
        self.subdomains = build_subdomains(graph, plan)
        self.locals = []
        for s in self.subdomains:
            own, coup = local_system(A, s)
            self.locals.append(LocalSystem(s, own, coup))

    @classmethod
    def even(cls, A: CsrMatrix, n_parts: int, adjacency=None) -> DistributedSystem:
        if n_parts == 1:
            return cls(A)
        plan = partition_weighted(adjacency if adjacency is not None else A, np.full(n_parts, 1.0 / n_parts))
        return cls(A, plan, adjacency)

    @property
    def n_parts(self) -> int:
        return len(self.locals)

    @property
    def n(self) -> int:
        return self.A.n_rows

    def scatter(self, v) -> list[np.ndarray]:
        v = np.asarray(v, dtype=np.float64)
        if len(v) != self.n:
            raise DimensionError(f"vector length {len(v)} != system size {self.n}")
        return [v[loc.sub.owned].copy() for loc in self.locals]

    def gather(self, parts) -> np.ndarray:
        out = np.empty(self.n)
        for loc, v in zip(self.locals, parts):
            out[loc.sub.owned] = v
        return out


def _default_platform(n_parts: int) -> PlatformConfig:
    return PlatformConfig.uniform(n_parts)


def halo_exchange(ctx, sub: Subdomain, x_owned: np.ndarray):
    """Worker-side generator: refresh and return the halo values of ``x``."""
    if not sub.recv:
        return np.empty(0)
    sends = {q: x_owned[idx] for q, idx in sub.send_local.items()}
    got = yield ctx.exchange(sends, {q: len(idx) for q, idx in sub.recv_local.items()})
    halo = np.empty(sub.n_halo)
    for q, pos in sub.recv_local.items():
        halo[pos] = got[q]
    return halo


def local_spmv(ctx, loc: LocalSystem, x_owned: np.ndarray):
    """Worker-side generator: owned rows of ``A x`` after a halo exchange."""
    halo = yield from halo_exchange(ctx, loc.sub, x_owned)
    y = loc.A_owned.to_scipy() @ x_owned
    if loc.sub.n_halo:
        y += loc.coupling.to_scipy() @ halo
    ctx.counters._add("spmv", SPMV_FLOPS_PER_NNZ * loc.nnz, SPMV_BYTES_PER_NNZ * loc.nnz)
    return y


def distributed_spmv(system: DistributedSystem, x_parts, platform: PlatformConfig | None = None):
    """``A x`` on distributed vectors; returns (y_parts, ledger)."""
    platform = platform or _default_platform(system.n_parts)
    _check_platform(system, platform)

    def make(r):
        def task(ctx):
            ctx.phase = 1
            return (yield from local_spmv(ctx, system.locals[r], np.asarray(x_parts[r], dtype=np.float64)))
        return task

    run = run_workers([make(r) for r in range(system.n_parts)], platform)
    return run.results, run.ledger


def _check_platform(system: DistributedSystem, platform: PlatformConfig) -> None:
    if platform.size != system.n_parts:
        raise ValueError(f"platform has {platform.size} workers but the system has {system.n_parts} parts")


class _Precond:
    """Per-subdomain preconditioner: identity copy or block-Jacobi AMG."""

    def __init__(self, kind: str, loc: LocalSystem, cfg: SolverConfig):
        self.kind = kind
        self.applications = 0
        self.flops = 0
        if kind == "amg":
            self.h = amg_mod.build_hierarchy(loc.A_owned, omega=cfg.amg_omega, coarsest_size=cfg.amg_coarsest,
                                             prolongation=cfg.amg_prolongation)
            self.flops = self.h.cycle_flops()

    def __call__(self, ctx, r):
        self.applications += 1
        if self.kind == "amg":
            ctx.charge(self.flops)
            return amg_mod.vcycle(self.h, r)
        return r.copy()


def _cg_task(loc: LocalSystem, b: np.ndarray, cfg: SolverConfig, M):
    def task(ctx):
        c = ctx.counters
        x = np.zeros_like(b)
        r = b.copy()
        z = M(ctx, r) if M is not None else r
        p = z.copy()
        ctx.phase = 0
        gamma, bb = yield ctx.allreduce([dot(r, z, c), dot(b, b, c)])
        bnorm = math.sqrt(bb)
        history = []
        if bnorm == 0.0:
            return x, history, True, False
        converged = False
        for k in range(1, cfg.max_iterations + 1):
            ctx.phase = k
            q = yield from local_spmv(ctx, loc, p)
            (pq,) = yield ctx.allreduce([dot(p, q, c)])
            if not pq > 0:
                raise BreakdownError(k, pq)
            alpha = gamma / pq
            axpy(alpha, p, x, c, out=x)
            axpy(-alpha, q, r, c, out=r)
            z = M(ctx, r) if M is not None else r
            (gamma_new,) = yield ctx.allreduce([dot(r, z, c)])
            xpay(z, gamma_new / gamma, p, c)
            gamma = gamma_new
            (rr,) = yield ctx.allreduce([dot(r, r, c)])
            res = math.sqrt(rr) / bnorm
            history.append(res)
            if res <= cfg.tolerance:
                converged = True
                break
        return x, history, converged, False
    return task


def _pipelined_task(loc: LocalSystem, b: np.ndarray, cfg: SolverConfig, M):
    def task(ctx):
        c = ctx.counters
        n = len(b)
        x = np.zeros(n)
        r = b.copy()
        ctx.phase = 0
        u = M(ctx, r) if M is not None else r.copy()
        w = yield from local_spmv(ctx, loc, u)
        z, q, s, p = (np.zeros(n) for _ in range(4))
        history = []
        converged = drift = False
        k = 0
        gamma_old = alpha_old = bnorm = 0.0
        while True:
            ctx.phase = k + 1
            check = k > 0 and cfg.drift_check_interval > 0 and k % cfg.drift_check_interval == 0
            scal = [dot(r, u, c), dot(w, u, c), dot(r, r, c)]
            if check:
                ax = yield from local_spmv(ctx, loc, x)
                t = b - ax
                scal.append(dot(t, t, c))
            handle = yield ctx.ireduce(scal)
            m = M(ctx, w) if M is not None else w.copy()
            nv = yield from local_spmv(ctx, loc, m)
            vals = yield ctx.wait(handle)
            gamma, delta, rr = vals[:3]
            if k == 0:
                bnorm = math.sqrt(rr)
                if bnorm == 0.0:
                    return x, history, True, False
            else:
                res = math.sqrt(rr) / bnorm
                history.append(res)
                if check and abs(math.sqrt(vals[3]) / bnorm - res) > 1e3 * cfg.tolerance:
                    drift = True
                if res <= cfg.tolerance:
                    converged = True
                    break
                if k >= cfg.max_iterations:
                    break
            if k == 0:
                beta = 0.0
                denom = delta
            else:
                beta = gamma / gamma_old
                denom = delta - beta * gamma / alpha_old
            if not denom > 0:
                raise BreakdownError(k + 1, denom)
            alpha = gamma / denom
            xpay(nv, beta, z, c)
            xpay(m, beta, q, c)
            xpay(w, beta, s, c)
            xpay(u, beta, p, c)
            axpy(alpha, p, x, c, out=x)
            axpy(-alpha, s, r, c, out=r)
            axpy(-alpha, q, u, c, out=u)
            axpy(-alpha, z, w, c, out=w)
            gamma_old, alpha_old = gamma, alpha
            k += 1
        return x, history, converged, drift
    return task


def _as_system(A) -> DistributedSystem:
    if isinstance(A, DistributedSystem):
        return A
    if isinstance(A, CsrMatrix):
        return DistributedSystem(A)
    return DistributedSystem(CsrMatrix.from_scipy(A))


def _solve(system, b, config: SolverConfig, platform, variant: str):
    system = _as_system(system)
    platform = platform or _default_platform(system.n_parts)
    _check_platform(system, platform)
    b = np.asarray(b, dtype=np.float64)
    b_parts = system.scatter(b)
    precs = None
    if config.preconditioner != "none":
        precs = [_Precond(config.preconditioner, loc, config) for loc in system.locals]
    make = _cg_task if variant == "cg" else _pipelined_task
    tasks = [make(loc, bp, config, precs[i] if precs else None) for i, (loc, bp) in enumerate(zip(system.locals, b_parts))]
    run = run_workers(tasks, platform)
    x = system.gather([res[0] for res in run.results])
    _, history, converged, drift = run.results[0]
    bn = np.linalg.norm(b)
    true_res = float(np.linalg.norm(b - system.A.to_scipy() @ x) / bn) if bn > 0 else 0.0
    report = SolveReport(
        converged=converged,
        iterations=len(history),
        residual_history=list(history),
        counters=run.ledger.merged_counters(),
        comm=run.ledger,
        variant=variant,
        preconditioner=config.preconditioner,
        precond_applications=sum(pc.applications for pc in precs) // len(precs) if precs else 0,
        residual_drift=drift,
        true_residual=true_res,
        n_parts=system.n_parts,
    )
    return x, report


def cg_solve(system, b, config: SolverConfig | None = None, platform: PlatformConfig | None = None):
    """Standard (preconditioned) CG from a zero initial guess; returns (x, report)."""
    return _solve(system, b, config or SolverConfig(), platform, "cg")


def pipelined_cg_solve(system, b, config: SolverConfig | None = None, platform: PlatformConfig | None = None):
    """Single-reduction pipelined CG; same contract as :func:`cg_solve`."""
    config = config or SolverConfig(variant="pipelined_cg")
    return _solve(system, b, config, platform, "pipelined_cg")


def solve(system, b, config: SolverConfig, platform: PlatformConfig | None = None):
    fn = cg_solve if config.variant == "cg" else pipelined_cg_solve
    return fn(system, b, config, platform)


@dataclass
class KrylovSolver:
    """Solver handle for :func:`heat_step` and friends.

    With a multi-worker platform the matrix is split evenly (or by
    ``fractions``) over its workers before each solve.
    """

    config: SolverConfig = field(default_factory=SolverConfig)
    platform: PlatformConfig | None = None
    fractions: np.ndarray | None = None
    adjacency: object = None

    def solve(self, A, b):
        p = self.platform.size if self.platform else 1
        if p == 1:
            system = DistributedSystem(A)
        else:
            f = self.fractions if self.fractions is not None else np.full(p, 1.0 / p)
            graph = self.adjacency if self.adjacency is not None else A
            system = DistributedSystem(A, partition_weighted(graph, f), graph)
        return solve(system, b, self.config, self.platform)
