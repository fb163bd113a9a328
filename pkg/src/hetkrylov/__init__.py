"""Heterogeneity-aware distributed conjugate gradient on a simulated node."""

from .amg import AmgPreconditioner, build_hierarchy, vcycle
from .krylov import (
    DistributedSystem,
    KrylovSolver,
    SolveReport,
    SolverConfig,
    cg_solve,
    distributed_spmv,
    pipelined_cg_solve,
    solve,
)
from .mesh import BoundarySpec, HeatProblem, StructuredMesh, assemble_laplacian, assemble_periodic_laplacian
from .partition import PartitionPlan, build_subdomains, partition_weighted
from .perf_model import calibrate, measure_speed, rebalance_cells, relative_speeds, roofline, stream_triad
from .platform import PlatformConfig, WorkerSpec, run_workers
from .sparse_core import CsrMatrix, KernelCounters

__version__ = "0.1.0"
