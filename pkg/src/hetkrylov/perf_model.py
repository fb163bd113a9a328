"""Measured-speed load balancing, roofline bounds and a STREAM triad probe.

A worker's speed is the number of matrix nonzeros it processes per second,
``s_i = (n_i + 2 o_i) / T_i`` with ``n_i`` owned cells, ``o_i`` off-diagonal
pairs and ``T_i`` the time of one CG iteration. Relative speeds
``r_i = s_i / sum(s)`` become the work fractions of the next decomposition,
``n_i,new = N r_i``, rounded so the counts still add up to ``N``.
"""

from __future__ import annotations

import csv
import glob
import statistics
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .krylov import DistributedSystem, SolverConfig, _cg_task, _check_platform
from .partition import PartitionPlan, largest_remainder, partition_weighted
from .platform import PlatformConfig, run_workers
from .sparse_core import CsrMatrix

BINDING = ("peak-compute", "memory-bandwidth", "interconnect-bandwidth")
O_MODES = ("exact", "approximate")


@dataclass
class DeviceProfile:
    device_id: int
    speed: float
    relative_speed: float = 0.0
    bandwidth: float | None = None
    speed_factor: float = 1.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError(f"device {self.device_id}: speed must be positive")


@dataclass(frozen=True)
class RooflinePoint:
    ai: float
    attainable: float
    binding: str


def measure_speed(n: int, o: float, T: float) -> float:
    """Nonzeros per second: ``(n + 2 o) / T``."""
    if not T > 0:
        raise ValueError(f"execution time must be positive, got {T}")
    return (n + 2 * o) / T


def relative_speeds(speeds) -> np.ndarray:
    s = np.asarray(speeds, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("speed vector is empty")
    if np.any(~(s > 0)) or not np.all(np.isfinite(s)):
        raise ValueError("speeds must be positive and finite")
    return s / s.sum()


def rebalance_cells(N: int, fractions) -> np.ndarray:
    """Integer cell counts ``~ N * fractions`` that sum exactly to ``N``.

    Fractions below ``1/(4N)`` are dropped and the rest renormalized.
    Any part whose fraction exceeds ``1/(2N)`` keeps at least one cell.
    """
    if N <= 0:
        raise ValueError("N must be positive")
    f = np.asarray(fractions, dtype=np.float64).ravel()
    if f.size == 0 or np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("fractions must be a nonempty nonnegative vector")
    if abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1 (got {f.sum():.12g})")
    keep = np.where(f < 1.0 / (4 * N), 0.0, f)
    if keep.sum() == 0:
        keep = f
    counts = largest_remainder(N, keep / keep.sum())
    for i in np.nonzero((f > 1.0 / (2 * N)) & (counts == 0))[0]:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] += 1
    return counts


def off_diagonal_pairs(system: DistributedSystem, mode: str = "exact") -> np.ndarray:
    """``o_i`` per part: counted from the owned rows, or 3 per cell."""
    if mode not in O_MODES:
        raise ValueError(f"o_mode must be one of {O_MODES}")
    if mode == "approximate":
        return np.array([3.0 * loc.sub.n_owned for loc in system.locals])
    return np.array([loc.off_diagonal_pairs for loc in system.locals])


@dataclass
class CalibrationResult:
    profiles: list[DeviceProfile]
    fractions: np.ndarray
    counts: np.ndarray
    times: np.ndarray  # median seconds per iteration, per worker
    work: np.ndarray  # n_i + 2 o_i


def calibrate(system: DistributedSystem, platform: PlatformConfig, warmup: int = 3, measured: int = 10,
              o_mode: str = "exact", b=None) -> CalibrationResult:
    """Time CG iterations on the current split and derive new work fractions.

    Runs ``warmup + measured`` iterations of unpreconditioned CG. ``T_i`` is
    the median compute time of worker ``i`` over the measured iterations
    (the whole loop body, communication waits excluded).
    """
    _check_platform(system, platform)
    if warmup < 0 or measured < 1:
        raise ValueError("need warmup >= 0 and measured >= 1")
    b = np.ones(system.n) if b is None else np.asarray(b, dtype=np.float64)
    total = warmup + measured
    cfg = SolverConfig(tolerance=1e-300, max_iterations=total)
    tasks = [_cg_task(loc, bp, cfg, None) for loc, bp in zip(system.locals, system.scatter(b))]
    run = run_workers(tasks, platform)
    iters = len(run.results[0][1])
    if iters == 0:
        raise ValueError("calibration run did no iterations (zero right-hand side?)")
    phases = list(range(warmup + 1, iters + 1)) or list(range(1, iters + 1))
    times = []
    for rank, per_phase in enumerate(run.ledger.worker_phase_compute):
        t = [per_phase.get(k, 0.0) for k in phases]
        med = statistics.median(t)
        if not med > 0:
            raise ValueError(f"worker {rank} reported zero work during calibration")
        times.append(med)
    times = np.array(times)
    n = np.array([loc.sub.n_owned for loc in system.locals], dtype=np.float64)
    o = off_diagonal_pairs(system, o_mode)
    speeds = np.array([measure_speed(ni, oi, ti) for ni, oi, ti in zip(n, o, times)])
    r = relative_speeds(speeds)
    profiles = [DeviceProfile(i, float(s), float(ri), speed_factor=platform.workers[i].speed_factor)
                for i, (s, ri) in enumerate(zip(speeds, r))]
    return CalibrationResult(profiles, r, rebalance_cells(system.n, r), times, n + 2 * o)


@dataclass
class Decomposition:
    plan: PartitionPlan
    system: DistributedSystem
    calibration: CalibrationResult | None = None


def heterogeneous_decomposition(A: CsrMatrix, adjacency, platform: PlatformConfig, mode: str = "heterogeneous",
                                **calib_kw) -> Decomposition:
    """Even split, then (``mode="heterogeneous"``) calibrate and re-partition."""
    if mode not in ("even", "heterogeneous"):
        raise ValueError(f"decomposition mode must be 'even' or 'heterogeneous', got {mode!r}")
    p = platform.size
    plan = partition_weighted(adjacency, np.full(p, 1.0 / p))
    system = DistributedSystem(A, plan, adjacency)
    if mode == "even" or p == 1:
        return Decomposition(plan, system)
    cal = calibrate(system, platform, **calib_kw)
    fractions = cal.counts / cal.counts.sum()
    plan = partition_weighted(adjacency, fractions)
    return Decomposition(plan, DistributedSystem(A, plan, adjacency), cal)


def write_profiles(path, profiles: list[DeviceProfile]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "speed", "relative_speed"])
        for pr in profiles:
            w.writerow([pr.device_id, repr(pr.speed), repr(pr.relative_speed)])


def read_profiles(path) -> list[DeviceProfile]:
    with open(path, newline="") as fh:
        return [DeviceProfile(int(r["device_id"]), float(r["speed"]), float(r["relative_speed"]))
                for r in csv.DictReader(fh)]


def roofline(ai: float, peak: float, mem_bw: float, link_bw: float | None = None) -> RooflinePoint:
    """Attainable flop rate ``min(peak, ai*mem_bw, ai*link_bw)``.

    Ties resolve in the order peak, memory, link.
    """
    for name, v in (("ai", ai), ("peak", peak), ("mem_bw", mem_bw)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    cands = [(peak, BINDING[0]), (ai * mem_bw, BINDING[1])]
    if link_bw is not None:
        if not link_bw > 0:
            raise ValueError(f"link_bw must be positive, got {link_bw}")
        cands.append((ai * link_bw, BINDING[2]))
    best = cands[0]
    for c in cands[1:]:
        if c[0] < best[0]:
            best = c
    return RooflinePoint(float(ai), float(best[0]), best[1])


@numba.njit(cache=True)
def _triad(a, b, c, q):
    for i in range(a.size):
        a[i] = b[i] + q * c[i]


def last_level_cache_bytes(default: int = 32 * 2**20) -> int:
    """Largest cache size advertised under /sys, or ``default``."""
    best = 0
    for path in glob.glob("/sys/devices/system/cpu/cpu0/cache/index*/size"):
        try:
            txt = open(path).read().strip()
        except OSError:
            continue
        mult = {"K": 2**10, "M": 2**20, "G": 2**30}.get(txt[-1:].upper(), 1)
        digits = txt[:-1] if mult != 1 else txt
        if digits.isdigit():
            best = max(best, int(digits) * mult)
    return best or default


@dataclass
class StreamResult:
    n: int
    best: float  # bytes/s
    median: float
    times: list[float] = field(default_factory=list)

    @property
    def bandwidth(self) -> float:
        return self.best


def stream_triad(n: int | None = None, repetitions: int = 10, min_ticks: float = 100.0) -> StreamResult:
    """Triad ``a = b + q c`` bandwidth, 24 bytes per element.

    Default ``n`` makes each array four times the last-level cache.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if n is None:
        n = 4 * last_level_cache_bytes() // 8
    if n < 1:
        raise ValueError("n must be positive")
    a = np.zeros(n)
    b = np.full(n, 1.0)
    c = np.full(n, 2.0)
    _triad(a, b, c, 3.0)  # compile and touch pages
    res = time.get_clock_info("perf_counter").resolution
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        _triad(a, b, c, 3.0)
        times.append(time.perf_counter() - t0)
    best_t = min(times)
    if best_t < min_ticks * res or best_t <= 0:
        raise ValueError(f"n={n} is too small: triad took {best_t:.3g}s against timer resolution {res:.3g}s")
    nbytes = 24.0 * n
    return StreamResult(n, nbytes / best_t, nbytes / statistics.median(times), times)
