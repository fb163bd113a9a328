"""Simulated hybrid node: workers, virtual clock and communication ledger.

A worker program is a generator function ``task(ctx)``. It computes on its
own data and yields communication requests built by its
:class:`WorkerContext`::

    total = yield ctx.allreduce([local_value])
    handle = yield ctx.ireduce([a, b])      # returns immediately
    ...                                     # overlapped compute
    a, b = yield ctx.wait(handle)
    recv = yield ctx.exchange({nbr: buf}, {nbr: n_expected})

:func:`run_workers` drives all programs to completion. Reductions are
fixed-order pairwise tree sums over ranks, so numerics do not depend on the
scheduler, clock mode, speed factors or latencies.

Virtual cost model: compute ``flops / (reference_rate * speed_factor)``,
message ``p2p_latency + bytes / p2p_bandwidth``, reduction
``reduction_latency * ceil(log2 p)``.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .sparse_core import KernelCounters


class DeadlockError(RuntimeError):
    """No worker can make progress; message carries a schedule diagnosis."""


class ScheduleError(RuntimeError):
    """Mismatched exchange schedules between paired workers."""


class DependencyViolation(RuntimeError):
    """A pending reduction result was read before completion."""


@dataclass(frozen=True)
class WorkerSpec:
    id: int
    speed_factor: float = 1.0


@dataclass
class PlatformConfig:
    workers: list[WorkerSpec] = field(default_factory=lambda: [WorkerSpec(0)])
    reduction_latency: float = 1e-5
    p2p_latency: float = 5e-6
    p2p_bandwidth: float = 5e9
    reference_rate: float = 1e9
    clock: str = "virtual"
    scheduler: str = "serial"
    name: str = "custom"
    # roofline slots; placeholders until filled from a bandwidth probe
    peak_flops: float | None = None
    mem_bandwidth: float | None = None
    link_bandwidth: float | None = None

    def __post_init__(self):
        if not self.workers:
            raise ValueError("platform needs at least one worker")
        for w in self.workers:
            if not w.speed_factor > 0:
                raise ValueError(f"worker {w.id}: speed factor must be positive")
        for name in ("reduction_latency", "p2p_latency"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("p2p_bandwidth", "reference_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.clock not in ("virtual", "wall"):
            raise ValueError(f"clock must be 'virtual' or 'wall', got {self.clock!r}")
        if self.scheduler not in ("serial", "threads"):
            raise ValueError(f"scheduler must be 'serial' or 'threads', got {self.scheduler!r}")

    @classmethod
    def uniform(cls, p: int, **kw) -> PlatformConfig:
        return cls(workers=[WorkerSpec(i) for i in range(p)], **kw)

    @classmethod
    def with_speeds(cls, factors, **kw) -> PlatformConfig:
        return cls(workers=[WorkerSpec(i, float(f)) for i, f in enumerate(factors)], **kw)

    @property
    def size(self) -> int:
        return len(self.workers)

    @property
    def speed_factors(self) -> list[float]:
        return [w.speed_factor for w in self.workers]

    def reduction_cost(self) -> float:
        p = self.size
        return self.reduction_latency * math.ceil(math.log2(p)) if p > 1 else 0.0

    def message_cost(self, nbytes: int) -> float:
        return self.p2p_latency + nbytes / self.p2p_bandwidth


# Placeholder rates for the two GPU node types; replace with your own
# STREAM measurements (``hetkrylov bench-stream``) before drawing conclusions.
PRESETS: dict[str, dict[str, Any]] = {
    "tesla-c2050": dict(peak_flops=500e9, mem_bandwidth=100e9, link_bandwidth=6e9),
    "gtx-titan": dict(peak_flops=1.3e12, mem_bandwidth=200e9, link_bandwidth=6e9),
    "desk": dict(peak_flops=None, mem_bandwidth=None, link_bandwidth=None),
}


def preset(name: str, workers=None, **overrides) -> PlatformConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown platform preset {name!r}; known: {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    if workers is None:
        workers = [WorkerSpec(0)]
    return PlatformConfig(workers=list(workers), name=name, **kw)


def tree_sum(values):
    """Pairwise sum in fixed rank order: ((v0+v1)+(v2+v3))+..."""
    vals = [np.asarray(v, dtype=np.float64) for v in values]
    if not vals:
        raise ValueError("tree_sum of nothing")
    while len(vals) > 1:
        vals = [vals[i] + vals[i + 1] if i + 1 < len(vals) else vals[i] for i in range(0, len(vals), 2)]
    return vals[0]


@dataclass
class PhaseStats:
    reductions: int = 0
    messages: int = 0
    bytes: int = 0


@dataclass
class CommLedger:
    global_reductions: int = 0
    p2p_messages: int = 0
    p2p_bytes: int = 0
    phases: dict = field(default_factory=lambda: defaultdict(PhaseStats))
    worker_elapsed: list[float] = field(default_factory=list)
    worker_compute: list[float] = field(default_factory=list)
    # per worker: phase -> compute seconds
    worker_phase_compute: list[dict] = field(default_factory=list)
    worker_counters: list[KernelCounters] = field(default_factory=list)

    @property
    def elapsed(self) -> float:
        return max(self.worker_elapsed) if self.worker_elapsed else 0.0

    def reductions_by_phase(self) -> dict:
        return {k: v.reductions for k, v in sorted(self.phases.items(), key=lambda kv: str(kv[0]))}

    def compute_imbalance(self) -> float:
        c = [t for t in self.worker_compute if t > 0]
        return max(c) / min(c) if c else 1.0

    def merged_counters(self) -> KernelCounters:
        out = KernelCounters()
        for c in self.worker_counters:
            out = out.merge(c)
        return out

    def to_rows(self) -> list[dict]:
        rows = []
        for ph, st in sorted(self.phases.items(), key=lambda kv: (isinstance(kv[0], str), kv[0])):
            rows.append(dict(phase=ph, reductions=st.reductions, p2p_messages=st.messages, p2p_bytes=st.bytes))
        return rows


def global_reduce(values, ledger: CommLedger | None = None, phase=None):
    """Standalone fused sum over per-worker contributions (one communication)."""
    out = tree_sum(values)
    if ledger is not None:
        ledger.global_reductions += 1
        ledger.phases[phase].reductions += 1
    return out


class PendingReduction:
    """Handle for a posted nonblocking reduction."""

    def __init__(self, slot: int):
        self.slot = slot
        self._value = None
        self.ready = False  # all contributions in
        self.done = False  # owner has waited on it
        self.completion_time = 0.0

    @property
    def value(self):
        if not self.done:
            raise DependencyViolation(
                f"reduction #{self.slot} read before completion; overlapped compute must not depend on it"
            )
        return self._value


@dataclass
class _Post:
    values: np.ndarray
    phase: Any
    blocking: bool = False


@dataclass
class _Wait:
    handle: PendingReduction


@dataclass
class _Exchange:
    sends: dict
    expect: dict
    phase: Any


class WorkerContext:
    def __init__(self, rank: int, size: int):
        self.rank = rank
        self.size = size
        self.counters = KernelCounters()
        self.phase: Any = 0

    def ireduce(self, values) -> _Post:
        return _Post(np.atleast_1d(np.asarray(values, dtype=np.float64)).copy(), self.phase)

    def wait(self, handle: PendingReduction) -> _Wait:
        return _Wait(handle)

    def allreduce(self, values) -> _Post:
        req = self.ireduce(values)
        req.blocking = True
        return req

    def exchange(self, sends: dict, expect: dict) -> _Exchange:
        return _Exchange({int(k): np.asarray(v, dtype=np.float64) for k, v in sends.items()},
                         {int(k): int(v) for k, v in expect.items()}, self.phase)

    def charge(self, flops: float) -> None:
        """Account work outside the three CG kernels (e.g. preconditioning)."""
        self.counters._add("other", int(flops), 0)


class _Worker:
    def __init__(self, rank, task, ctx, factor):
        self.rank = rank
        self.ctx = ctx
        self.factor = factor
        out = task(ctx)
        self.gen = out if hasattr(out, "send") else None
        self.result = None if self.gen is not None else out
        self.done = self.gen is None
        self.to_send = None
        self.blocked = None  # ("wait", handle) / ("exchange", _Exchange)
        self.pending_yield = None
        self.error = None
        self.clock = 0.0
        self.compute = 0.0
        self.phase_compute = defaultdict(float)
        self.n_posted = 0
        self.last_flops = 0
        self.seg_wall = 0.0


def _advance(w: _Worker):
    t0 = time.perf_counter()
    try:
        w.pending_yield = w.gen.send(w.to_send)
    except StopIteration as stop:
        w.done = True
        w.result = stop.value
        w.pending_yield = None
    except BaseException as exc:  # re-raised by the driver in rank order
        w.error = exc
        w.done = True
        w.pending_yield = None
    w.seg_wall = time.perf_counter() - t0
    w.to_send = None


@dataclass
class RunResult:
    results: list
    ledger: CommLedger


def run_workers(tasks: list[Callable], platform: PlatformConfig) -> RunResult:
    """Run one task per worker until all finish; returns results and the ledger."""
    p = platform.size
    if len(tasks) != p:
        raise ValueError(f"need one task per worker: {len(tasks)} tasks for {p} workers")
    workers = [_Worker(r, tasks[r], WorkerContext(r, p), platform.workers[r].speed_factor) for r in range(p)]
    ledger = CommLedger()
    slots: dict[int, dict] = {}
    mailbox: dict[tuple[int, int], deque] = defaultdict(deque)
    red_cost = platform.reduction_cost()
    pool = ThreadPoolExecutor(max_workers=p) if platform.scheduler == "threads" and p > 1 else None

    def charge_segment(w: _Worker):
        flops = w.ctx.counters.flops
        if platform.clock == "virtual":
            dt = (flops - w.last_flops) / (platform.reference_rate * w.factor)
        else:
            dt = w.seg_wall / w.factor
        w.last_flops = flops
        w.clock += dt
        w.compute += dt
        w.phase_compute[w.ctx.phase] += dt

    def post_reduction(w: _Worker, req: _Post) -> PendingReduction:
        idx = w.n_posted
        w.n_posted += 1
        slot = slots.setdefault(idx, dict(contrib={}, times={}, handles={}, phase=req.phase))
        slot["contrib"][w.rank] = req.values
        slot["times"][w.rank] = w.clock
        h = PendingReduction(idx)
        slot["handles"][w.rank] = h
        if len(slot["contrib"]) == p:
            shapes = {v.shape for v in slot["contrib"].values()}
            if len(shapes) != 1:
                raise ScheduleError(f"reduction #{idx}: workers contributed different widths {shapes}")
            total = tree_sum([slot["contrib"][r] for r in range(p)])
            done_at = max(slot["times"].values()) + red_cost
            for hh in slot["handles"].values():
                hh._value = total.copy()
                hh.ready = True
                hh.completion_time = done_at
            ledger.global_reductions += 1
            ledger.phases[slot["phase"]].reductions += 1
            del slots[idx]
        return h

    def handle_yield(w: _Worker):
        req = w.pending_yield
        w.pending_yield = None
        if isinstance(req, _Post):
            h = post_reduction(w, req)
            if req.blocking:
                w.blocked = ("wait", h)
            else:
                w.to_send = h
        elif isinstance(req, _Wait):
            w.blocked = ("wait", req.handle)
        elif isinstance(req, _Exchange):
            for dst, buf in sorted(req.sends.items()):
                if not 0 <= dst < p or dst == w.rank:
                    raise ScheduleError(f"worker {w.rank}: invalid exchange destination {dst}")
                nbytes = 8 * buf.size
                mailbox[(w.rank, dst)].append((buf.copy(), w.clock + platform.message_cost(nbytes)))
                ledger.p2p_messages += 1
                ledger.p2p_bytes += nbytes
                st = ledger.phases[req.phase]
                st.messages += 1
                st.bytes += nbytes
            w.blocked = ("exchange", req)
        else:
            raise TypeError(f"worker {w.rank} yielded unsupported request {req!r}")

    def try_unblock(w: _Worker) -> bool:
        kind, obj = w.blocked
        if kind == "wait":
            if not obj.ready:
                return False
            obj.done = True
            w.clock = max(w.clock, obj.completion_time)
            w.to_send = tuple(obj.value.tolist())
        else:
            if any(not mailbox[(src, w.rank)] for src in obj.expect):
                return False
            got = {}
            arrive = w.clock
            for src, n in sorted(obj.expect.items()):
                buf, t = mailbox[(src, w.rank)].popleft()
                if buf.size != n:
                    raise ScheduleError(
                        f"worker {w.rank} expected {n} values from worker {src}, received {buf.size}"
                    )
                got[src] = buf
                arrive = max(arrive, t)
            w.clock = arrive
            w.to_send = got
        w.blocked = None
        return True

    def diagnose() -> str:
        lines = ["deadlock: no worker can make progress"]
        for w in workers:
            if w.done:
                lines.append(f"  worker {w.rank}: finished after posting {w.n_posted} reductions")
            elif w.blocked and w.blocked[0] == "wait":
                slot = slots.get(w.blocked[1].slot, {"contrib": {}})
                missing = [r for r in range(p) if r not in slot["contrib"]]
                lines.append(f"  worker {w.rank}: waiting on reduction #{w.blocked[1].slot}, missing ranks {missing}")
            elif w.blocked:
                missing = [s for s in w.blocked[1].expect if not mailbox[(s, w.rank)]]
                lines.append(f"  worker {w.rank}: waiting on halo messages from {missing}")
        return "\n".join(lines)

    try:
        while True:
            for w in workers:
                if not w.done and w.blocked is not None:
                    try_unblock(w)
            runnable = [w for w in workers if not w.done and w.blocked is None]
            if not runnable:
                if all(w.done for w in workers):
                    break
                raise DeadlockError(diagnose())
            if pool is not None and len(runnable) > 1:
                list(pool.map(_advance, runnable))
            else:
                for w in runnable:
                    _advance(w)
            for w in runnable:
                if w.error is not None:
                    raise w.error
            for w in runnable:
                charge_segment(w)
                if not w.done:
                    handle_yield(w)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    leftovers = [k for k, q in mailbox.items() if q]
    if leftovers:
        raise ScheduleError(f"unreceived halo messages on links {sorted(leftovers)}")
    if slots:
        raise DeadlockError(f"reductions {sorted(slots)} never completed (partial participation)")
    ledger.worker_elapsed = [w.clock for w in workers]
    ledger.worker_compute = [w.compute for w in workers]
    ledger.worker_phase_compute = [dict(w.phase_compute) for w in workers]
    ledger.worker_counters = [w.ctx.counters for w in workers]
    return RunResult([w.result for w in workers], ledger)


def overlap_time(reduction_time: float, compute_time: float) -> float:
    """Elapsed time when a reduction is hidden behind independent compute."""
    return max(reduction_time, compute_time)


def iteration_time_model(compute_time: float, overlappable: float, reduction_time: float, n_reductions: int,
                         overlapped: bool) -> float:
    """Per-iteration time at fixed compute work.

    Standard CG pays every reduction in sequence. The pipelined schedule
    issues one fused reduction and hides it behind ``overlappable`` seconds
    of the compute.
    """
    if overlapped:
        rest = compute_time - overlappable
        return rest + overlap_time(reduction_time, overlappable)
    return compute_time + n_reductions * reduction_time


def schedule_iteration_time(platform: PlatformConfig, flops: int, overlap_flops: int, pipelined: bool) -> float:
    """Virtual time of one iteration body of fixed work on every worker.

    The standard body splits ``flops`` into three segments, each closed by a
    blocking reduction. The pipelined body posts one reduction, runs
    ``overlap_flops`` of the work while it is in flight, then waits.
    """
    if not 0 <= overlap_flops <= flops:
        raise ValueError("need 0 <= overlap_flops <= flops")

    def task(ctx):
        ctx.phase = 1
        if pipelined:
            ctx.charge(flops - overlap_flops)
            h = yield ctx.ireduce([1.0, 1.0, 1.0])
            ctx.charge(overlap_flops)
            yield ctx.wait(h)
        else:
            share = [flops // 3, flops // 3, flops - 2 * (flops // 3)]
            for s in share:
                ctx.charge(s)
                yield ctx.allreduce([1.0])
        return None

    return run_workers([task] * platform.size, platform).ledger.elapsed
