"""Command-line experiment driver.

    hetkrylov solve       --config run.ini [--out DIR] [--seed N] [--clock virtual|wall]
    hetkrylov decompose   --config run.ini
    hetkrylov compare     --config a.ini --config b.ini | --config a.ini --vary solver.variant=cg,pipelined_cg
    hetkrylov roofline    [--config run.ini | --preset NAME] [--no-link]
    hetkrylov bench-stream [--n N] [--repetitions R]

Exit status: 0 success, 2 configuration error, 3 convergence failure,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import perf_model
from .config import ConfigError, ExperimentConfig
from .krylov import BreakdownError, DistributedSystem, SolveReport, solve
from .mesh import assemble_laplacian, write_field_binary, write_field_csv
from .platform import PRESETS, DeadlockError, DependencyViolation, ScheduleError, preset
from .sparse_core import KERNELS, CsrMatrix, arithmetic_intensity

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_INVARIANT = 4


class ConvergenceFailure(RuntimeError):
    pass


@dataclass
class RunOutcome:
    config: ExperimentConfig
    report: SolveReport
    x: np.ndarray
    decomposition: perf_model.Decomposition


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), quoting=csv.QUOTE_MINIMAL)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def run_experiment(cfg: ExperimentConfig, seed: int = 0) -> RunOutcome:
    mesh = cfg.build_mesh()
    platform = cfg.build_platform()
    A, b = assemble_laplacian(mesh, cfg.build_boundary(), D=cfg.problem.diffusivity)
    if cfg.problem.rhs == "random":
        b = np.random.default_rng(seed).standard_normal(mesh.n_cells)
    if cfg.problem.kind == "heat":
        A = CsrMatrix.from_scipy(A.to_scipy() + sp.identity(A.n_rows, format="csr") / cfg.problem.dt,
                                 symmetric=True, check=False)
    d = cfg.decomposition
    dec = perf_model.heterogeneous_decomposition(A, mesh, platform, mode=d.mode, warmup=d.warmup,
                                                 measured=d.measured, o_mode=d.o_mode)
    scfg = cfg.build_solver()
    if cfg.problem.kind == "steady":
        x, report = solve(dec.system, b, scfg, platform)
    else:
        x = np.zeros(mesh.n_cells)
        for _ in range(cfg.problem.steps):
            x, report = solve(dec.system, x / cfg.problem.dt + b, scfg, platform)
            if not report.converged:
                break
    return RunOutcome(cfg, report, x, dec)


def cmd_solve(cfg: ExperimentConfig, out: Path, seed: int = 0) -> RunOutcome:
    res = run_experiment(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    res.report.write_csv(out / "history.csv", out / "summary.csv")
    if cfg.output.field == "csv":
        write_field_csv(out / "field.csv", cfg.build_mesh(), res.x)
    elif cfg.output.field == "binary":
        write_field_binary(out / "field.bin", res.x)
    r = res.report
    print(f"{r.variant}/{r.preconditioner} on {r.n_parts} part(s): converged={r.converged} "
          f"iterations={r.iterations} residual={r.final_residual:.3e} reductions={r.loop_reductions}")
    if not r.converged:
        raise ConvergenceFailure(f"no convergence within {cfg.solver.max_iterations} iterations "
                                 f"(residual {r.final_residual:.3e})")
    return res


def predicted_iteration_times(system: DistributedSystem, platform) -> np.ndarray:
    """Virtual compute seconds of one unpreconditioned CG iteration per worker."""
    out = []
    for loc, w in zip(system.locals, platform.workers):
        flops = 2 * loc.nnz + 12 * loc.sub.n_owned
        out.append(flops / (platform.reference_rate * w.speed_factor))
    return np.array(out)


def cmd_decompose(cfg: ExperimentConfig, out: Path) -> perf_model.Decomposition:
    mesh = cfg.build_mesh()
    platform = cfg.build_platform()
    A, _ = assemble_laplacian(mesh, cfg.build_boundary(), D=cfg.problem.diffusivity)
    d = cfg.decomposition
    dec = perf_model.heterogeneous_decomposition(A, mesh, platform, mode=d.mode, warmup=d.warmup,
                                                 measured=d.measured, o_mode=d.o_mode)
    out.mkdir(parents=True, exist_ok=True)
    dec.plan.to_csv(out / "partition.csv")
    times = predicted_iteration_times(dec.system, platform)
    rows = []
    for i in range(dec.plan.n_parts):
        rows.append(dict(part=i, speed_factor=platform.workers[i].speed_factor,
                         target_fraction=float(dec.plan.target_fractions[i]),
                         target_size=int(dec.plan.target_sizes[i]), achieved_size=int(dec.plan.achieved_sizes[i]),
                         halo_cells=dec.system.subdomains[i].n_halo, predicted_time=float(times[i])))
    write_rows(out / "decomposition.csv", rows)
    write_rows(out / "decomposition_summary.csv", [dict(
        mode=d.mode, parts=dec.plan.n_parts, cells=dec.plan.n_cells, edge_cut=dec.plan.edge_cut,
        time_imbalance=float(times.max() / times.min()))])
    if dec.calibration is not None:
        perf_model.write_profiles(out / "profiles.csv", dec.calibration.profiles)
    print(f"{d.mode} decomposition into {dec.plan.n_parts} part(s): sizes {dec.plan.achieved_sizes.tolist()} "
          f"edge cut {dec.plan.edge_cut}, predicted time imbalance {times.max() / times.min():.3f}")
    return dec


def compare_rows(configs: list[tuple[str, ExperimentConfig]], seed: int = 0) -> list[dict]:
    dims = {(c.mesh.nx, c.mesh.ny, c.mesh.nz, c.mesh.h) for _, c in configs}
    if len(dims) > 1:
        raise ConfigError(f"compare: configurations use different meshes {sorted(dims)}")
    rows = []
    for label, c in configs:
        r = run_experiment(c, seed).report
        rows.append(dict(config=label, variant=r.variant, preconditioner=r.preconditioner,
                         decomposition=c.decomposition.mode, parts=r.n_parts, converged=int(r.converged),
                         iterations=r.iterations, virtual_time=r.virtual_time,
                         time_per_iteration=r.time_per_iteration, reductions=r.loop_reductions,
                         p2p_bytes=r.comm.p2p_bytes))
    return rows


def cmd_compare(configs: list[tuple[str, ExperimentConfig]], out: Path, seed: int = 0) -> list[dict]:
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations")
    rows = compare_rows(configs, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "compare.csv", rows)
    long = [dict(config=r["config"], metric=k, value=v) for r in rows for k, v in r.items() if k != "config"]
    write_rows(out / "compare_long.csv", long)
    for r in rows:
        print(f"{r['config']}: iterations={r['iterations']} time/iter={r['time_per_iteration']:.4e} "
              f"reductions={r['reductions']}")
    return rows


def roofline_rows(peak, mem_bw, link_bw=None) -> list[dict]:
    if peak is None or mem_bw is None:
        raise ConfigError("roofline needs platform.peak_flops and platform.mem_bandwidth")
    rows = []
    for k in KERNELS:
        ai = arithmetic_intensity(k)
        pt = perf_model.roofline(ai, peak, mem_bw, link_bw)
        rows.append(dict(kernel=k, ai=ai, attainable=pt.attainable, binding=pt.binding))
    return rows


def cmd_roofline(peak, mem_bw, link_bw, out: Path) -> list[dict]:
    rows = roofline_rows(peak, mem_bw, link_bw)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "roofline.csv", rows)
    for r in rows:
        print(f"{r['kernel']:14s} ai={r['ai']:.4f} attainable={r['attainable']:.4e} flop/s ({r['binding']})")
    return rows


def cmd_bench_stream(n, repetitions: int, out: Path) -> perf_model.StreamResult:
    try:
        res = perf_model.stream_triad(n, repetitions)
    except ValueError as exc:
        raise ConfigError(f"bench-stream: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "stream.csv", [dict(n=res.n, best_bandwidth=res.best, median_bandwidth=res.median)])
    print(f"triad n={res.n}: best {res.best / 1e9:.2f} GB/s, median {res.median / 1e9:.2f} GB/s")
    return res


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.read(args.config[0]) if args.config else ExperimentConfig()
    return _apply_flags(cfg, args)


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.clock:
        cfg = cfg.with_override("platform.clock", args.clock)
    return cfg


def _out(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.output.dir if cfg else "out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetkrylov", description="Heterogeneity-aware CG experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", metavar="PATH", help="experiment config (INI)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, default=0, help="seed for random right-hand sides")
    common.add_argument("--clock", choices=("virtual", "wall"), help="override platform.clock")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one configuration")
    sub.add_parser("decompose", parents=[common], help="partition the mesh and report balance")
    c = sub.add_parser("compare", parents=[common], help="compare configurations")
    c.add_argument("--vary", metavar="SECTION.KEY=V1,V2", help="sweep one key of a single config")
    r = sub.add_parser("roofline", parents=[common], help="roofline bounds of the CG kernels")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--no-link", action="store_true", help="ignore the interconnect slot")
    s = sub.add_parser("bench-stream", parents=[common], help="STREAM triad bandwidth")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--repetitions", type=int, default=10)
    return ap


def _compare_configs(args) -> list[tuple[str, ExperimentConfig]]:
    paths = args.config or []
    if args.vary:
        if len(paths) > 1:
            raise ConfigError("--vary takes a single --config")
        base = _load(args)
        key, _, vals = args.vary.partition("=")
        return [(f"{key}={v}", base.with_override(key, v)) for v in vals.split(",")]
    return [(Path(p).stem, _apply_flags(ExperimentConfig.read(p), args)) for p in paths]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "solve":
            cfg = _load(args)
            cmd_solve(cfg, _out(args, cfg), args.seed)
        elif args.command == "decompose":
            cfg = _load(args)
            cmd_decompose(cfg, _out(args, cfg))
        elif args.command == "compare":
            configs = _compare_configs(args)
            cmd_compare(configs, _out(args, configs[0][1] if configs else None), args.seed)
        elif args.command == "roofline":
            if args.preset:
                pl = preset(args.preset)
                out = _out(args)
            else:
                cfg = _load(args)
                pl = cfg.build_platform()
                out = _out(args, cfg)
            cmd_roofline(pl.peak_flops, pl.mem_bandwidth, None if args.no_link else pl.link_bandwidth, out)
        elif args.command == "bench-stream":
            cmd_bench_stream(args.n, args.repetitions, _out(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceFailure, BreakdownError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (AssertionError, ScheduleError, DeadlockError, DependencyViolation) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
