"""Experiment configuration in a sectioned key = value file.

Grammar (INI, read with :mod:`configparser`; every key is optional)::

    [mesh]           nx, ny, nz (cells, >= 1), h (spacing)
    [boundary]       x-, x+, y-, y+, z-, z+ (fixed face temperatures)
    [problem]        kind = steady | heat, diffusivity, dt, steps,
                     rhs = boundary | random
    [solver]         tolerance, max_iterations, variant = cg | pipelined_cg,
                     preconditioner = none | amg, drift_check_interval,
                     amg_omega, amg_coarsest, amg_prolongation
    [platform]       preset, workers (count) or speed_factors (comma list),
                     reduction_latency, p2p_latency, p2p_bandwidth,
                     reference_rate, clock = virtual | wall,
                     scheduler = serial | threads,
                     peak_flops, mem_bandwidth, link_bandwidth (``none`` allowed)
    [decomposition]  mode = even | heterogeneous, warmup, measured,
                     o_mode = exact | approximate
    [output]         dir, field = none | csv | binary

Unknown sections or keys are errors, so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .krylov import PRECONDITIONERS, VARIANTS, SolverConfig
from .mesh import FACES, BoundarySpec, StructuredMesh
from .perf_model import O_MODES
from .platform import PRESETS, PlatformConfig, WorkerSpec


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class MeshSection:
    nx: int = 8
    ny: int = 8
    nz: int = 8
    h: float = 1.0


@dataclass
class BoundarySection:
    values: dict = field(default_factory=lambda: {"x-": 0.0, "x+": 1.0, "y-": 0.0, "y+": 0.0, "z-": 0.0, "z+": 0.0})


@dataclass
class ProblemSection:
    kind: str = "steady"
    diffusivity: float = 1.0
    dt: float = 1.0
    steps: int = 1
    rhs: str = "boundary"


@dataclass
class SolverSection:
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    variant: str = "cg"
    preconditioner: str = "none"
    drift_check_interval: int = 50
    amg_omega: float = 4.0 / 3.0
    amg_coarsest: int = 64
    amg_prolongation: str = "smoothed"


@dataclass
class PlatformSection:
    preset: str = ""
    speed_factors: tuple = (1.0,)
    reduction_latency: float = 1e-5
    p2p_latency: float = 5e-6
    p2p_bandwidth: float = 5e9
    reference_rate: float = 1e9
    clock: str = "virtual"
    scheduler: str = "serial"
    peak_flops: float | None = None
    mem_bandwidth: float | None = None
    link_bandwidth: float | None = None


@dataclass
class DecompositionSection:
    mode: str = "even"
    warmup: int = 3
    measured: int = 10
    o_mode: str = "exact"


@dataclass
class OutputSection:
    dir: str = "out"
    field: str = "none"


@dataclass
class ExperimentConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    solver: SolverSection = field(default_factory=SolverSection)
    platform: PlatformSection = field(default_factory=PlatformSection)
    decomposition: DecompositionSection = field(default_factory=DecompositionSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        m = self.mesh
        for k in ("nx", "ny", "nz"):
            if getattr(m, k) < 1:
                raise ConfigError(f"mesh.{k} must be >= 1")
        if not m.h > 0:
            raise ConfigError("mesh.h must be positive")
        if set(self.boundary.values) != set(FACES):
            raise ConfigError(f"boundary must give all faces {FACES}")
        p = self.problem
        _choice("problem.kind", p.kind, ("steady", "heat"))
        _choice("problem.rhs", p.rhs, ("boundary", "random"))
        if not p.diffusivity > 0:
            raise ConfigError("problem.diffusivity must be positive")
        if not p.dt > 0:
            raise ConfigError("problem.dt must be positive")
        if p.steps < 1:
            raise ConfigError("problem.steps must be >= 1")
        s = self.solver
        if not s.tolerance > 0:
            raise ConfigError("solver.tolerance must be positive")
        if s.max_iterations < 1:
            raise ConfigError("solver.max_iterations must be >= 1")
        _choice("solver.variant", s.variant, VARIANTS)
        _choice("solver.preconditioner", s.preconditioner, PRECONDITIONERS)
        _choice("solver.amg_prolongation", s.amg_prolongation, ("smoothed", "unsmoothed"))
        pl = self.platform
        if pl.preset and pl.preset not in PRESETS:
            raise ConfigError(f"platform.preset {pl.preset!r} is not one of {sorted(PRESETS)}")
        if not pl.speed_factors or any(not f > 0 for f in pl.speed_factors):
            raise ConfigError("platform.speed_factors must be positive")
        _choice("platform.clock", pl.clock, ("virtual", "wall"))
        _choice("platform.scheduler", pl.scheduler, ("serial", "threads"))
        d = self.decomposition
        _choice("decomposition.mode", d.mode, ("even", "heterogeneous"))
        _choice("decomposition.o_mode", d.o_mode, O_MODES)
        if d.warmup < 0 or d.measured < 1:
            raise ConfigError("decomposition.warmup must be >= 0 and decomposition.measured >= 1")
        _choice("output.field", self.output.field, ("none", "csv", "binary"))

    # -- derived objects ----------------------------------------------------
    def build_mesh(self) -> StructuredMesh:
        return StructuredMesh(self.mesh.nx, self.mesh.ny, self.mesh.nz, self.mesh.h)

    def build_boundary(self) -> BoundarySpec:
        return BoundarySpec(dict(self.boundary.values))

    def build_solver(self) -> SolverConfig:
        return SolverConfig(**dataclasses.asdict(self.solver))

    def build_platform(self) -> PlatformConfig:
        pl = self.platform
        kw = {k: getattr(pl, k) for k in ("reduction_latency", "p2p_latency", "p2p_bandwidth", "reference_rate",
                                          "clock", "scheduler")}
        rates = dict(PRESETS.get(pl.preset, {}))
        for k in ("peak_flops", "mem_bandwidth", "link_bandwidth"):
            if getattr(pl, k) is not None:
                rates[k] = getattr(pl, k)
        workers = [WorkerSpec(i, float(f)) for i, f in enumerate(pl.speed_factors)]
        return PlatformConfig(workers=workers, name=pl.preset or "custom", **kw, **rates)

    # -- serialization ------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            if name == "boundary":
                cp[name] = {f: repr(float(sec.values[f])) for f in FACES}
                continue
            items = {}
            for f in dataclasses.fields(sec):
                v = getattr(sec, f.name)
                if f.name == "speed_factors":
                    items[f.name] = ", ".join(repr(float(x)) for x in v)
                elif v is None:
                    items[f.name] = "none"
                elif isinstance(v, float):
                    items[f.name] = repr(v)
                else:
                    items[f.name] = str(v)
            cp[name] = items
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from None
        unknown = set(cp.sections()) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            if not cp.has_section(name):
                continue
            raw = dict(cp[name])
            if name == "boundary":
                vals = BoundarySection().values
                for k, v in raw.items():
                    if k not in FACES:
                        raise ConfigError(f"unknown key boundary.{k}; faces are {FACES}")
                    vals[k] = _parse(f"boundary.{k}", v, float)
                kw[name] = BoundarySection(vals)
                continue
            if name == "platform" and "workers" in raw:
                if "speed_factors" in raw:
                    raise ConfigError("platform: give either workers or speed_factors, not both")
                n = _parse("platform.workers", raw.pop("workers"), int)
                if n < 1:
                    raise ConfigError("platform.workers must be >= 1")
                raw["speed_factors"] = ", ".join(["1.0"] * n)
            fields = {f.name: f for f in dataclasses.fields(typ)}
            args = {}
            for k, v in raw.items():
                if k not in fields:
                    raise ConfigError(f"unknown key {name}.{k}")
                args[k] = _convert(f"{name}.{k}", v, typ().__dict__[k], k)
            kw[name] = typ(**args)
        return cls(**kw)

    @classmethod
    def read(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_ini(text)

    def with_override(self, key: str, value: str) -> ExperimentConfig:
        """Copy with ``section.key`` set from its string form."""
        text = self.to_ini()
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        cp.read_string(text)
        sec, _, k = key.partition(".")
        if not cp.has_section(sec) or not k:
            raise ConfigError(f"cannot override {key!r}")
        if sec == "platform" and k == "workers":
            cp[sec]["speed_factors"] = ", ".join(["1.0"] * _parse(key, value, int))
        else:
            cp[sec][k] = value
        return ExperimentConfig.from_ini(_dump(cp))


_SECTIONS = {
    "mesh": MeshSection,
    "boundary": BoundarySection,
    "problem": ProblemSection,
    "solver": SolverSection,
    "platform": PlatformSection,
    "decomposition": DecompositionSection,
    "output": OutputSection,
}

_OPTIONAL_FLOATS = ("peak_flops", "mem_bandwidth", "link_bandwidth")


def _dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _choice(name: str, value, allowed) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {tuple(allowed)}, got {value!r}")


def _parse(name: str, text: str, typ):
    try:
        return typ(text.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ.__name__}") from None


def _convert(name: str, text: str, default, key: str):
    if key == "speed_factors":
        return tuple(_parse(name, t, float) for t in text.split(",") if t.strip())
    if key in _OPTIONAL_FLOATS:
        return None if text.strip().lower() in ("", "none") else _parse(name, text, float)
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return _parse(name, text, int)
    if isinstance(default, float):
        return _parse(name, text, float)
    return text.strip()
