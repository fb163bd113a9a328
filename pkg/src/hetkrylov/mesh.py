"""Structured 3D meshes, 7-point Laplacian assembly and the implicit heat step.

Cells are ordered lexicographically with x fastest: ``c = i + nx*(j + ny*k)``.
Dirichlet faces sit one spacing ``h`` beyond the outermost cell centres, so
cell ``(i, j, k)`` is centred at ``((i+1)h, (j+1)h, (k+1)h)`` and the domain
length along x is ``(nx+1)h``. Boundary values are eliminated into the
right-hand side; every diagonal entry is ``6D/h^2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .sparse_core import CsrMatrix

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")

FaceValue = Union[float, Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]]


class ConvergenceError(RuntimeError):
    """Inner linear solve did not converge; ``report`` holds the details."""

    def __init__(self, report):
        super().__init__(
            f"linear solve did not converge after {report.iterations} iterations "
            f"(last relative residual {report.final_residual:.3e})"
        )
        self.report = report


@dataclass(frozen=True)
class StructuredMesh:
    nx: int
    ny: int
    nz: int
    h: float = 1.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"mesh dims must be >= 1, got {(self.nx, self.ny, self.nz)}")
        if self.h <= 0:
            raise ValueError("spacing h must be positive")

    @classmethod
    def cube(cls, n: int, h: float = 1.0) -> StructuredMesh:
        return cls(n, n, n, h)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def lengths(self) -> tuple[float, float, float]:
        return tuple((n + 1) * self.h for n in self.dims)

    def index(self, i, j, k):
        return i + self.nx * (j + self.ny * k)

    def ijk(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = np.arange(self.n_cells)
        return c % self.nx, (c // self.nx) % self.ny, c // (self.nx * self.ny)

    def centres(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i, j, k = self.ijk()
        return (i + 1) * self.h, (j + 1) * self.h, (k + 1) * self.h

    def boundary_face_count(self) -> np.ndarray:
        i, j, k = self.ijk()
        cnt = np.zeros(self.n_cells, dtype=np.int64)
        for idx, n in ((i, self.nx), (j, self.ny), (k, self.nz)):
            cnt += (idx == 0).astype(np.int64) + (idx == n - 1).astype(np.int64)
        return cnt

    def _neighbour_pairs(self):
        """Yield (face, mask, offset) for each of the six stencil directions."""
        i, j, k = self.ijk()
        sx, sy, sz = 1, self.nx, self.nx * self.ny
        yield "x-", i > 0, -sx
        yield "x+", i < self.nx - 1, sx
        yield "y-", j > 0, -sy
        yield "y+", j < self.ny - 1, sy
        yield "z-", k > 0, -sz
        yield "z+", k < self.nz - 1, sz

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell adjacency graph as CSR arrays (indptr, indices), sorted per row."""
        rows, cols = [], []
        c = np.arange(self.n_cells)
        for _, mask, off in self._neighbour_pairs():
            rows.append(c[mask])
            cols.append(c[mask] + off)
        g = sp.csr_matrix(
            (np.ones(sum(len(r) for r in rows), dtype=np.int8), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_cells, self.n_cells),
        )
        g.sort_indices()
        return g.indptr.astype(np.int64), g.indices.astype(np.int64)


@dataclass
class BoundarySpec:
    """Dirichlet value per face; a value is a constant or ``f(x, y, z)``."""

    values: dict[str, FaceValue] = field(default_factory=lambda: {f: 0.0 for f in FACES})

    def __post_init__(self):
        missing = [f for f in FACES if f not in self.values]
        if missing:
            raise ValueError(f"boundary spec missing faces {missing}")

    @classmethod
    def uniform(cls, value: float) -> BoundarySpec:
        return cls({f: float(value) for f in FACES})

    @classmethod
    def from_faces(cls, xm=0.0, xp=0.0, ym=0.0, yp=0.0, zm=0.0, zp=0.0) -> BoundarySpec:
        return cls(dict(zip(FACES, (xm, xp, ym, yp, zm, zp))))

    def evaluate(self, face: str, x, y, z) -> np.ndarray:
        v = self.values[face]
        if callable(v):
            return np.asarray(v(x, y, z), dtype=np.float64) * np.ones_like(x, dtype=np.float64)
        return np.full(np.shape(x), float(v))

    def extrema(self, mesh: StructuredMesh) -> tuple[float, float]:
        """Min and max of the Dirichlet data actually seen by ``mesh``."""
        lo, hi = np.inf, -np.inf
        for face, pts in _face_points(mesh).items():
            vals = self.evaluate(face, *pts[1:])
            lo, hi = min(lo, vals.min()), max(hi, vals.max())
        return float(lo), float(hi)


def _face_points(mesh: StructuredMesh):
    """For each face: (cells touching it, x, y, z of their boundary images)."""
    x, y, z = mesh.centres()
    lx, ly, lz = mesh.lengths
    i, j, k = mesh.ijk()
    out = {}
    for face, sel, pt in (
        ("x-", i == 0, (0.0, None, None)),
        ("x+", i == mesh.nx - 1, (lx, None, None)),
        ("y-", j == 0, (None, 0.0, None)),
        ("y+", j == mesh.ny - 1, (None, ly, None)),
        ("z-", k == 0, (None, None, 0.0)),
        ("z+", k == mesh.nz - 1, (None, None, lz)),
    ):
        cells = np.nonzero(sel)[0]
        coords = []
        for fixed, base in zip(pt, (x, y, z)):
            coords.append(np.full(len(cells), fixed) if fixed is not None else base[cells])
        out[face] = (cells, *coords)
    return out


def assemble_laplacian(mesh: StructuredMesh, bc: BoundarySpec, D: float = 1.0) -> tuple[CsrMatrix, np.ndarray]:
    """Assemble ``A = -D * Laplacian`` (7-point) with Dirichlet data eliminated into ``b``."""
    if not D > 0:
        raise ValueError(f"diffusivity must be positive, got {D}")
    n = mesh.n_cells
    coef = D / mesh.h**2
    c = np.arange(n)
    rows = [c]
    cols = [c]
    vals = [np.full(n, 6.0 * coef)]
    for _, mask, off in mesh._neighbour_pairs():
        rows.append(c[mask])
        cols.append(c[mask] + off)
        vals.append(np.full(int(mask.sum()), -coef))
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    b = np.zeros(n)
    for face, (cells, x, y, z) in _face_points(mesh).items():
        np.add.at(b, cells, coef * bc.evaluate(face, x, y, z))
    return CsrMatrix.from_scipy(A, symmetric=True, check=False), b


def assemble_periodic_laplacian(mesh: StructuredMesh, shift: float = 1.0) -> CsrMatrix:
    """Fully periodic 7-point operator plus ``shift * I``.

    Every row has exactly seven nonzeros, which makes it the exact
    realisation of the nnz = 7N interior model. Needs at least 3 cells per axis.
    """
    if min(mesh.dims) < 3:
        raise ValueError("periodic stencil needs >= 3 cells per axis")
    i, j, k = mesh.ijk()
    nx, ny, nz = mesh.dims
    n = mesh.n_cells
    c = np.arange(n)
    rows, cols, vals = [c], [c], [np.full(n, 6.0 + shift)]
    for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        nb = mesh.index((i + di) % nx, (j + dj) % ny, (k + dk) % nz)
        rows.append(c)
        cols.append(nb)
        vals.append(-np.ones(n))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return CsrMatrix.from_scipy(A, symmetric=True, check=False)


@dataclass
class HeatProblem:
    diffusivity: float
    dt: float
    T: np.ndarray

    def __post_init__(self):
        if not self.diffusivity > 0:
            raise ValueError("diffusivity must be positive")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        self.T = np.asarray(self.T, dtype=np.float64)


def heat_step(problem: HeatProblem, A: CsrMatrix, b_bc: np.ndarray, solver):
    """Advance one implicit Euler step: ``(I/dt + A) T_new = T_old/dt + b_bc``.

    ``A`` and ``b_bc`` come from :func:`assemble_laplacian` with the problem's
    diffusivity. ``solver`` is anything with ``solve(A, b) -> (x, report)``.
    Returns ``(T_new, report)``; raises :class:`ConvergenceError` when the
    inner solve fails.
    """
    if len(problem.T) != A.n_rows:
        raise ValueError("temperature field and matrix sizes differ")
    inv_dt = 1.0 / problem.dt
    M = A.to_scipy() + inv_dt * sp.identity(A.n_rows, format="csr")
    M = CsrMatrix.from_scipy(M, symmetric=True, check=False)
    rhs = problem.T * inv_dt + b_bc
    T_new, report = solver.solve(M, rhs)
    if not report.converged:
        raise ConvergenceError(report)
    problem.T = T_new
    return T_new, report


def steady_laplace_solve(mesh: StructuredMesh, bc: BoundarySpec, solver, D: float = 1.0):
    A, b = assemble_laplacian(mesh, bc, D)
    x, report = solver.solve(A, b)
    if not report.converged:
        raise ConvergenceError(report)
    return x, report


def write_field_csv(path, mesh: StructuredMesh, values) -> None:
    i, j, k = mesh.ijk()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "value"])
        for row in zip(i.tolist(), j.tolist(), k.tolist(), np.asarray(values).tolist()):
            w.writerow(row)


def write_field_binary(path, values) -> None:
    np.asarray(values, dtype="<f8").tofile(path)


def read_field_binary(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f8")
