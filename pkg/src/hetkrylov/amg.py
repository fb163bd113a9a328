"""Aggregation AMG V-cycle preconditioner with weighted-Jacobi smoothing.

Aggregates come from a greedy distance-2 maximal independent set over the
matrix graph (lowest index first). Coarse operators are Galerkin products
``P^T A P``; the smoother is weighted Jacobi with ``omega / rho(D^-1 A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .sparse_core import CsrMatrix, DimensionError

DEFAULT_OMEGA = 4.0 / 3.0
DEFAULT_COARSEST = 64


@numba.njit(cache=True)
def _mis2_aggregate(indptr, indices, n):
    agg = np.full(n, -1, dtype=np.int64)
    roots = np.full(n, -1, dtype=np.int64)
    covered = np.zeros(n, dtype=np.bool_)
    n_agg = 0
    for i in range(n):
        if covered[i]:
            continue
        a = n_agg
        roots[a] = i
        n_agg += 1
        agg[i] = a
        covered[i] = True
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if j == i:
                continue
            covered[j] = True
            if agg[j] < 0:
                agg[j] = a
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if j == i:
                continue
            for kk in range(indptr[j], indptr[j + 1]):
                k = indices[kk]
                covered[k] = True
                # only through a member of this aggregate, keeps aggregates connected
                if agg[k] < 0 and agg[j] == a:
                    agg[k] = a
    # stragglers: distance-2 nodes reached through another aggregate
    snapshot = agg.copy()
    for i in range(n):
        if snapshot[i] >= 0:
            continue
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if snapshot[j] >= 0:
                agg[i] = snapshot[j]
                break
        if agg[i] < 0:
            roots[n_agg] = i
            agg[i] = n_agg
            n_agg += 1
    return agg, roots[:n_agg]


def _run_mis2(A: CsrMatrix):
    if A.n_rows == 0:
        raise ValueError("cannot aggregate an empty matrix")
    # structural graph without explicit zeros
    m = A.to_scipy().copy()
    m.eliminate_zeros()
    return _mis2_aggregate(m.indptr.astype(np.int64), m.indices.astype(np.int64), A.n_rows)


def aggregate(A: CsrMatrix) -> np.ndarray:
    """Cell -> aggregate id map (ids numbered in root order)."""
    return _run_mis2(A)[0]


def mis2_roots(A: CsrMatrix) -> np.ndarray:
    """Root cell of each aggregate, in aggregate id order."""
    return _run_mis2(A)[1]


def prolongator(agg: np.ndarray) -> sp.csr_matrix:
    n = len(agg)
    nc = int(agg.max()) + 1
    return sp.csr_matrix((np.ones(n), (np.arange(n), agg)), shape=(n, nc))


def galerkin_by_aggregates(A: sp.csr_matrix, agg: np.ndarray, n_coarse: int) -> sp.csr_matrix:
    """``P^T A P`` for piecewise-constant P: sum entries over aggregate pairs."""
    coo = A.tocoo()
    Ac = sp.csr_matrix((coo.data, (agg[coo.row], agg[coo.col])), shape=(n_coarse, n_coarse))
    Ac.sum_duplicates()
    Ac.sort_indices()
    return Ac


def spectral_radius_dinv_a(A: sp.csr_matrix, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of rho(D^-1 A), padded slightly from above."""
    n = A.shape[0]
    dinv = 1.0 / A.diagonal()
    if n <= 16:
        ev = np.linalg.eigvals(dinv[:, None] * A.toarray())
        return float(np.max(np.abs(ev)))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = dinv * (A @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        v = w / lam
    return 1.05 * lam


@dataclass
class Level:
    A: sp.csr_matrix
    P: sp.csr_matrix | None = None
    aggregates: np.ndarray | None = None
    dinv: np.ndarray | None = None
    rho: float = 1.0


@dataclass
class AmgHierarchy:
    levels: list[Level]
    omega: float = DEFAULT_OMEGA
    coarsest_size: int = DEFAULT_COARSEST
    _coarse_factor: tuple = field(default=None, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> list[int]:
        return [lv.A.shape[0] for lv in self.levels]

    def operator_complexity(self) -> float:
        return sum(lv.A.nnz for lv in self.levels) / self.levels[0].A.nnz

    def coarsening_ratios(self) -> list[float]:
        s = self.sizes
        return [s[i] / s[i + 1] for i in range(len(s) - 1)]

    def summary(self) -> str:
        lines = [f"AMG hierarchy: {self.n_levels} levels, operator complexity {self.operator_complexity():.3f}"]
        for i, lv in enumerate(self.levels):
            lines.append(f"  level {i}: n={lv.A.shape[0]} nnz={lv.A.nnz}")
        return "\n".join(lines)

    def cycle_flops(self) -> int:
        """Approximate flops of one V(1,1) cycle."""
        total = 0
        for lv in self.levels[:-1]:
            total += 4 * lv.A.nnz + 4 * lv.P.nnz + 8 * lv.A.shape[0]
        nc = self.levels[-1].A.shape[0]
        return total + 2 * nc * nc

    def solve_coarsest(self, r: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._coarse_factor, r)


def build_hierarchy(A: CsrMatrix, omega: float = DEFAULT_OMEGA, coarsest_size: int = DEFAULT_COARSEST,
                    prolongation: str = "smoothed", max_levels: int = 25, check_galerkin: bool = True) -> AmgHierarchy:
    """Build the aggregation hierarchy down to ``coarsest_size`` unknowns.

    ``prolongation="unsmoothed"`` uses the piecewise-constant aggregate
    indicator. ``"smoothed"`` (default) applies one weighted-Jacobi step to
    it, ``P = (I - omega/rho D^-1 A) P0``, which keeps iteration counts
    nearly independent of the grid size.
    """
    if prolongation not in ("smoothed", "unsmoothed"):
        raise ValueError(f"unknown prolongation {prolongation!r}")
    m = A.to_scipy().tocsr()
    if m.shape[0] != m.shape[1]:
        raise DimensionError("AMG needs a square matrix")
    asym = abs(m - m.T)
    if asym.nnz and asym.max() > 1e-12 * abs(m).max():
        raise ValueError("AMG hierarchy requires a symmetric matrix")
    levels = []
    cur = m
    while True:
        lv = Level(A=cur, dinv=1.0 / cur.diagonal())
        levels.append(lv)
        n = cur.shape[0]
        if n <= coarsest_size or len(levels) >= max_levels:
            break
        agg = aggregate(CsrMatrix.from_scipy(cur, check=False))
        nc = int(agg.max()) + 1
        if nc >= n:
            break  # nothing left to coarsen
        lv.rho = spectral_radius_dinv_a(cur)
        P0 = prolongator(agg)
        if prolongation == "unsmoothed":
            P = P0
            Ac = galerkin_by_aggregates(cur, agg, nc)
            ref = (P.T @ cur @ P).tocsr() if check_galerkin else None
        else:
            P = (P0 - (omega / lv.rho) * sp.diags(lv.dinv) @ (cur @ P0)).tocsr()
            P.eliminate_zeros()
            Ac = (P.T @ (cur @ P)).tocsr()
            ref = ((P.T @ cur) @ P).tocsr() if check_galerkin else None
        if ref is not None:
            diff = abs(ref - Ac)
            scale = max(abs(ref).max(), 1.0)
            if diff.nnz and diff.max() > 1e-12 * scale:
                raise AssertionError("Galerkin product mismatch between the two evaluation routes")
        Ac.sort_indices()
        lv.P, lv.aggregates = P, agg
        cur = Ac
    h = AmgHierarchy(levels=levels, omega=omega, coarsest_size=coarsest_size)
    h._coarse_factor = scipy.linalg.cho_factor(levels[-1].A.toarray())
    return h


def smooth(level: Level, omega: float, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """One weighted-Jacobi sweep, step ``omega / rho(D^-1 A)``."""
    return x + (omega / level.rho) * level.dinv * (b - level.A @ x)


def vcycle(h: AmgHierarchy, r: np.ndarray, level: int = 0) -> np.ndarray:
    """Approximate ``A^-1 r`` with one V(1,1) cycle from a zero initial guess."""
    r = np.asarray(r, dtype=np.float64)
    lv = h.levels[level]
    if len(r) != lv.A.shape[0]:
        raise DimensionError(f"vcycle: level {level} has {lv.A.shape[0]} unknowns, got {len(r)}")
    if level == h.n_levels - 1:
        return h.solve_coarsest(r)
    step = h.omega / lv.rho
    z = step * lv.dinv * r
    rc = lv.P.T @ (r - lv.A @ z)
    z += lv.P @ vcycle(h, rc, level + 1)
    z = smooth(lv, h.omega, z, r)
    return z


def jacobi_error_propagator(A: CsrMatrix, omega: float = DEFAULT_OMEGA) -> np.ndarray:
    """Dense ``I - (omega/rho) D^-1 A``; for small verification problems."""
    m = A.to_scipy()
    rho = spectral_radius_dinv_a(m)
    d = A.to_dense()
    return np.eye(A.n_rows) - (omega / rho) * (d / m.diagonal()[:, None])


class AmgPreconditioner:
    """Callable ``M^-1`` wrapper counting applications."""

    def __init__(self, A: CsrMatrix, **kw):
        self.hierarchy = build_hierarchy(A, **kw)
        self.applications = 0

    def __call__(self, r: np.ndarray) -> np.ndarray:
        self.applications += 1
        return vcycle(self.hierarchy, r)
