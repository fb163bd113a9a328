"""CSR matrix and vector kernels with FLOP/byte accounting.

Cost model per kernel (N rows or elements, nnz stored entries):

    kernel          flops    bytes
    spmv_csr        2*nnz    16*nnz
    vector_update   2*N      24*N
    dot             2*N      16*N

For a 7-point stencil with nnz ~= 7N this gives 14N flops and 112N bytes
per SpMV.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

SPMV_FLOPS_PER_NNZ = 2
SPMV_BYTES_PER_NNZ = 16
UPDATE_FLOPS_PER_ELEM = 2
UPDATE_BYTES_PER_ELEM = 24
DOT_FLOPS_PER_ELEM = 2
DOT_BYTES_PER_ELEM = 16

KERNELS = ("spmv_csr", "vector_update", "dot")


class DimensionError(ValueError):
    """Operand sizes do not agree."""


@dataclass
class KernelStat:
    calls: int = 0
    flops: int = 0
    bytes: int = 0


@dataclass
class KernelCounters:
    """Running FLOP/byte totals, broken down by kernel."""

    spmv: KernelStat = field(default_factory=KernelStat)
    update: KernelStat = field(default_factory=KernelStat)
    dot: KernelStat = field(default_factory=KernelStat)
    # preconditioner and other work outside the three CG kernels
    other: KernelStat = field(default_factory=KernelStat)

    _names = ("spmv", "update", "dot", "other")

    @property
    def flops(self) -> int:
        return sum(getattr(self, n).flops for n in self._names)

    @property
    def bytes(self) -> int:
        return sum(getattr(self, n).bytes for n in self._names)

    def reset(self) -> None:
        for n in self._names:
            setattr(self, n, KernelStat())

    def snapshot(self) -> dict[str, int]:
        out = {}
        for name in self._names:
            st = getattr(self, name)
            out[f"{name}_calls"] = st.calls
            out[f"{name}_flops"] = st.flops
            out[f"{name}_bytes"] = st.bytes
        out["flops"] = self.flops
        out["bytes"] = self.bytes
        return out

    def merge(self, other: KernelCounters) -> KernelCounters:
        out = KernelCounters()
        for name in self._names:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, KernelStat(a.calls + b.calls, a.flops + b.flops, a.bytes + b.bytes))
        return out

    def _add(self, name: str, flops: int, nbytes: int) -> None:
        st = getattr(self, name)
        st.calls += 1
        st.flops += flops
        st.bytes += nbytes


class CsrMatrix:
    """Square sparse matrix in compressed-sparse-row form (float64).

    Construction validates the CSR invariants: nondecreasing row offsets,
    in-range column indices that are strictly increasing within each row.
    """

    def __init__(self, row_offsets, col_indices, values, n_cols=None, symmetric=False, check=True):
        self.row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.n_rows = len(self.row_offsets) - 1
        self.n_cols = self.n_rows if n_cols is None else int(n_cols)
        self.symmetric = symmetric
        self._scipy = None
        if check:
            self.validate()

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def validate(self) -> None:
        ro, ci = self.row_offsets, self.col_indices
        if self.n_rows < 0 or ro[0] != 0:
            raise ValueError("row_offsets must start at 0")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if ro[-1] != len(ci) or len(ci) != len(self.values):
            raise ValueError("row_offsets[-1], len(col_indices) and len(values) disagree")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if len(ci) > 1:
            step = np.diff(ci)
            # positions where a new row starts are exempt from the ordering check
            starts = np.zeros(len(ci) - 1, dtype=bool)
            inner = ro[1:-1]
            inner = inner[(inner > 0) & (inner < len(ci))]
            starts[inner - 1] = True
            if np.any((step <= 0) & ~starts):
                raise ValueError("column indices must be strictly increasing within a row")
        if self.symmetric and not self.is_symmetric():
            raise ValueError("matrix flagged symmetric but A != A^T")

    def to_scipy(self) -> sp.csr_matrix:
        if self._scipy is None:
            self._scipy = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
        return self._scipy

    @classmethod
    def from_scipy(cls, m, symmetric=False, check=True) -> CsrMatrix:
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, n_cols=m.shape[1], symmetric=symmetric, check=check)

    @classmethod
    def from_dense(cls, a, symmetric=False) -> CsrMatrix:
        a = np.asarray(a, dtype=np.float64)
        return cls.from_scipy(sp.csr_matrix(a), symmetric=symmetric)

    @classmethod
    def identity(cls, n: int) -> CsrMatrix:
        return cls(np.arange(n + 1), np.arange(n), np.ones(n), symmetric=True)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def is_symmetric(self, rtol=0.0) -> bool:
        m = self.to_scipy()
        if m.shape[0] != m.shape[1]:
            return False
        d = abs(m - m.T)
        if d.nnz == 0:
            return True
        scale = abs(m).max() if m.nnz else 1.0
        return d.max() <= rtol * scale

    def transpose(self) -> CsrMatrix:
        return CsrMatrix.from_scipy(self.to_scipy().T.tocsr(), symmetric=self.symmetric, check=False)

    def __repr__(self) -> str:
        return f"CsrMatrix(shape={self.shape}, nnz={self.nnz}, symmetric={self.symmetric})"


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def spmv(A: CsrMatrix, x, counters: KernelCounters | None = None, out=None) -> np.ndarray:
    x = _vec(x)
    if x.ndim != 1 or len(x) != A.n_cols:
        raise DimensionError(f"spmv: matrix has {A.n_cols} columns but x has length {x.shape}")
    y = A.to_scipy() @ x
    if out is not None:
        out[:] = y
        y = out
    if counters is not None:
        counters._add("spmv", SPMV_FLOPS_PER_NNZ * A.nnz, SPMV_BYTES_PER_NNZ * A.nnz)
    return y


def dot(x, y, counters: KernelCounters | None = None) -> float:
    x, y = _vec(x), _vec(y)
    if x.shape != y.shape:
        raise DimensionError(f"dot: lengths {x.shape} and {y.shape} differ")
    n = x.size
    if counters is not None:
        counters._add("dot", DOT_FLOPS_PER_ELEM * n, DOT_BYTES_PER_ELEM * n)
    return float(np.dot(x, y))


def axpy(alpha: float, x, y, counters: KernelCounters | None = None, out=None) -> np.ndarray:
    """Return ``y + alpha * x``. Pass ``out=y`` to update in place."""
    x, y = _vec(x), _vec(y)
    if x.shape != y.shape:
        raise DimensionError(f"axpy: lengths {x.shape} and {y.shape} differ")
    if out is None:
        out = y + alpha * x
    else:
        if out is y:
            out += alpha * x
        else:
            np.multiply(x, alpha, out=out)
            out += y
    if counters is not None:
        counters._add("update", UPDATE_FLOPS_PER_ELEM * x.size, UPDATE_BYTES_PER_ELEM * x.size)
    return out


def xpay(x, beta: float, y, counters: KernelCounters | None = None) -> np.ndarray:
    """In-place ``y <- x + beta * y`` (the CG direction update); returns y."""
    x = _vec(x)
    if x.shape != y.shape:
        raise DimensionError(f"xpay: lengths {x.shape} and {y.shape} differ")
    y *= beta
    y += x
    if counters is not None:
        counters._add("update", UPDATE_FLOPS_PER_ELEM * x.size, UPDATE_BYTES_PER_ELEM * x.size)
    return y


def kernel_cost(kernel: str, n: int) -> tuple[int, int]:
    """(flops, bytes) of one call; ``n`` is nnz for SpMV and vector length otherwise."""
    if kernel == "spmv_csr":
        return SPMV_FLOPS_PER_NNZ * n, SPMV_BYTES_PER_NNZ * n
    if kernel == "vector_update":
        return UPDATE_FLOPS_PER_ELEM * n, UPDATE_BYTES_PER_ELEM * n
    if kernel == "dot":
        return DOT_FLOPS_PER_ELEM * n, DOT_BYTES_PER_ELEM * n
    raise KeyError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def arithmetic_intensity(kernel: str, n: int = 1) -> float:
    flops, nbytes = kernel_cost(kernel, max(int(n), 1))
    return flops / nbytes


def write_matrix_market(path, A: CsrMatrix) -> None:
    scipy.io.mmwrite(str(path), A.to_scipy(), symmetry="general")


def read_matrix_market(path, symmetric=False) -> CsrMatrix:
    m = scipy.io.mmread(str(Path(path)))
    return CsrMatrix.from_scipy(sp.csr_matrix(m), symmetric=symmetric)
