"""Weighted graph partitioning, halo layers and local subdomain systems.

Parts are grown one at a time (largest target first) by breadth-first
search from the lowest-index unassigned cell, then boundary cells are moved
between parts when that lowers the edge cut without leaving the size slack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .sparse_core import CsrMatrix


def largest_remainder(total: int, fractions) -> np.ndarray:
    """Integer shares of ``total`` proportional to ``fractions``, summing exactly.

    Leftover units go to the largest fractional remainders, ties to the
    lowest index.
    """
    f = np.asarray(fractions, dtype=np.float64)
    raw = total * f / f.sum()
    counts = np.floor(raw).astype(np.int64)
    rem = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _as_graph(adjacency) -> tuple[np.ndarray, np.ndarray]:
    """Accept a mesh, a CsrMatrix, a scipy matrix or (indptr, indices)."""
    if hasattr(adjacency, "adjacency"):
        indptr, indices = adjacency.adjacency()
    elif isinstance(adjacency, CsrMatrix) or sp.issparse(adjacency):
        m = adjacency.to_scipy() if isinstance(adjacency, CsrMatrix) else sp.csr_matrix(adjacency)
        # copies: eliminate_zeros below works in place on the index arrays
        m = sp.csr_matrix((np.ones(m.nnz, dtype=np.int8), m.indices.copy(), m.indptr.copy()), shape=m.shape)
        m = m - sp.diags(m.diagonal(), dtype=np.int8, format="csr")
        m.eliminate_zeros()
        m = ((m + m.T) != 0).astype(np.int8).tocsr()
        m.sort_indices()
        indptr, indices = m.indptr, m.indices
    else:
        indptr, indices = adjacency
    return np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64)


@numba.njit(cache=True)
def _grow(indptr, indices, order, targets, n):
    part = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    scan = 0
    for pi in range(len(order)):
        p = order[pi]
        need = targets[p]
        head = 0
        tail = 0
        while need > 0:
            if head == tail:
                while part[scan] >= 0:
                    scan += 1
                part[scan] = p
                need -= 1
                queue[tail] = scan
                tail += 1
                continue
            c = queue[head]
            head += 1
            for jj in range(indptr[c], indptr[c + 1]):
                j = indices[jj]
                if part[j] < 0:
                    part[j] = p
                    need -= 1
                    queue[tail] = j
                    tail += 1
                    if need == 0:
                        break
    return part


@numba.njit(cache=True)
def _refine(indptr, indices, part, sizes, lo, hi, n_parts, max_passes):
    n = len(part)
    cnt = np.zeros(n_parts, dtype=np.int64)
    for _ in range(max_passes):
        moved = 0
        for c in range(n):
            own = part[c]
            if sizes[own] - 1 < lo[own]:
                continue
            cnt[:] = 0
            boundary = False
            for jj in range(indptr[c], indptr[c + 1]):
                q = part[indices[jj]]
                cnt[q] += 1
                if q != own:
                    boundary = True
            if not boundary:
                continue
            best = -1
            best_gain = 0
            for q in range(n_parts):
                if q == own or cnt[q] == 0 or sizes[q] + 1 > hi[q]:
                    continue
                gain = cnt[q] - cnt[own]
                if gain > best_gain:
                    best_gain = gain
                    best = q
            if best >= 0:
                part[c] = best
                sizes[own] -= 1
                sizes[best] += 1
                moved += 1
        if moved == 0:
            break
    return part


def edge_cut(adjacency, part_of) -> int:
    indptr, indices = _as_graph(adjacency)
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    part_of = np.asarray(part_of)
    cross = (part_of[rows] != part_of[indices]) & (rows < indices)
    return int(cross.sum())


@dataclass
class PartitionPlan:
    part_of: np.ndarray
    target_fractions: np.ndarray
    target_sizes: np.ndarray
    achieved_sizes: np.ndarray
    edge_cut: int

    @property
    def n_parts(self) -> int:
        return len(self.target_fractions)

    @property
    def n_cells(self) -> int:
        return len(self.part_of)

    def size_errors(self) -> np.ndarray:
        return self.achieved_sizes - self.n_cells * self.target_fractions

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "part_id"])
            w.writerows(zip(range(self.n_cells), self.part_of.tolist()))

    @staticmethod
    def read_csv(path) -> np.ndarray:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = np.empty(len(rows), dtype=np.int64)
        for r in rows:
            out[int(r["cell_id"])] = int(r["part_id"])
        return out

    @classmethod
    def from_assignment(cls, adjacency, part_of, fractions=None) -> PartitionPlan:
        part_of = np.asarray(part_of, dtype=np.int64)
        n_parts = int(part_of.max()) + 1
        sizes = np.bincount(part_of, minlength=n_parts)
        if fractions is None:
            fractions = sizes / sizes.sum()
        fractions = np.asarray(fractions, dtype=np.float64)
        return cls(part_of, fractions, sizes.copy(), sizes, edge_cut(adjacency, part_of))


def size_slack(targets) -> np.ndarray:
    """Allowed |size - target| per part during refinement: 1% of the target."""
    return (0.01 * np.asarray(targets)).astype(np.int64)


def partition_weighted(adjacency, fractions, refine_passes: int = 4) -> PartitionPlan:
    """Split a graph into ``len(fractions)`` parts of sizes ~ ``N * fractions``.

    ``adjacency`` is a :class:`StructuredMesh`, a matrix (its off-diagonal
    graph is used) or ``(indptr, indices)`` arrays. Deterministic: growth and
    refinement break ties by lowest index.
    """
    indptr, indices = _as_graph(adjacency)
    n = len(indptr) - 1
    if n <= 0:
        raise ValueError("cannot partition an empty graph")
    f = np.asarray(fractions, dtype=np.float64).ravel()
    if f.size == 0:
        raise ValueError("fraction vector is empty")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("fractions must be nonnegative and finite")
    if abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1 (got {f.sum():.12g})")
    targets = largest_remainder(n, f)
    order = np.argsort(-targets, kind="stable").astype(np.int64)
    part = _grow(indptr, indices, order, targets.astype(np.int64), n)
    if refine_passes > 0 and len(f) > 1:
        slack = size_slack(targets)
        lo = np.maximum(targets - slack, np.where(targets > 0, 1, 0))
        hi = targets + slack
        sizes = np.bincount(part, minlength=len(f)).astype(np.int64)
        part = _refine(indptr, indices, part, sizes, lo, hi, len(f), refine_passes)
    achieved = np.bincount(part, minlength=len(f))
    return PartitionPlan(part, f, targets, achieved, edge_cut((indptr, indices), part))


@dataclass(frozen=True)
class Subdomain:
    """Owned cells, halo cells and the per-neighbour exchange schedule.

    ``send[q]`` lists owned cells part ``q`` needs, ``recv[q]`` lists halo
    cells owned by ``q``; both sorted by global id. ``send_local`` indexes
    into ``owned`` and ``recv_local`` into ``halo``.
    """

    part: int
    owned: np.ndarray
    halo: np.ndarray
    send: dict = field(default_factory=dict)
    recv: dict = field(default_factory=dict)
    send_local: dict = field(default_factory=dict)
    recv_local: dict = field(default_factory=dict)

    @property
    def neighbors(self) -> list[int]:
        return sorted(self.recv)

    @property
    def n_owned(self) -> int:
        return len(self.owned)

    @property
    def n_halo(self) -> int:
        return len(self.halo)


def build_subdomains(adjacency, plan: PartitionPlan | np.ndarray) -> list[Subdomain]:
    part_of = plan.part_of if isinstance(plan, PartitionPlan) else np.asarray(plan, dtype=np.int64)
    n_parts = plan.n_parts if isinstance(plan, PartitionPlan) else int(part_of.max()) + 1
    indptr, indices = _as_graph(adjacency)
    if len(indptr) - 1 != len(part_of):
        raise ValueError(f"plan covers {len(part_of)} cells but the mesh has {len(indptr) - 1}")
    rows = np.repeat(np.arange(len(part_of)), np.diff(indptr))
    pi, pj = part_of[rows], part_of[indices]
    cross = pi != pj
    ci, cj, pi, pj = rows[cross], indices[cross], pi[cross], pj[cross]
    subs = []
    for p in range(n_parts):
        owned = np.nonzero(part_of == p)[0]
        mine = pi == p
        halo = np.unique(cj[mine])
        send, recv, send_l, recv_l = {}, {}, {}, {}
        for q in np.unique(pj[mine]).tolist():
            sel = mine & (pj == q)
            recv[q] = np.unique(cj[sel])
            send[q] = np.unique(ci[sel])
            recv_l[q] = np.searchsorted(halo, recv[q])
            send_l[q] = np.searchsorted(owned, send[q])
        subs.append(Subdomain(p, owned, halo, send, recv, send_l, recv_l))
    for s in subs:
        for q, ids in s.send.items():
            if not np.array_equal(ids, subs[q].recv.get(s.part, np.empty(0, dtype=np.int64))):
                raise ValueError(f"inconsistent schedules between parts {s.part} and {q}")
    return subs


def local_system(A: CsrMatrix, sub: Subdomain) -> tuple[CsrMatrix, CsrMatrix]:
    """Owned-row block (square) and halo coupling block of the global matrix."""
    m = A.to_scipy()
    if len(sub.owned) and sub.owned.max() >= m.shape[0]:
        raise IndexError("subdomain cell index outside matrix")
    if len(sub.halo) and sub.halo.max() >= m.shape[0]:
        raise IndexError("halo cell index outside matrix")
    rows = m[sub.owned, :]
    own = rows[:, sub.owned]
    coup = rows[:, sub.halo]
    if own.nnz + coup.nnz != rows.nnz:
        raise ValueError(f"part {sub.part}: matrix couples owned cells to cells outside the halo")
    return (CsrMatrix.from_scipy(own, symmetric=False, check=False),
            CsrMatrix.from_scipy(coup, check=False))


def reassemble(n: int, subs: list[Subdomain], blocks) -> sp.csr_matrix:
    """Inverse of :func:`local_system` over all parts."""
    r, c, v = [], [], []
    for s, (own, coup) in zip(subs, blocks):
        o = own.to_scipy().tocoo()
        r.append(s.owned[o.row]); c.append(s.owned[o.col]); v.append(o.data)
        h = coup.to_scipy().tocoo()
        r.append(s.owned[h.row]); c.append(s.halo[h.col]); v.append(h.data)
    out = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n))
    out.sum_duplicates()
    out.sort_indices()
    return out
