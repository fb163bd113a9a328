import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from hetkrylov.mesh import BoundarySpec, StructuredMesh, assemble_laplacian
from hetkrylov.partition import (
    PartitionPlan,
    build_subdomains,
    edge_cut,
    largest_remainder,
    local_system,
    partition_weighted,
    reassemble,
)
from hetkrylov.sparse_core import CsrMatrix


def path_graph(n):
    return StructuredMesh(n, 1, 1)


class TestLargestRemainder:
    def test_thirds(self):
        np.testing.assert_array_equal(largest_remainder(10, [1 / 3] * 3), [4, 3, 3])

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(1, 10**6), w=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20))
    def test_sums(self, n, w):
        c = largest_remainder(n, w)
        assert c.sum() == n
        raw = n * np.array(w) / sum(w)
        assert np.all(np.abs(c - raw) < 1.0 + 1e-9)


class TestPartitionWeighted:
    def test_path_even(self):
        plan = partition_weighted(path_graph(16), [0.5, 0.5])
        np.testing.assert_array_equal(plan.achieved_sizes, [8, 8])
        assert plan.edge_cut == 1

    def test_path_weighted(self):
        plan = partition_weighted(path_graph(16), [0.75, 0.25])
        np.testing.assert_array_equal(plan.achieved_sizes, [12, 4])

    @pytest.mark.parametrize("n", [2, 3, 7, 30])
    def test_path_bisection_cut(self, n):
        assert partition_weighted(path_graph(n), [0.5, 0.5]).edge_cut <= 1

    @settings(max_examples=25, deadline=None)
    @given(
        dims=st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
        w=st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6),
    )
    def test_weight_fidelity(self, dims, w):
        m = StructuredMesh(*dims)
        f = np.array(w) / sum(w)
        plan = partition_weighted(m, f)
        N = m.n_cells
        assert plan.achieved_sizes.sum() == N
        assert np.all(np.abs(plan.achieved_sizes - N * f) <= max(1, 0.02 * N))
        assert set(np.unique(plan.part_of)) <= set(range(len(f)))
        nonempty = N * f >= 1
        assert np.all(plan.achieved_sizes[nonempty] > 0)

    def test_deterministic(self):
        m = StructuredMesh(9, 7, 5)
        a = partition_weighted(m, [0.2, 0.3, 0.5])
        b = partition_weighted(m, [0.2, 0.3, 0.5])
        np.testing.assert_array_equal(a.part_of, b.part_of)

    def test_matrix_input_matches_mesh(self):
        m = StructuredMesh(6, 5, 4)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        a = partition_weighted(m, [0.5, 0.5])
        b = partition_weighted(A, [0.5, 0.5])
        np.testing.assert_array_equal(a.part_of, b.part_of)

    def test_matrix_input_left_intact(self):
        m = StructuredMesh(4, 4, 4)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        before = A.to_dense().copy()
        partition_weighted(A, [0.5, 0.5])
        np.testing.assert_array_equal(A.to_dense(), before)

    def test_sixteen_even_parts(self):
        m = StructuredMesh.cube(32)
        plan = partition_weighted(m, np.full(16, 1 / 16))
        N = m.n_cells
        assert np.all(np.abs(plan.achieved_sizes - N / 16) <= 0.02 * N / 16)

    def test_two_dominant_parts(self):
        # 16 slow cores and 2 fast devices
        speeds = np.r_[np.full(2, 12.0), np.full(16, 1.0)]
        plan = partition_weighted(StructuredMesh.cube(24), speeds / speeds.sum())
        order = np.argsort(-plan.achieved_sizes)
        assert set(order[:2]) == {0, 1}
        assert plan.achieved_sizes[1] > 5 * plan.achieved_sizes[2:].max()

    @pytest.mark.parametrize("bad", [[], [0.5, 0.6], [1.5, -0.5]])
    def test_bad_fractions(self, bad):
        with pytest.raises(ValueError):
            partition_weighted(path_graph(4), bad)

    def test_empty_graph(self):
        with pytest.raises(ValueError, match="empty"):
            partition_weighted((np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)), [1.0])

    def test_csv_roundtrip(self, tmp_path):
        m = StructuredMesh(4, 3, 2)
        plan = partition_weighted(m, [0.5, 0.25, 0.25])
        plan.to_csv(tmp_path / "p.csv")
        np.testing.assert_array_equal(PartitionPlan.read_csv(tmp_path / "p.csv"), plan.part_of)
        again = PartitionPlan.from_assignment(m, plan.part_of)
        assert again.edge_cut == plan.edge_cut == edge_cut(m, plan.part_of)


class TestSubdomains:
    def test_single_part(self):
        m = StructuredMesh.cube(3)
        (s,) = build_subdomains(m, np.zeros(m.n_cells, dtype=np.int64))
        assert s.n_owned == 27 and s.n_halo == 0 and not s.send and not s.recv

    def test_two_cells(self):
        subs = build_subdomains(StructuredMesh(2, 1, 1), np.array([0, 1]))
        for s in subs:
            assert s.n_owned == 1 and s.n_halo == 1
        np.testing.assert_array_equal(subs[0].halo, [1])
        np.testing.assert_array_equal(subs[1].halo, [0])

    def test_half_split_face_layer(self):
        m = StructuredMesh.cube(4)
        i, _, _ = m.ijk()
        subs = build_subdomains(m, (i >= 2).astype(np.int64))
        assert subs[0].n_halo == 16 and subs[1].n_halo == 16
        np.testing.assert_array_equal(np.unique(i[subs[0].halo]), [2])
        np.testing.assert_array_equal(np.unique(i[subs[1].halo]), [1])

    def test_schedules_pair_up(self):
        m = StructuredMesh(6, 5, 4)
        plan = partition_weighted(m, [0.1, 0.2, 0.3, 0.4])
        subs = build_subdomains(m, plan)
        for s in subs:
            for q in s.neighbors:
                np.testing.assert_array_equal(s.recv[q], subs[q].send[s.part])
                np.testing.assert_array_equal(s.owned[s.send_local[q]], s.send[q])
                np.testing.assert_array_equal(s.halo[s.recv_local[q]], s.recv[q])
            # halo is exactly the foreign neighbours of owned cells
            indptr, indices = m.adjacency()
            nb = np.unique(np.concatenate([indices[indptr[c]:indptr[c + 1]] for c in s.owned]))
            np.testing.assert_array_equal(s.halo, nb[plan.part_of[nb] != s.part])

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="plan covers"):
            build_subdomains(StructuredMesh.cube(2), np.zeros(7, dtype=np.int64))


class TestLocalSystem:
    def test_single_part_is_global(self):
        m = StructuredMesh.cube(3)
        A, _ = assemble_laplacian(m, BoundarySpec.uniform(0.0))
        (s,) = build_subdomains(m, np.zeros(m.n_cells, dtype=np.int64))
        own, coup = local_system(A, s)
        np.testing.assert_array_equal(own.to_dense(), A.to_dense())
        assert coup.nnz == 0

    def test_two_cell_chain(self):
        A = CsrMatrix.from_dense([[2.0, -1.0], [-1.0, 2.0]])
        subs = build_subdomains(A, np.array([0, 1]))
        for s in subs:
            own, coup = local_system(A, s)
            np.testing.assert_array_equal(own.to_dense(), [[2.0]])
            np.testing.assert_array_equal(coup.to_dense(), [[-1.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_random_spd_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        B = sp.random(16, 16, density=0.2, random_state=rng)
        A = CsrMatrix.from_scipy(B @ B.T + 16 * sp.identity(16), symmetric=False)
        part = rng.integers(0, 4, 16)
        part[:4] = np.arange(4)
        subs = build_subdomains(A, part)
        blocks = [local_system(A, s) for s in subs]
        np.testing.assert_array_equal(reassemble(16, subs, blocks).toarray(), A.to_dense())

    def test_index_out_of_range(self):
        A = CsrMatrix.identity(3)
        (s,) = build_subdomains(CsrMatrix.identity(5), np.zeros(5, dtype=np.int64))
        with pytest.raises(IndexError):
            local_system(A, s)
