import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from graphrd import (GraphError, build_graph, dirichlet_energy, laplacian_apply,
                     normalized_laplacian)


def p2():
    return build_graph(2, [(0, 1)])


def k3():
    return build_graph(3, [(0, 1), (1, 2), (0, 2)])


def random_graph(n, density, seed):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < density]
    return build_graph(n, pairs)


class TestBuildGraph:
    def test_single_edge(self):
        g = p2()
        assert g.n == 2
        assert g.edges.shape == (2, 2)
        assert g.degree.tolist() == [1, 1]

    def test_triangle_symmetry(self):
        g = k3()
        assert g.degree.tolist() == [2, 2, 2]
        assert g.edges.shape == (6, 2)
        # every directed pair has its reverse
        pairs = {tuple(e) for e in g.edges}
        assert all((j, i) in pairs for i, j in pairs)

    def test_duplicates_merged(self):
        g = build_graph(3, [(0, 1), (1, 0), (0, 1)])
        assert g.edges.shape == (2, 2)
        assert g.degree.tolist() == [1, 1, 0]

    def test_citation_scale_counts(self):
        # 2708 nodes / 5429 undirected edges gives 10858 directed pairs
        rng = np.random.default_rng(0)
        seen = set()
        while len(seen) < 5429:
            i, j = rng.integers(0, 2708, 2)
            if i != j:
                seen.add((min(i, j), max(i, j)))
        g = build_graph(2708, sorted(seen))
        assert g.edges.shape[0] == 10858
        assert g.num_undirected_edges == 5429

    @pytest.mark.parametrize("n,edges", [
        (0, []),
        (2, [(0, 2)]),
        (2, [(-1, 0)]),
        (3, [(1, 1)]),
    ])
    def test_rejects_bad_input(self, n, edges):
        with pytest.raises(GraphError):
            build_graph(n, edges)


class TestNormalizedLaplacian:
    def test_path_two_nodes(self):
        lap = normalized_laplacian(p2())
        assert_allclose(lap.dense(), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-12)

    def test_triangle_values_and_spectrum(self):
        lap = normalized_laplacian(k3())
        dense = lap.dense()
        assert_allclose(np.diag(dense), 2.0 / 3.0, atol=1e-12)
        off = dense[~np.eye(3, dtype=bool)]
        assert_allclose(off, -1.0 / 3.0, atol=1e-12)
        eigs = np.sort(np.linalg.eigvalsh(dense))
        assert_allclose(eigs, [0.0, 1.0, 1.0], atol=1e-12)

    def test_isolated_node_row_is_zero(self):
        lap = normalized_laplacian(build_graph(1, []))
        assert_allclose(lap.dense(), [[0.0]], atol=1e-15)

    def test_null_vector(self):
        # Lhat (Dt^{1/2} 1) = 0 for connected graphs
        g = build_graph(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)])
        lap = normalized_laplacian(g)
        v = np.sqrt(1.0 + g.degree)
        assert_allclose(lap.csr @ v, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric_psd_spectrum_in_range(self, seed):
        g = random_graph(n=12 + seed, density=0.3, seed=seed)
        dense = normalized_laplacian(g).dense()
        assert_allclose(dense, dense.T, atol=1e-12)
        eigs = np.linalg.eigvalsh(dense)
        assert eigs.min() >= -1e-12
        assert eigs.max() <= 2.0 + 1e-12


class TestLaplacianApply:
    def test_path_vector(self):
        lap = normalized_laplacian(p2())
        assert_allclose(laplacian_apply(lap, np.array([1.0, 0.0])), [0.5, -0.5], atol=1e-15)

    def test_null_space(self):
        g = k3()
        lap = normalized_laplacian(g)
        v = np.sqrt(1.0 + g.degree)
        assert_allclose(laplacian_apply(lap, v), 0.0, atol=1e-12)

    def test_matches_dense(self):
        rng = np.random.default_rng(1)
        for seed in range(4):
            g = random_graph(10, 0.4, seed)
            lap = normalized_laplacian(g)
            U = rng.standard_normal((10, 3))
            assert_allclose(laplacian_apply(lap, U), lap.dense() @ U, atol=1e-12)

    def test_identity_columns_triangle(self):
        lap = normalized_laplacian(k3())
        assert_allclose(laplacian_apply(lap, np.eye(3)), lap.dense(), atol=1e-12)

    def test_dimension_mismatch(self):
        lap = normalized_laplacian(p2())
        with pytest.raises(GraphError):
            laplacian_apply(lap, np.ones((3, 1)))


def brute_force_energy(g, U):
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] != g.n:
        U = U.T
    total = 0.0
    pairs = {tuple(e) for e in g.edges}
    for i, j in pairs:
        di = np.sqrt(1.0 + g.degree[i])
        dj = np.sqrt(1.0 + g.degree[j])
        total += 0.5 * float(np.sum((U[i] / di - U[j] / dj) ** 2))
    return total


class TestDirichletEnergy:
    def test_equal_rows_equal_degrees(self):
        assert dirichlet_energy(p2(), np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-15)

    def test_path_opposite_signs(self):
        assert dirichlet_energy(p2(), np.array([1.0, -1.0])) == pytest.approx(2.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        U = rng.standard_normal((3, 4))
        g = k3()
        assert dirichlet_energy(g, U) == pytest.approx(brute_force_energy(g, U), abs=1e-10)

    def test_quadratic_form_identity(self):
        # E(U) equals trace(U^T Lhat U)
        rng = np.random.default_rng(3)
        for seed in range(5):
            g = random_graph(9, 0.35, seed)
            lap = normalized_laplacian(g)
            U = rng.standard_normal((9, 2))
            quad = float(np.trace(U.T @ (lap.csr @ U)))
            assert dirichlet_energy(g, U) == pytest.approx(quad, abs=1e-10)

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        g = random_graph(8, 0.5, 2)
        for _ in range(10):
            assert dirichlet_energy(g, rng.standard_normal((8, 3))) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(GraphError):
            dirichlet_energy(p2(), np.ones((3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.data())
def test_graph_invariants(n, data):
    pairs = data.draw(st.lists(
        st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda p: p[0] != p[1]),
        max_size=20))
    g = build_graph(n, pairs)
    # symmetric directed list, no duplicates, degrees consistent
    tuples = [tuple(e) for e in g.edges]
    assert len(tuples) == len(set(tuples))
    assert all((j, i) in set(tuples) for i, j in tuples)
    assert g.degree.sum() == g.edges.shape[0]
    assert np.array_equal(np.bincount(g.edges[:, 0], minlength=n), g.degree)
