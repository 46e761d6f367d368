import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gstf.graph import (
    build_mask,
    connected_components,
    fix_signs,
    hop_distances,
    jacobi_eigh,
    laplacian_embedding,
    load_graph,
    normalized_laplacian,
    read_edge_csv,
    write_edge_csv,
)

from _oracles import floyd_warshall, random_graph_edges


@st.composite
def graphs(draw, max_nodes=15):
    n = draw(st.integers(1, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), max_size=3 * n, unique=True)) if pairs else []
    return load_graph(chosen, n)


def test_single_edge_adjacency():
    g = load_graph([(0, 1)], 2)
    np.testing.assert_array_equal(g.adjacency, [[0, 1], [1, 0]])


def test_duplicate_and_reversed_edges_collapse():
    a = load_graph([(0, 1), (1, 0), (0, 1, 5.0)], 2)
    np.testing.assert_array_equal(a.adjacency, load_graph([(0, 1)], 2).adjacency)
    assert a.edges == ((0, 1),)


def test_self_loops_dropped():
    assert load_graph([(1, 1), (0, 1)], 3).adjacency.trace() == 0


def test_out_of_range_id():
    with pytest.raises(ValueError, match="outside"):
        load_graph([(0, 3)], 3)


def test_empty_edge_set_warns(caplog):
    with caplog.at_level(logging.WARNING):
        g = load_graph([], 3)
    assert not g.adjacency.any()
    assert "no edges" in caplog.text


def test_pems_style_csv(tmp_path):
    rows = [(0, 1, 392.0), (1, 2, 123.1), (2, 3, 40.5), (3, 4, 88.0), (4, 5, 10.0),
            (5, 6, 301.7), (6, 7, 55.5), (7, 8, 12.0), (8, 9, 17.3), (9, 0, 250.0)]
    path = tmp_path / "distance.csv"
    path.write_text("from,to,cost\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
    g = read_edge_csv(path)
    assert g.n_sensors == 10
    assert len(g.edges) == 10
    assert g.adjacency.sum() == 20


def test_edge_csv_errors_carry_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("from,to\n0,1\n1,x\n")
    with pytest.raises(ValueError, match=r"bad\.csv:3"):
        read_edge_csv(path)


def test_edge_csv_round_trip(tmp_path, rng):
    g = load_graph(random_graph_edges(rng, 9, 0.3), 9)
    write_edge_csv(tmp_path / "e.csv", g)
    np.testing.assert_array_equal(read_edge_csv(tmp_path / "e.csv", 9).adjacency, g.adjacency)


def test_hop_examples():
    path = load_graph([(0, 1), (1, 2)], 3)
    assert hop_distances(path)[0, 2] == 2
    assert hop_distances(load_graph([], 2))[0, 1] == math.inf


def test_hops_match_floyd_warshall_on_12_nodes(rng):
    for _ in range(10):
        g = load_graph(random_graph_edges(rng, 12, 0.2), 12)
        np.testing.assert_array_equal(hop_distances(g), floyd_warshall(g.adjacency))


@settings(max_examples=80, deadline=None)
@given(graphs())
def test_hops_match_floyd_warshall_property(g):
    np.testing.assert_array_equal(hop_distances(g), floyd_warshall(g.adjacency))


def test_mask_examples():
    path = load_graph([(0, 1), (1, 2)], 3)
    m = build_mask(path, 1).mask
    expected = np.zeros((3, 3), bool)
    expected[0, 2] = expected[2, 0] = True
    np.testing.assert_array_equal(m, expected)
    assert not build_mask(path, 2).mask.any()
    assert not build_mask(path, 10).mask.any()


def test_mask_matches_oracle_threshold_two(rng):
    g = load_graph(random_graph_edges(rng, 12, 0.15), 12)
    fw = floyd_warshall(g.adjacency)
    m = build_mask(g, 2).mask
    for i in range(12):
        for j in range(12):
            assert m[i, j] == (i != j and fw[i, j] > 2)


def test_mask_rejects_negative_threshold():
    with pytest.raises(ValueError):
        build_mask(load_graph([(0, 1)], 2), -1)


@settings(max_examples=40, deadline=None)
@given(graphs(), st.integers(0, 4), st.randoms(use_true_random=False))
def test_mask_symmetric_and_permutation_covariant(g, threshold, rnd):
    m = build_mask(g, threshold).mask
    np.testing.assert_array_equal(m, m.T)
    perm = list(range(g.n_sensors))
    rnd.shuffle(perm)
    gp = g.permuted(perm)
    np.testing.assert_array_equal(hop_distances(gp), hop_distances(g)[np.ix_(perm, perm)])
    np.testing.assert_array_equal(build_mask(gp, threshold).mask, m[np.ix_(perm, perm)])


def test_connected_components():
    count, labels = connected_components(load_graph([(0, 1), (2, 3)], 5))
    assert count == 3
    assert labels[0] == labels[1] != labels[2] == labels[3] != labels[4]


# -- spectrum ------------------------------------------------------------------

def test_jacobi_matches_numpy_eigh(rng):
    for n in (1, 2, 5, 9):
        a = rng.standard_normal((n, n))
        a = a + a.T
        w, v = jacobi_eigh(a)
        w_ref = np.linalg.eigh(a)[0]
        np.testing.assert_allclose(w, w_ref, atol=1e-10)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-12)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(ValueError):
        jacobi_eigh([[1.0, 2.0], [0.0, 1.0]])


def test_two_node_embedding():
    emb = laplacian_embedding(load_graph([(0, 1)], 2), k=1)
    assert emb.eigenvalues[0] == pytest.approx(2.0, abs=1e-12)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(np.abs(emb.vectors[:, 0]), [r, r], atol=1e-12)
    assert emb.vectors[0, 0] == -emb.vectors[1, 0]
    # tie in magnitude: the lowest index carries the positive sign
    assert emb.vectors[0, 0] > 0


def test_complete_graph_eigenvalues():
    k4 = load_graph([(i, j) for i in range(4) for j in range(i + 1, 4)], 4)
    emb = laplacian_embedding(k4, k=3)
    np.testing.assert_allclose(emb.eigenvalues, 4 / 3, atol=1e-12)


def test_embedding_matches_numpy_on_distinct_spectrum(rng):
    g = load_graph([(i, i + 1) for i in range(7)] + [(0, 2), (3, 7)], 8)
    emb = laplacian_embedding(g, k=5)
    w, v = np.linalg.eigh(normalized_laplacian(g.adjacency))
    assert np.diff(w).min() > 1e-2
    np.testing.assert_allclose(emb.eigenvalues, w[1:6], atol=1e-10)
    np.testing.assert_allclose(emb.vectors, fix_signs(v[:, 1:6]), atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(graphs())
def test_embedding_eigenpairs_and_orthonormality(g):
    n_comp, _ = connected_components(g)
    k = g.n_sensors - n_comp
    if not g.adjacency.any() or k < 1:
        return
    emb = laplacian_embedding(g, k)
    lap = normalized_laplacian(g.adjacency)
    for j in range(k):
        v, lam = emb.vectors[:, j], emb.eigenvalues[j]
        assert np.max(np.abs(lap @ v - lam * v)) < 1e-8
        assert -1e-9 <= lam <= 2 + 1e-9
    assert np.max(np.abs(emb.vectors.T @ emb.vectors - np.eye(k))) < 1e-8
    for j in range(k):
        col = emb.vectors[:, j]
        lead = np.flatnonzero(np.abs(col) >= np.abs(col).max() - 1e-12)[0]
        assert col[lead] > 0


def test_embedding_errors():
    with pytest.raises(ValueError, match="edge"):
        laplacian_embedding(load_graph([], 3), 1)
    # path on 3 nodes: one component, two non-trivial vectors
    g = load_graph([(0, 1), (1, 2)], 3)
    assert laplacian_embedding(g, 2).vectors.shape == (3, 2)
    with pytest.raises(ValueError, match="non-trivial"):
        laplacian_embedding(g, 3)


def test_isolated_node_has_zero_laplacian_row():
    lap = normalized_laplacian(load_graph([(0, 1)], 3).adjacency)
    np.testing.assert_array_equal(lap[2], 0.0)
    np.testing.assert_array_equal(lap[:, 2], 0.0)
