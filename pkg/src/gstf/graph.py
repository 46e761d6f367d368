"""Road graph construction: adjacency, hop distances, attention mask and
Laplacian eigenvector embeddings."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

TRIVIAL_EIGENVALUE = 1e-9


@dataclass(frozen=True)
class RoadGraph:
    """Undirected sensor graph with binary symmetric adjacency."""

    n_sensors: int
    edges: tuple
    adjacency: np.ndarray = field(repr=False)

    @property
    def hop_distance(self):
        return hop_distances(self)

    def permuted(self, perm):
        """Relabel sensors so that new sensor ``k`` is old sensor ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        edges = sorted(tuple(sorted((int(inv[i]), int(inv[j])))) for i, j in self.edges)
        return load_graph(edges, self.n_sensors)


@dataclass(frozen=True)
class HopMask:
    """Boolean ``N x N`` matrix; ``True`` forbids attention between the pair."""

    threshold: int
    mask: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SpatialEmbedding:
    """``k`` non-trivial normalized-Laplacian eigenvectors as ``N x k`` columns."""

    k: int
    vectors: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray


def load_graph(edge_list, n_sensors):
    """Build a :class:`RoadGraph` from ``(i, j)`` or ``(i, j, cost)`` tuples.

    Direction and cost are dropped, duplicates and self-loops removed.
    """
    n = int(n_sensors)
    if n < 1:
        raise ValueError(f"n_sensors must be positive, got {n_sensors}")
    adj = np.zeros((n, n), dtype=np.int8)
    for row in edge_list:
        i, j = int(row[0]), int(row[1])
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) has a sensor id outside [0, {n})")
        if i == j:
            continue
        adj[i, j] = adj[j, i] = 1
    if not adj.any():
        logger.warning("graph has no edges; adjacency is all zero")
    iu, ju = np.nonzero(np.triu(adj))
    edges = tuple(zip(iu.tolist(), ju.tolist()))
    return RoadGraph(n, edges, adj)


def read_edge_csv(path, n_sensors=None):
    """Read a ``from,to[,cost]`` edge list; ``n_sensors`` defaults to max id + 1."""
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected at least 2 columns, got {len(row)}")
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer sensor id in {row!r}") from exc
    if n_sensors is None:
        n_sensors = 1 + max((max(p) for p in pairs), default=0)
    return load_graph(pairs, n_sensors)


def write_edge_csv(path, graph):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "cost"])
        for i, j in graph.edges:
            w.writerow([i, j, 1])


def hop_distances(graph):
    """Unweighted shortest-path lengths by BFS from every sensor (``inf`` if unreachable)."""
    n = graph.n_sensors
    neighbours = [np.flatnonzero(graph.adjacency[i]) for i in range(n)]
    dist = np.full((n, n), np.inf)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if dist[src, v] == np.inf:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


def build_mask(graph, threshold=2, hops=None):
    if threshold < 0:
        raise ValueError(f"hop threshold must be non-negative, got {threshold}")
    if hops is None:
        hops = hop_distances(graph)
    mask = hops > threshold
    np.fill_diagonal(mask, False)
    return HopMask(int(threshold), mask)


def connected_components(graph):
    hops = hop_distances(graph)
    labels = -np.ones(graph.n_sensors, dtype=int)
    count = 0
    for i in range(graph.n_sensors):
        if labels[i] < 0:
            labels[np.isfinite(hops[i])] = count
            count += 1
    return count, labels


def normalized_laplacian(adjacency):
    """``I - D^-1/2 A D^-1/2``; isolated sensors get an all-zero row and column."""
    a = np.asarray(adjacency, dtype=np.float64)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    lap = np.diag((deg > 0).astype(np.float64)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return lap


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a dense symmetric matrix by cyclic Jacobi rotations.

    Iterates until the Frobenius norm of the off-diagonal part drops below
    ``tol``. Returns ``(eigenvalues, eigenvectors)`` sorted ascending, with
    eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    else:
        raise RuntimeError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def fix_signs(vectors):
    """Flip each column so its largest-magnitude entry is positive (ties: lowest index)."""
    vectors = np.array(vectors, dtype=np.float64)
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        top = np.max(np.abs(col))
        lead = np.flatnonzero(np.abs(col) >= top - 1e-12)[0]
        if col[lead] < 0:
            vectors[:, j] = -col
    return vectors


def laplacian_embedding(graph, k=8):
    if graph.adjacency.sum() == 0:
        raise ValueError("laplacian embedding needs a graph with at least one edge")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    n_comp, _ = connected_components(graph)
    available = graph.n_sensors - n_comp
    if k > available:
        raise ValueError(
            f"requested {k} eigenvectors but the graph ({graph.n_sensors} sensors, "
            f"{n_comp} components) has only {available} non-trivial ones"
        )
    w, v = jacobi_eigh(normalized_laplacian(graph.adjacency))
    keep = np.flatnonzero(w > TRIVIAL_EIGENVALUE)[:k]
    return SpatialEmbedding(k, fix_signs(v[:, keep]), w[keep])
