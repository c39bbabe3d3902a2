"""Spatial feature graphs and recursive nearest agglomeration (ReNA).

ReNA clusters the *features* (pixels, voxels) of a sample matrix. Each round
every cluster links to its closest graph neighbour, the connected components
of those links are merged and the graph is contracted. Every round at least
halves the number of clusters, so reaching ``k`` clusters takes
O(log(p/k)) rounds of O(r * edges) work.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from featgroup.numkit import SparseGrouping, as_dense

__all__ = [
    "FeatureGraph",
    "Partition",
    "grid_adjacency",
    "graph_from_edges",
    "rena_cluster",
    "partition_to_phi",
    "default_k",
    "save_partition",
    "load_partition",
]


@dataclass(frozen=True, eq=False)
class FeatureGraph:
    """Undirected graph over ``p`` features.

    ``edges`` is an ``(E, 2)`` int array with ``edges[:, 0] < edges[:, 1]``,
    sorted lexicographically and free of duplicates. ``dims`` is the grid
    shape when the graph came from :func:`grid_adjacency`.
    """

    p: int
    edges: np.ndarray
    dims: tuple[int, ...] | None = None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def n_components(self) -> int:
        return connected_components(self.adjacency(), directed=False)[0]

    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.p, self.p))


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(edges, axis=1)
    return np.unique(e, axis=0)


def graph_from_edges(p: int, edges) -> FeatureGraph:
    """Build a graph from an explicit edge list (either orientation accepted)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if p < 1:
        raise ValueError("p must be >= 1")
    if len(e) and (e.min() < 0 or e.max() >= p):
        raise ValueError("edge endpoint out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise ValueError("self-loops are not allowed")
    return FeatureGraph(p, _canonical_edges(e))


def grid_adjacency(dims) -> FeatureGraph:
    """Nearest-neighbour lattice on a 1D, 2D or 3D grid (row-major feature order).

    >>> grid_adjacency((2, 2)).edges.tolist()
    [[0, 1], [0, 2], [1, 3], [2, 3]]
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if not 1 <= len(dims) <= 3:
        raise ValueError(f"grid must be 1D, 2D or 3D, got {len(dims)} dims")
    if any(d < 1 for d in dims):
        raise ValueError(f"grid dims must be >= 1, got {dims}")
    idx = np.arange(math.prod(dims)).reshape(dims)
    parts = []
    for axis in range(len(dims)):
        lo = [slice(None)] * len(dims)
        hi = [slice(None)] * len(dims)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        parts.append(np.stack([idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()], axis=1))
    edges = _canonical_edges(np.concatenate(parts))
    return FeatureGraph(idx.size, edges, dims)


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of ``p`` features to ``k`` nonempty, disjoint clusters."""

    k: int
    assign: np.ndarray

    def __post_init__(self):
        a = np.array(self.assign, dtype=np.int64)
        k = int(self.k)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("assign must be a nonempty 1D array")
        if a.min() < 0 or a.max() >= k:
            raise ValueError("cluster id out of range")
        if np.any(np.bincount(a, minlength=k) == 0):
            raise ValueError("empty cluster in partition")
        a.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "assign", a)

    @property
    def p(self) -> int:
        return self.assign.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.k)

    def clusters(self) -> list[np.ndarray]:
        order = np.argsort(self.assign, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    @classmethod
    def from_clusters(cls, clusters, p: int | None = None) -> "Partition":
        """Build from a list of index collections (0-based)."""
        if p is None:
            p = sum(len(c) for c in clusters)
        assign = np.full(p, -1, dtype=np.int64)
        for q, members in enumerate(clusters):
            members = np.asarray(list(members), dtype=np.int64)
            if np.any(assign[members] != -1):
                raise ValueError("clusters overlap")
            assign[members] = q
        if np.any(assign < 0):
            raise ValueError("clusters do not cover all features")
        return cls(len(clusters), assign)

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assign, other.assign)

    __hash__ = None


def _relabel_by_first_occurrence(labels: np.ndarray) -> tuple[np.ndarray, int]:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse], len(first)


def _nearest_neighbors(profiles, edges, rng=None):
    """For each cluster, its most similar neighbour and the squared distance.

    Ties go to the smaller neighbour id, or are shuffled when ``rng`` is given.
    Clusters without neighbours get ``-1``.
    """
    q = profiles.shape[0]
    u = np.concatenate([edges[:, 0], edges[:, 1]])
    v = np.concatenate([edges[:, 1], edges[:, 0]])
    diff = profiles[edges[:, 0]] - profiles[edges[:, 1]]
    d = np.einsum("ij,ij->i", diff, diff)
    d = np.concatenate([d, d])
    tiebreak = v if rng is None else rng.permutation(len(v))
    order = np.lexsort((tiebreak, d, u))
    u_sorted = u[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = u_sorted[1:] != u_sorted[:-1]
    best = order[first]
    nn = np.full(q, -1, dtype=np.int64)
    dist = np.full(q, np.inf)
    nn[u[best]] = v[best]
    dist[u[best]] = d[best]
    return nn, dist


def _merge_exactly(n_nodes, src, dst, dist, target):
    """Union the links in ascending-distance order until ``target`` groups remain."""
    parent = np.arange(n_nodes)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    count = n_nodes
    for e in np.lexsort((np.minimum(src, dst), dist)):
        if count == target:
            break
        a, b = find(src[e]), find(dst[e])
        if a != b:
            parent[max(a, b)] = min(a, b)
            count -= 1
    return np.array([find(i) for i in range(n_nodes)])


def rena_cluster(samples, graph: FeatureGraph, k: int, rng=None, random_ties: bool = False) -> Partition:
    """Cluster the features of ``samples`` (r x p) into exactly ``k`` connected groups.

    Parameters
    ----------
    samples : array (r, p)
        Feature profiles are the columns.
    graph : FeatureGraph
        Only graph neighbours may be merged, so every cluster is connected.
    k : int
        Number of clusters to return.
    rng : numpy Generator, optional
        Only consulted with ``random_ties=True``; ties are otherwise broken
        by the smaller cluster id and the result is deterministic.
    """
    X = as_dense(samples, 2, "samples")
    r, p = X.shape
    if r < 1:
        raise ValueError("need at least one sample")
    if p != graph.p:
        raise ValueError(f"samples have {p} features but graph has {graph.p} nodes")
    k = int(k)
    if not 1 <= k <= p:
        raise ValueError(f"need 1 <= k <= p, got k={k}, p={p}")
    n_comp = graph.n_components()
    if k < n_comp:
        raise ValueError(f"k={k} is below the number of connected components ({n_comp})")
    if random_ties and rng is None:
        raise ValueError("random_ties requires an rng")
    tie_rng = rng if random_ties else None

    labels = np.arange(p)
    profiles = X.T.copy()  # (clusters, r)
    sizes = np.ones(p)
    edges = graph.edges
    q = p
    while q > k:
        nn, dist = _nearest_neighbors(profiles, edges, tie_rng)
        has = nn >= 0
        src = np.flatnonzero(has)
        dst = nn[has]
        link = sparse.csr_matrix((np.ones(len(src)), (src, dst)), shape=(q, q))
        n_new, comp = connected_components(link, directed=True, connection="weak")
        if n_new < k:
            comp = _merge_exactly(q, src, dst, dist[has], k)
        comp, n_new = _relabel_by_first_occurrence(comp)
        if n_new == q:  # nothing merges; guarded by the component check above
            raise RuntimeError("agglomeration stalled")

        weighted = np.zeros((n_new, r))
        np.add.at(weighted, comp, profiles * sizes[:, None])
        sizes = np.bincount(comp, weights=sizes, minlength=n_new)
        profiles = weighted / sizes[:, None]
        labels = comp[labels]
        e = comp[edges]
        edges = _canonical_edges(e[e[:, 0] != e[:, 1]])
        q = n_new

    labels, _ = _relabel_by_first_occurrence(labels)
    return Partition(k, labels)


def partition_to_phi(part: Partition) -> SparseGrouping:
    """Grouping matrix with ``1/sqrt(|C_q|)`` on the members of cluster ``q``."""
    vals = 1.0 / np.sqrt(part.sizes.astype(np.float64))
    return SparseGrouping(part.k, part.p, part.assign, vals[part.assign])


def default_k(p: int) -> int:
    """20% of the features, rounded and clamped to ``[1, p]``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return int(min(max(round(0.2 * p), 1), p))


def save_partition(part: Partition, path) -> None:
    lines = [f"{part.p},{part.k}"]
    lines.extend(f"{j},{c}" for j, c in enumerate(part.assign.tolist()))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_partition(path: str | os.PathLike) -> Partition:
    with open(path, encoding="utf-8") as fh:
        rows = [ln.strip() for ln in fh if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: empty partition file")
    try:
        p, k = (int(t) for t in rows[0].split(","))
    except ValueError:
        raise ValueError(f"{path}: bad header {rows[0]!r}, expected 'p,k'") from None
    if len(rows) - 1 != p:
        raise ValueError(f"{path}: header says p={p} but found {len(rows) - 1} feature lines")
    assign = np.full(p, -1, dtype=np.int64)
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            j, c = (int(t) for t in row.split(","))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'feature_index,cluster_id'") from None
        if not 0 <= j < p or assign[j] != -1:
            raise ValueError(f"{path}:{lineno}: bad or repeated feature index {j}")
        assign[j] = c
    return Partition(k, assign)
