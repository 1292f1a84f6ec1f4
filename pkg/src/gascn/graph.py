"""Directed kNN neighbourhood graphs with self-loops, stored in CSR layout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_points, knn_search


@dataclass(frozen=True)
class NeighborGraph:
    """Edges grouped by destination node.

    Incoming edges of node ``i`` are ``src[offsets[i]:offsets[i + 1]]``; the
    first entry of every segment is the self-loop, followed by the ``k``
    nearest neighbours ordered by distance.
    """

    n_nodes: int
    offsets: np.ndarray
    src: np.ndarray
    k: int

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def dest(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes), np.diff(self.offsets))

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dest.tolist()))

    def in_degree(self) -> np.ndarray:
        return np.diff(self.offsets)


def build_knn_graph(cloud, k: int) -> NeighborGraph:
    """Each node receives edges from its ``k`` nearest other points and itself."""
    pts = as_points(cloud)
    m = pts.shape[0]
    if not 0 <= k < m:
        raise ValueError(f"k={k} must be smaller than the number of points ({m})")
    if k == 0:
        nbrs = np.empty((m, 0), dtype=np.intp)
    else:
        cand = knn_search(pts, pts, k + 1)
        # Drop each node's own index; with duplicates it may not be in column 0.
        is_self = cand == np.arange(m)[:, None]
        missing = ~is_self.any(axis=1)
        is_self[missing, -1] = True
        nbrs = cand[~is_self].reshape(m, k)
    src = np.concatenate([np.arange(m)[:, None], nbrs], axis=1).reshape(-1)
    offsets = np.arange(0, (k + 1) * (m + 1), k + 1, dtype=np.intp)
    return NeighborGraph(m, offsets, np.ascontiguousarray(src, dtype=np.intp), k)


def gcn_coefficients(g: NeighborGraph) -> np.ndarray:
    """Symmetric normalisation ``1/sqrt(deg(dst) * deg(src))`` for every edge.

    Degrees count incoming edges, self-loop included.
    """
    deg = g.in_degree().astype(np.float64)
    if np.any(deg == 0):
        raise ValueError("every node needs a self-loop before GCN normalisation")
    return 1.0 / np.sqrt(deg[g.dest] * deg[g.src])
