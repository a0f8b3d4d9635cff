"""Dynamic k-nearest-neighbour wiring over patch embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

# elements per pairwise-difference chunk
_CHUNK = 1 << 24


@dataclass(frozen=True)
class PatchGraph:
    """Directed graph where row ``i`` of ``neighbors`` lists node i's out-edges.

    ``distances`` (same shape) carries the squared distance of every edge when
    the graph came out of :func:`knn_graph`.
    """

    num_nodes: int
    k: int
    neighbors: np.ndarray
    distances: Optional[np.ndarray] = None

    def __post_init__(self):
        nb = self.neighbors
        if nb.shape != (self.num_nodes, self.k):
            raise DimensionError(f"neighbor table shape {nb.shape} != ({self.num_nodes}, {self.k})")
        if nb.size:
            if nb.min() < 0 or nb.max() >= self.num_nodes:
                raise ConfigurationError("neighbor index out of range")
            if np.any(nb == np.arange(self.num_nodes)[:, None]):
                raise ConfigurationError("self-loop in neighbor table")

    def edges(self):
        """Yield ``(i, j, rank, distance)`` for every directed edge."""
        for i in range(self.num_nodes):
            for r in range(self.k):
                d = float(self.distances[i, r]) if self.distances is not None else float("nan")
                yield i, int(self.neighbors[i, r]), r, d


def _batched_sq_dist(X: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances for every pair of rows, per leading batch."""
    B, N, D = X.shape
    out = np.empty((B, N, N), dtype=X.dtype)
    rows = max(1, _CHUNK // max(1, N * D))
    for b in range(B):
        xb = X[b]
        for start in range(0, N, rows):
            stop = min(N, start + rows)
            diff = xb[start:stop, None, :] - xb[None, :, :]
            out[b, start:stop] = (diff * diff).sum(axis=-1)
    return out


def pairwise_sq_dist(X) -> Tensor:
    """[N, N] squared distances between the rows of ``X`` (not differentiable).

    Computed from explicit differences, so the result is exactly symmetric
    with an exactly zero diagonal.
    """
    data = X.data if isinstance(X, Tensor) else np.asarray(X)
    if data.ndim != 2:
        raise DimensionError(f"pairwise_sq_dist expects [N, D], got {data.shape}")
    return Tensor(_batched_sq_dist(data[None])[0], dtype=data.dtype)


def knn_neighbors(X: np.ndarray, k: int):
    """Batched neighbour selection on [B, N, D] embeddings.

    Returns ``(neighbors, distances)``, both [B, N, k]. Neighbours are sorted
    by (distance, index); the node itself is never selected.
    """
    if X.ndim != 3:
        raise DimensionError(f"knn_neighbors expects [B, N, D], got {X.shape}")
    B, N, _ = X.shape
    if k >= N:
        raise ConfigurationError(f"k={k} needs at least k+1={k + 1} nodes, graph has {N}")
    if k < 0:
        raise ConfigurationError(f"k must be non-negative, got {k}")
    if k == 0:
        empty = np.zeros((B, N, 0), dtype=np.int64)
        return empty, np.zeros((B, N, 0), dtype=X.dtype)
    dist = _batched_sq_dist(X)
    order = np.argsort(dist, axis=-1, kind="stable")
    not_self = order != np.arange(N)[None, :, None]
    order = order[not_self].reshape(B, N, N - 1)[..., :k]
    return order.astype(np.int64), np.take_along_axis(dist, order, axis=-1)


def knn_graph(X, k: int) -> PatchGraph:
    """Wire each row of ``X`` [N, D] to its ``k`` nearest other rows."""
    data = X.data if isinstance(X, Tensor) else np.asarray(X)
    if data.ndim != 2:
        raise DimensionError(f"knn_graph expects [N, D], got {data.shape}")
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    nb, dist = knn_neighbors(data[None], k)
    return PatchGraph(data.shape[0], k, nb[0], dist[0])
