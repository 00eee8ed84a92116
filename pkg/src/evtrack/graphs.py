"""Event-point downsampling, graph construction, and voxel-grid pooling.

Node positions are normalized to [0, 1]^3 as (x / W, y / H, t / T) so the
spatial and temporal axes are commensurate under the Euclidean metric.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream


@dataclass(frozen=True)
class EventGraph:
    """Undirected graph over downsampled event points.

    ``positions`` is (n, 3) with columns (x, y, t) normalized to [0, 1];
    ``features`` is (n, d) (initially d=1: the polarity); ``adjacency`` is a
    dense symmetric {0,1} matrix with a zero diagonal.
    """

    positions: np.ndarray
    features: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"features must be (n, d) with n={n}, got {self.features.shape}"
            )
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency must be ({n}, {n}), got {self.adjacency.shape}")
        if np.any(self.adjacency != self.adjacency.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(self.adjacency) != 0):
            raise ValueError("adjacency must have a zero diagonal")

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (m, 2) array with i < j."""
        return np.argwhere(np.triu(self.adjacency, k=1) > 0)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def downsample_uniform(stream: EventStream, n_max: int = 300) -> EventStream:
    """Keep at most n_max events at evenly spaced indices, preserving order."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    m = len(stream)
    if m <= n_max:
        return stream
    indices = (np.arange(n_max, dtype=np.int64) * m) // n_max
    return stream.take(indices)


def normalized_positions(stream: EventStream) -> np.ndarray:
    h, w = stream.sensor_size
    t_scale = max(stream.duration, 1)
    return np.stack([
        stream.xs / float(w),
        stream.ys / float(h),
        stream.ts / float(t_scale),
    ], axis=1)


def _polarity_features(stream: EventStream) -> np.ndarray:
    return stream.ps.astype(np.float32).reshape(-1, 1)


def _symmetrize(adj: np.ndarray) -> np.ndarray:
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0)
    return adj


def build_knn_graph(stream: EventStream, k: int = 8) -> EventGraph:
    """Symmetrized k-nearest-neighbor graph; distance ties break toward the
    lower original index."""
    if len(stream) < 1:
        raise ValueError("cannot build a graph from an empty stream")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pos = normalized_positions(stream)
    n = len(pos)
    diff = pos[:, None, :] - pos[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist2, np.inf)
    k_eff = min(k, n - 1)
    adj = np.zeros((n, n), dtype=np.uint8)
    if k_eff > 0:
        order = np.argsort(dist2, axis=1, kind="stable")[:, :k_eff]
        adj[np.repeat(np.arange(n), k_eff), order.ravel()] = 1
    return EventGraph(pos, _polarity_features(stream), _symmetrize(adj))


def build_radius_graph(stream: EventStream, radius: float) -> EventGraph:
    """Connect nodes whose normalized distance is at most ``radius``."""
    if len(stream) < 1:
        raise ValueError("cannot build a graph from an empty stream")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    pos = normalized_positions(stream)
    diff = pos[:, None, :] - pos[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    adj = (dist2 <= radius * radius).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return EventGraph(pos, _polarity_features(stream), adj)


def build_random_graph(stream: EventStream, degree: int, seed: int = 0) -> EventGraph:
    """Each node draws ``degree`` partners uniformly without replacement."""
    if len(stream) < 1:
        raise ValueError("cannot build a graph from an empty stream")
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    pos = normalized_positions(stream)
    n = len(pos)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    adj = np.zeros((n, n), dtype=np.uint8)
    d_eff = min(degree, n - 1)
    for i in range(n):
        if d_eff < 1:
            break
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        partners = rng.choice(others, size=d_eff, replace=False)
        adj[i, partners] = 1
    return EventGraph(pos, _polarity_features(stream), _symmetrize(adj))


@dataclass(frozen=True)
class ClusterAssignment:
    """Voxel-grid partition of graph nodes.

    ``cluster_of[i]`` is node i's cluster id; ``centers[k]`` is the member
    node closest to cluster k's voxel center; ``coarse_edges`` connects
    clusters joined by at least one original edge.
    """

    cluster_of: np.ndarray
    centers: np.ndarray
    coarse_edges: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    def cluster_members(self) -> list[np.ndarray]:
        """Member indices per cluster, each in ascending node order."""
        order = np.argsort(self.cluster_of, kind="stable")
        bounds = np.searchsorted(self.cluster_of[order], np.arange(self.n_clusters + 1))
        return [order[bounds[k]:bounds[k + 1]] for k in range(self.n_clusters)]


def voxel_cluster(graph: EventGraph, grid: tuple[int, int, int] = (12, 16, 16)) -> ClusterAssignment:
    """Cluster nodes by spatio-temporal voxel on a (g_t, g_y, g_x) grid."""
    g_t, g_y, g_x = grid
    if min(grid) < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid}")
    pos = graph.positions
    vx = np.minimum((pos[:, 0] * g_x).astype(np.int64), g_x - 1)
    vy = np.minimum((pos[:, 1] * g_y).astype(np.int64), g_y - 1)
    vt = np.minimum((pos[:, 2] * g_t).astype(np.int64), g_t - 1)
    keys = (vt * g_y + vy) * g_x + vx
    unique_keys, cluster_of = np.unique(keys, return_inverse=True)

    centers = np.empty(len(unique_keys), dtype=np.int64)
    order = np.argsort(cluster_of, kind="stable")
    bounds = np.searchsorted(cluster_of[order], np.arange(len(unique_keys) + 1))
    for k, key in enumerate(unique_keys):
        kt, rem = divmod(int(key), g_y * g_x)
        ky, kx = divmod(rem, g_x)
        centroid = np.array([(kx + 0.5) / g_x, (ky + 0.5) / g_y, (kt + 0.5) / g_t])
        members = order[bounds[k]:bounds[k + 1]]
        d2 = np.sum((pos[members] - centroid) ** 2, axis=1)
        centers[k] = members[int(np.argmin(d2))]

    fine = graph.edges
    if len(fine):
        proj = cluster_of[fine]
        proj = proj[proj[:, 0] != proj[:, 1]]
        proj.sort(axis=1)
        coarse = np.unique(proj, axis=0) if len(proj) else np.empty((0, 2), dtype=np.int64)
    else:
        coarse = np.empty((0, 2), dtype=np.int64)
    return ClusterAssignment(cluster_of.astype(np.int64), centers, coarse.astype(np.int64))


def maxpool_features(features, assignment: ClusterAssignment):
    """Elementwise max of node features within each cluster.

    Accepts a numpy array or a torch tensor; the torch path keeps gradients.
    """
    if features.shape[0] != len(assignment.cluster_of):
        raise ValueError(
            f"features row count {features.shape[0]} does not match "
            f"{len(assignment.cluster_of)} assigned nodes"
        )
    members = assignment.cluster_members()
    if isinstance(features, np.ndarray):
        return np.stack([features[idx].max(axis=0) for idx in members])
    import torch

    return torch.stack([features[torch.from_numpy(idx)].amax(dim=0) for idx in members])


def dump_graph_csv(graph: EventGraph, nodes_path, edges_path) -> None:
    """Debug dump: nodes as "x,y,t,f0,..." and edges as "i,j" CSV files."""
    with Path(nodes_path).open("w") as fh:
        for i in range(graph.num_nodes):
            row = list(graph.positions[i]) + list(graph.features[i])
            fh.write(",".join(format(float(v), ".6g") for v in row) + "\n")
    with Path(edges_path).open("w") as fh:
        for i, j in graph.edges:
            fh.write(f"{i},{j}\n")
