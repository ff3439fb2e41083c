"""Per-frame attributed residue graphs.

Edges connect each residue to its k nearest neighbors by minimal
heavy-atom distance; distances are expanded over a grid of Gaussians to
form edge features.  The graph is directed: j being a neighbor of i does
not make i a neighbor of j.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import Topology


@dataclass(frozen=True)
class RbfConfig:
    """Gaussian expansion grid: centers 0..d_max, width sigma."""

    n_centers: int = 16
    d_max: float = 10.0
    sigma: float | None = None  # defaults to the center spacing

    def __post_init__(self):
        if self.n_centers < 2:
            raise ValueError(f"need at least 2 centers, got {self.n_centers}")
        if not self.d_max > 0:
            raise ValueError(f"d_max must be positive, got {self.d_max}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.d_max / (self.n_centers - 1))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.d_max, self.n_centers)


@dataclass(frozen=True)
class ResidueGraph:
    """Directed k-NN residue graph of one frame with Gaussian edge features."""

    n_nodes: int
    neighbors: np.ndarray      # (n_nodes, k) int
    distances: np.ndarray      # (n_nodes, k) Angstrom, row-sorted ascending
    edge_features: np.ndarray  # (n_nodes, k, n_centers) in (0, 1]

    def __post_init__(self):
        n, k = self.neighbors.shape
        if n != self.n_nodes or self.distances.shape != (n, k):
            raise ValueError("neighbor/distance shape mismatch")
        if self.edge_features.shape[:2] != (n, k):
            raise ValueError("edge feature shape mismatch")
        rows = np.arange(n)[:, None]
        if (self.neighbors == rows).any():
            raise ValueError("self-edges are not allowed")
        if (np.diff(self.distances, axis=1) < 0).any():
            raise ValueError("distances must be row-sorted ascending")
        for i in range(n):
            if len(set(self.neighbors[i].tolist())) != k:
                raise ValueError(f"duplicate neighbors in row {i}")
        if (self.edge_features <= 0).any() or (self.edge_features > 1).any():
            raise ValueError("edge features must lie in (0, 1]")

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def min_heavy_distance(coords_a: np.ndarray, coords_b: np.ndarray) -> float:
    """Minimum pairwise Euclidean distance between two heavy-atom sets."""
    a = np.asarray(coords_a, dtype=np.float64)
    b = np.asarray(coords_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("residue with no heavy atoms")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min()))


def residue_min_distances(coordinates: np.ndarray, topology: Topology) -> np.ndarray:
    """(R, R) matrix of minimal heavy-atom distances; +inf on the diagonal."""
    coords = np.asarray(coordinates, dtype=np.float64)
    heavy = topology.heavy_mask
    idx = np.flatnonzero(heavy)
    if idx.size == 0:
        raise ValueError("topology has no heavy atoms")
    res_of_heavy = topology.residue_index[idx]
    counts = np.bincount(res_of_heavy, minlength=topology.n_residues)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"residue {missing} has no heavy atoms")
    pos = coords[idx]
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
    # Heavy atoms are residue-contiguous, so block minima come from reduceat.
    boundaries = np.flatnonzero(np.diff(res_of_heavy)) + 1
    starts = np.concatenate([[0], boundaries])
    rowmin = np.minimum.reduceat(d2, starts, axis=0)
    blockmin = np.minimum.reduceat(rowmin, starts, axis=1)
    out = np.sqrt(blockmin)
    np.fill_diagonal(out, np.inf)
    return out


def knn_graph(coordinates: np.ndarray, topology: Topology, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest residues per residue by minimal heavy-atom distance.

    k is clipped to n_residues - 1; ties break toward the lower residue
    index.  Returns (neighbors, distances), distances sorted ascending.
    """
    if topology.n_residues < 2:
        raise ValueError(f"need at least 2 residues, got {topology.n_residues}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k_eff = min(k, topology.n_residues - 1)
    dist = residue_min_distances(coordinates, topology)
    n = topology.n_residues
    cols = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((cols, dist), axis=1)
    neighbors = order[:, :k_eff]
    distances = np.take_along_axis(dist, neighbors, axis=1)
    return neighbors.astype(np.int64), distances


def rbf_expand(distances: np.ndarray | float, config: RbfConfig = RbfConfig()) -> np.ndarray:
    """Gaussian expansion of distances; output has a trailing center axis."""
    d = np.asarray(distances, dtype=np.float64)
    delta = d[..., None] - config.centers
    return np.exp(-(delta ** 2) / (2.0 * config.sigma ** 2))


def frame_graph(coordinates: np.ndarray, topology: Topology,
                k: int = 10, rbf: RbfConfig = RbfConfig()) -> ResidueGraph:
    """Full attributed graph of one frame."""
    neighbors, distances = knn_graph(coordinates, topology, k)
    features = rbf_expand(distances, rbf)
    return ResidueGraph(topology.n_residues, neighbors, distances, features)


def dump_graph_csv(path, graphs: list[ResidueGraph]) -> None:
    """Debug dump: one row per edge, ``frame,i,rank,j,d_ij``."""
    lines = ["frame,i,rank,j,d_ij"]
    for f, g in enumerate(graphs):
        for i in range(g.n_nodes):
            for rank in range(g.k):
                lines.append(
                    f"{f},{i},{rank},{g.neighbors[i, rank]},{float(g.distances[i, rank])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
