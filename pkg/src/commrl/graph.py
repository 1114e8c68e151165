"""Directed acyclic communication topology over agents."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NotADAGError(ValueError):
    """The communication graph contains a cycle: not a DAG."""


def nilpotency_index(adjacency: np.ndarray) -> int:
    """Smallest s with adjacency**s == 0; raises NotADAGError for cyclic graphs."""
    adj = np.asarray(adjacency)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adj.shape}")
    if not np.isin(adj, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    n = adj.shape[0]
    power = adj.astype(np.int64)
    if not power.any():
        return 1
    for s in range(2, n + 2):
        power = np.minimum(power @ adj, 1)
        if not power.any():
            return s
    raise NotADAGError("adjacency matrix is not nilpotent: not a DAG")


def topological_levels(adjacency: np.ndarray) -> list[list[int]]:
    """Kahn layering: level 0 holds nodes with no incoming edges."""
    adj = np.asarray(adjacency)
    nilpotency_index(adj)  # validates acyclicity
    n = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int)
    level_of = np.zeros(n, dtype=int)
    remaining = set(range(n))
    levels = []
    while remaining:
        frontier = [i for i in remaining if indeg[i] == 0]
        levels.append(sorted(frontier))
        for i in frontier:
            remaining.discard(i)
            for j in np.flatnonzero(adj[i]):
                indeg[j] -= 1
    return levels


def depth_to_leaf(adjacency: np.ndarray) -> np.ndarray:
    """Longest path length (in edges) from each node to any leaf."""
    adj = np.asarray(adjacency)
    n = adj.shape[0]
    depth = np.zeros(n, dtype=int)
    # process in reverse topological order
    for level in reversed(topological_levels(adj)):
        for i in level:
            outs = np.flatnonzero(adj[i])
            if outs.size:
                depth[i] = 1 + max(depth[j] for j in outs)
    return depth


@dataclass
class CommGraph:
    """Adjacency over agents plus derived DAG structure.

    ``edge_dims[(i, j)]`` gives the message dimensionality of edge i -> j.
    """

    adjacency: np.ndarray
    edge_dims: dict[tuple[int, int], int]
    s: int = field(init=False)
    levels: list[list[int]] = field(init=False)
    depths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        self.s = nilpotency_index(self.adjacency)
        self.levels = topological_levels(self.adjacency)
        self.depths = depth_to_leaf(self.adjacency)
        for (i, j), d in self.edge_dims.items():
            if not self.adjacency[i, j]:
                raise ValueError(f"edge dim given for absent edge {(i, j)}")
            if d <= 0:
                raise ValueError(f"edge {(i, j)} has non-positive dim {d}")

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]

    @property
    def k_exact(self) -> int:
        """History depth for an exact ordered correction: s - 1."""
        return self.s - 1

    def senders(self) -> list[int]:
        return [i for i in range(self.n_agents) if self.adjacency[i].any()]

    @classmethod
    def from_edges(cls, n_agents: int, edges: dict[tuple[int, int], int]) -> "CommGraph":
        adj = np.zeros((n_agents, n_agents), dtype=np.int64)
        for i, j in edges:
            adj[i, j] = 1
        return cls(adj, dict(edges))
