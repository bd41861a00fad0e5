"""
View adjacency graph - which views act as neighbours for alignment and L_r
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from utils.config import Topology
from utils.errors import AsymmetricAdjacency


@dataclass(frozen=True)
class ViewGraph:
    num_views: int
    neighbors: Tuple[Tuple[int, ...], ...]
    topology: str = Topology.RING.value

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        """Ordered neighbour pairs P, in view order then neighbour order."""
        return [(i, j) for i, nbrs in enumerate(self.neighbors) for j in nbrs]

    @property
    def max_degree(self) -> int:
        return max((len(n) for n in self.neighbors), default=0)

    def describe(self) -> dict:
        return {"topology": self.topology, "num_views": self.num_views,
                "neighbors": [list(n) for n in self.neighbors]}


def _dedup(seq: Sequence[int]) -> Tuple[int, ...]:
    seen: List[int] = []
    for v in seq:
        if v not in seen:
            seen.append(v)
    return tuple(seen)


def build_view_graph(m: int, topology: Topology | str = Topology.RING,
                     explicit: Optional[Sequence[Sequence[int]]] = None) -> ViewGraph:
    """
    Build the view adjacency.

    Args:
        m: number of views (>= 2)
        topology: ring, full or explicit
        explicit: per-view neighbour lists, required for the explicit topology

    Returns:
        ViewGraph with symmetric adjacency
    """
    if m < 2:
        raise ValueError("a view graph needs at least two views")
    topology = Topology(topology)

    if topology == Topology.RING:
        neighbors = tuple(_dedup([(i - 1) % m, (i + 1) % m]) for i in range(m))
    elif topology == Topology.FULL:
        neighbors = tuple(tuple(j for j in range(m) if j != i) for i in range(m))
    else:
        if explicit is None or len(explicit) != m:
            raise AsymmetricAdjacency(f"explicit adjacency needs {m} neighbour lists")
        neighbors = tuple(_dedup([int(j) for j in nbrs]) for nbrs in explicit)
        for i, nbrs in enumerate(neighbors):
            for j in nbrs:
                if not 0 <= j < m:
                    raise AsymmetricAdjacency(f"view {i} lists out-of-range neighbour {j}")
                if j == i:
                    raise AsymmetricAdjacency(f"view {i} lists itself as a neighbour")
                if i not in neighbors[j]:
                    raise AsymmetricAdjacency(f"{j} in N({i}) but {i} not in N({j})")

    return ViewGraph(num_views=m, neighbors=neighbors, topology=topology.value)
