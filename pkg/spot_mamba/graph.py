from __future__ import annotations

import concurrent.futures
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from spot_mamba.utils import DataError, derive_rng

logger = logging.getLogger(__name__)

WALK_TYPES: Tuple[str, ...] = ("bfs", "dfs", "rw")


@dataclass(frozen=True)
class Graph:
    n_nodes: int
    adjacency: Tuple[Tuple[int, ...], ...]
    directed: bool = False

    def __post_init__(self):
        if self.n_nodes < 1:
            raise DataError(f"Graph: need at least one node, got {self.n_nodes}")
        if len(self.adjacency) != self.n_nodes:
            raise DataError(
                f"Graph: adjacency has {len(self.adjacency)} lists for {self.n_nodes} nodes"
            )
        for i, nbrs in enumerate(self.adjacency):
            if any(v < 0 or v >= self.n_nodes for v in nbrs):
                raise DataError(f"Graph: node {i} has a neighbor outside [0, {self.n_nodes})")
            if any(a >= b for a, b in zip(nbrs, nbrs[1:])):
                raise DataError(f"Graph: neighbors of node {i} are not sorted and unique")
        if not self.directed:
            for i, nbrs in enumerate(self.adjacency):
                for v in nbrs:
                    if i not in self.adjacency[v]:
                        raise DataError(f"Graph: undirected edge {i}-{v} is missing its reverse")

    @classmethod
    def from_edges(
        cls, edges: Iterable[Tuple[int, int]], n_nodes: Optional[int] = None, directed: bool = False
    ) -> "Graph":
        """Build from (src, dst) pairs; duplicates and self-loops are dropped."""
        pairs = [(int(s), int(d)) for s, d in edges]
        if n_nodes is None:
            n_nodes = 1 + max((max(s, d) for s, d in pairs), default=-1)
        neighbors: List[set] = [set() for _ in range(n_nodes)]
        for s, d in pairs:
            if s < 0 or d < 0 or s >= n_nodes or d >= n_nodes:
                raise DataError(f"Graph: edge ({s}, {d}) outside [0, {n_nodes})")
            if s == d:
                continue
            neighbors[s].add(d)
            if not directed:
                neighbors[d].add(s)
        return cls(n_nodes, tuple(tuple(sorted(n)) for n in neighbors), directed)

    @classmethod
    def from_networkx(cls, g: nx.Graph) -> "Graph":
        nodes = sorted(g.nodes())
        if nodes != list(range(len(nodes))):
            raise DataError("Graph: networkx nodes must be labelled 0..N-1")
        return cls.from_edges(g.edges(), n_nodes=len(nodes), directed=g.is_directed())

    def to_networkx(self) -> nx.Graph:
        g = nx.DiGraph() if self.directed else nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_edges_from(self.edges())
        return g

    def neighbors(self, node: int) -> Tuple[int, ...]:
        return self.adjacency[node]

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def edges(self) -> List[Tuple[int, int]]:
        return [
            (i, v)
            for i, nbrs in enumerate(self.adjacency)
            for v in nbrs
            if self.directed or i < v
        ]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adjacency[u]


def ring_graph(n_nodes: int) -> Graph:
    return Graph.from_networkx(nx.cycle_graph(n_nodes))


def load_edges(path: Path, n_nodes: Optional[int] = None, directed: bool = False) -> Graph:
    """
    Read an edge-list CSV of zero-based `src,dst` ids (header optional; extra columns
    such as PEMS distance costs are ignored). Undirected graphs are symmetrised.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame()
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"{path}: cannot read edge list ({e})") from e
    if frame.shape[1] < 2 and len(frame):
        raise DataError(f"{path}: edge list needs two columns src,dst")
    if len(frame) and not _is_integer(frame.iat[0, 0]):
        frame = frame.iloc[1:]
    edges = []
    for row, (src, dst) in enumerate(frame.iloc[:, :2].itertuples(index=False, name=None)):
        if not (_is_integer(src) and _is_integer(dst)):
            raise DataError(f"{path}: row {row + 1}: node ids must be integers, got {src!r},{dst!r}")
        edges.append((int(float(src)), int(float(dst))))
    if not edges and n_nodes is None:
        raise DataError(f"{path}: edge list is empty")
    return Graph.from_edges(edges, n_nodes=n_nodes, directed=directed)


def save_edges(g: Graph, path: Path) -> None:
    pd.DataFrame(g.edges(), columns=["src", "dst"]).to_csv(path, index=False)


def _is_integer(cell) -> bool:
    try:
        value = float(cell)
    except (TypeError, ValueError):
        return False
    return value.is_integer()


# ---------------------------------------------------------------------------
# walks


def _check_walk_args(g: Graph, start: int, length: int) -> None:
    if not 0 <= start < g.n_nodes:
        raise DataError(f"walk: start node {start} outside [0, {g.n_nodes})")
    if length < 1:
        raise DataError(f"walk: length must be >= 1, got {length}")


def _shuffled_neighbors(g: Graph, node: int, rng: np.random.Generator) -> List[int]:
    nbrs = g.neighbors(node)
    return [nbrs[i] for i in rng.permutation(len(nbrs))]


def bfs_walk(g: Graph, start: int, length: int, rng: np.random.Generator) -> List[int]:
    """
    First `length` nodes of breadth-first order from `start`, expanding each node's
    neighbors in a random order. When the component is exhausted, the traversal
    restarts from `start` with a fresh visited set.
    """
    _check_walk_args(g, start, length)
    walk: List[int] = []
    while len(walk) < length:
        visited = {start}
        queue = deque([start])
        while queue and len(walk) < length:
            node = queue.popleft()
            walk.append(node)
            for v in _shuffled_neighbors(g, node, rng):
                if v not in visited:
                    visited.add(v)
                    queue.append(v)
    return walk


def dfs_walk(g: Graph, start: int, length: int, rng: np.random.Generator) -> List[int]:
    """Depth-first preorder with random neighbor order; same restart rule as `bfs_walk`."""
    _check_walk_args(g, start, length)
    walk: List[int] = []
    while len(walk) < length:
        visited = {start}
        walk.append(start)
        stack = [iter(_shuffled_neighbors(g, start, rng))]
        while stack and len(walk) < length:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
            elif nxt not in visited:
                visited.add(nxt)
                walk.append(nxt)
                stack.append(iter(_shuffled_neighbors(g, nxt, rng)))
    return walk


def random_walk(g: Graph, start: int, length: int, rng: np.random.Generator) -> List[int]:
    """Uniform random walk; a node without neighbors repeats itself."""
    _check_walk_args(g, start, length)
    walk = [start]
    while len(walk) < length:
        nbrs = g.neighbors(walk[-1])
        walk.append(nbrs[int(rng.integers(len(nbrs)))] if nbrs else walk[-1])
    return walk


WALKERS: Dict[str, Callable[[Graph, int, int, np.random.Generator], List[int]]] = {
    "bfs": bfs_walk,
    "dfs": dfs_walk,
    "rw": random_walk,
}


@dataclass
class WalkSet:
    """walks[type, m, node] is a length-K sequence of node ids starting at `node`."""

    walks: np.ndarray
    K: int
    M: int
    seed: int

    def __post_init__(self):
        self.walks = np.asarray(self.walks, dtype=np.int64)
        if self.walks.ndim != 4 or self.walks.shape[0] != len(WALK_TYPES):
            raise DataError(f"WalkSet: expected shape (3, M, N, K), got {self.walks.shape}")
        if self.walks.shape[1] != self.M or self.walks.shape[3] != self.K:
            raise DataError(
                f"WalkSet: shape {self.walks.shape} does not match M={self.M}, K={self.K}"
            )
        n = self.walks.shape[2]
        if self.walks.size and (self.walks.min() < 0 or self.walks.max() >= n):
            raise DataError(f"WalkSet: node ids must lie in [0, {n})")
        if not np.array_equal(self.walks[..., 0], np.broadcast_to(np.arange(n), self.walks.shape[:3])):
            raise DataError("WalkSet: every sequence must start at its own node")

    @property
    def n_nodes(self) -> int:
        return int(self.walks.shape[2])

    def sequences(self, walk_type: str) -> np.ndarray:
        """(M, N, K) walks of one type."""
        return self.walks[WALK_TYPES.index(walk_type)]

    def relabel(self, perm: Sequence[int]) -> "WalkSet":
        """Walks of the graph whose node `perm[i]` is the old node `i`."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.argsort(perm)
        mapped = perm[self.walks]
        return WalkSet(mapped[:, :, inverse, :], self.K, self.M, self.seed)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for ti, name in enumerate(WALK_TYPES):
            for m in range(self.M):
                for i in range(self.n_nodes):
                    rows.append([name, m, i, *self.walks[ti, m, i].tolist()])
        columns = ["type", "m", "node"] + [f"k{j}" for j in range(self.K)]
        return pd.DataFrame(rows, columns=columns)

    def dump_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, header=False, lineterminator="\n")

    @classmethod
    def load_csv(cls, path: Path, seed: int = 0) -> "WalkSet":
        frame = pd.read_csv(path, header=None)
        if frame.shape[1] < 4:
            raise DataError(f"{path}: walk rows need type,m,node and at least one step")
        K = frame.shape[1] - 3
        M = int(frame.iloc[:, 1].max()) + 1
        N = int(frame.iloc[:, 2].max()) + 1
        walks = np.zeros((len(WALK_TYPES), M, N, K), dtype=np.int64)
        for row in frame.itertuples(index=False, name=None):
            kind = str(row[0]).lower()
            if kind not in WALK_TYPES:
                raise DataError(f"{path}: unknown walk type {row[0]!r}")
            walks[WALK_TYPES.index(kind), int(row[1]), int(row[2])] = row[3:]
        return cls(walks, K, M, seed)


def _walk_job(g: Graph, K: int, seed: int, ti: int, m: int, i: int) -> Tuple[int, int, int, List[int]]:
    rng = derive_rng(seed, ti, m, i)
    return ti, m, i, WALKERS[WALK_TYPES[ti]](g, i, K, rng)


def generate_walks(g: Graph, K: int, M: int, seed: int, max_workers: int = 1) -> WalkSet:
    """
    3 * M * N walks; each (type, m, node) draws from its own substream of `seed`,
    so results do not depend on scheduling.
    """
    if K < 1 or M < 1:
        raise DataError(f"generate_walks: K and M must be >= 1, got K={K}, M={M}")
    walks = np.zeros((len(WALK_TYPES), M, g.n_nodes, K), dtype=np.int64)
    jobs = [(ti, m, i) for ti in range(len(WALK_TYPES)) for m in range(M) for i in range(g.n_nodes)]
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = [executor.submit(_walk_job, g, K, seed, *job) for job in jobs]
            for future in concurrent.futures.as_completed(futures):
                ti, m, i, seq = future.result()
                walks[ti, m, i] = seq
    else:
        for job in jobs:
            ti, m, i, seq = _walk_job(g, K, seed, *job)
            walks[ti, m, i] = seq
    logger.debug("generated %d walks (K=%d, M=%d, seed=%d)", len(jobs), K, M, seed)
    return WalkSet(walks, K, M, seed)
