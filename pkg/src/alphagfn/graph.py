"""Pointed DAGs, trajectories and the merged single-node chain view.

States are dense integer indices. Edges are numbered in CSR order, i.e.
sorted by (parent, child), so every per-edge array in the package (logits,
log-probabilities, energies) is indexed by the same edge id.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_TRAJECTORY_CAP = 10**6


class TrajectoryCapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"more than {cap} complete trajectories (counted {count} so far)")
        self.count = count
        self.cap = cap


class Violation(NamedTuple):
    kind: str
    where: int | tuple[int, int]
    message: str


@dataclass(frozen=True, eq=False)
class DagGraph:
    """Directed graph with a designated source and sink.

    Only index-range checks happen at construction; use
    :func:`validate_pointed` for acyclicity and pointedness.
    """

    num_states: int
    edges: tuple[tuple[int, int], ...]
    source: int
    sink: int
    labels: tuple[Hashable, ...] | None = None
    edge_src: np.ndarray = field(init=False, repr=False)
    edge_dst: np.ndarray = field(init=False, repr=False)
    child_ptr: np.ndarray = field(init=False, repr=False)
    parent_edges: np.ndarray = field(init=False, repr=False)
    parent_ptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.num_states
        edges = tuple(sorted(set((int(u), int(v)) for u, v in self.edges)))
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for {n} states")
        if not (0 <= self.source < n and 0 <= self.sink < n):
            raise ValueError("source/sink out of range")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels must have one entry per state")
        object.__setattr__(self, "edges", edges)
        src = np.array([u for u, _ in edges], dtype=np.int64)
        dst = np.array([v for _, v in edges], dtype=np.int64)
        child_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(child_ptr, src + 1, 1)
        child_ptr = np.cumsum(child_ptr)
        order = np.lexsort((src, dst)).astype(np.int64)
        parent_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(parent_ptr, dst + 1, 1)
        parent_ptr = np.cumsum(parent_ptr)
        for name, arr in [("edge_src", src), ("edge_dst", dst), ("child_ptr", child_ptr),
                          ("parent_edges", order), ("parent_ptr", parent_ptr)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_edge_id", {e: i for i, e in enumerate(edges)})

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], source: int, sink: int,
                   num_states: int | None = None, labels: Sequence[Hashable] | None = None):
        edges = list(edges)
        if num_states is None:
            num_states = 1 + max([source, sink] + [max(u, v) for u, v in edges])
        return cls(num_states, tuple(edges), source, sink,
                   None if labels is None else tuple(labels))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def children(self, s: int) -> np.ndarray:
        return self.edge_dst[self.child_ptr[s]:self.child_ptr[s + 1]]

    def child_edges(self, s: int) -> np.ndarray:
        return np.arange(self.child_ptr[s], self.child_ptr[s + 1])

    def parents(self, s: int) -> np.ndarray:
        return self.edge_src[self.parent_in_edges(s)]

    def parent_in_edges(self, s: int) -> np.ndarray:
        return self.parent_edges[self.parent_ptr[s]:self.parent_ptr[s + 1]]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.child_ptr)

    def in_degree(self) -> np.ndarray:
        return np.diff(self.parent_ptr)

    def edge_id(self, u: int, v: int) -> int:
        try:
            return self._edge_id[(u, v)]
        except KeyError:
            raise KeyError(f"({u}, {v}) is not an edge") from None

    def has_edge(self, u: int, v: int) -> bool:
        return (u, v) in self._edge_id

    @property
    def terminal_states(self) -> np.ndarray:
        return self.parents(self.sink)

    def topological_order(self) -> np.ndarray | None:
        """Kahn order (smallest ready index first), or None if cyclic."""
        indeg = self.in_degree().copy()
        ready = [s for s in range(self.num_states) if indeg[s] == 0]
        ready.sort(reverse=True)
        order = []
        while ready:
            s = ready.pop()
            order.append(s)
            for c in self.children(s):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(int(c))
                    ready.sort(reverse=True)
        if len(order) != self.num_states:
            return None
        return np.array(order, dtype=np.int64)


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    is_complete: bool

    @classmethod
    def of(cls, g: DagGraph, states: Sequence[int]) -> "Trajectory":
        states = tuple(int(s) for s in states)
        if len(states) < 2:
            raise ValueError("a trajectory needs at least one edge")
        for u, v in zip(states[:-1], states[1:]):
            if not g.has_edge(u, v):
                raise ValueError(f"({u}, {v}) is not a forward edge")
        return cls(states, states[0] == g.source and states[-1] == g.sink)

    @property
    def num_edges(self) -> int:
        return len(self.states) - 1

    def edge_ids(self, g: DagGraph) -> np.ndarray:
        return np.array([g.edge_id(u, v) for u, v in zip(self.states[:-1], self.states[1:])],
                        dtype=np.int64)


def _reachable(g: DagGraph, start: int, forward: bool) -> np.ndarray:
    seen = np.zeros(g.num_states, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        s = queue.popleft()
        nxt = g.children(s) if forward else g.parents(s)
        for c in nxt:
            if not seen[c]:
                seen[c] = True
                queue.append(int(c))
    return seen


def validate_pointed(g: DagGraph) -> list[Violation]:
    """Return one violation per offending state or edge; empty means valid."""
    out: list[Violation] = []
    if g.source == g.sink:
        out.append(Violation("source_is_sink", g.source, "source and sink coincide"))
    if g.topological_order() is None:
        # states left after peeling all zero-indegree states sit on or behind a cycle
        indeg = g.in_degree().copy()
        queue = deque(s for s in range(g.num_states) if indeg[s] == 0)
        removed = np.zeros(g.num_states, dtype=bool)
        while queue:
            s = queue.popleft()
            removed[s] = True
            for c in g.children(s):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(int(c))
        for s in np.flatnonzero(~removed):
            out.append(Violation("cycle", int(s), f"state {s} lies on or after a directed cycle"))
    for p in g.parents(g.source):
        out.append(Violation("source_has_parent", (int(p), g.source), "source must have no parents"))
    for c in g.children(g.sink):
        out.append(Violation("sink_has_child", (g.sink, int(c)), "sink must have no children"))
    from_source = _reachable(g, g.source, forward=True)
    to_sink = _reachable(g, g.sink, forward=False)
    for s in range(g.num_states):
        if not (from_source[s] and to_sink[s]):
            out.append(Violation("not_on_complete_trajectory", s,
                                 f"state {s} is not on any source-to-sink trajectory"))
    return out


def enumerate_complete_trajectories(g: DagGraph, cap: int = DEFAULT_TRAJECTORY_CAP) -> list[Trajectory]:
    """All source-to-sink paths, lexicographic by state index."""
    out: list[Trajectory] = []
    path = [g.source]
    # explicit stack of child iterators keeps deep graphs off the recursion limit
    stack = [iter(g.children(g.source))]
    while stack:
        nxt = next(stack[-1], None)
        if nxt is None:
            stack.pop()
            path.pop()
            continue
        path.append(int(nxt))
        if nxt == g.sink:
            out.append(Trajectory(tuple(path), True))
            if len(out) > cap:
                raise TrajectoryCapExceeded(len(out), cap)
            path.pop()
        else:
            stack.append(iter(g.children(int(nxt))))
    return out


def count_complete_trajectories(g: DagGraph) -> int:
    order = g.topological_order()
    if order is None:
        raise ValueError("graph is cyclic")
    ways = [0] * g.num_states
    ways[g.source] = 1
    for s in order:
        for c in g.children(s):
            ways[c] += ways[s]
    return ways[g.sink]


def enumerate_subtrajectories(t: Trajectory) -> list[tuple[int, int]]:
    n = t.num_edges
    return [(i, j) for i in range(n) for j in range(i + 1, n + 1)]


@dataclass(frozen=True, eq=False)
class MergedChainGraph:
    """The DAG with source and sink identified into one state ``merged_root``.

    ``to_merged[s]`` maps an original state to its merged index and
    ``from_merged`` maps back (the root maps to the original source).
    ``edges[k]`` is the image of original edge ``k``.
    """

    num_states: int
    edges: tuple[tuple[int, int], ...]
    merged_root: int
    to_merged: np.ndarray
    from_merged: np.ndarray
    original: DagGraph

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_states, self.num_states), dtype=bool)
        for u, v in self.edges:
            a[u, v] = True
        return a


def merge_terminal(g: DagGraph) -> MergedChainGraph:
    keep = [s for s in range(g.num_states) if s != g.sink]
    to_merged = np.full(g.num_states, -1, dtype=np.int64)
    to_merged[keep] = np.arange(len(keep))
    to_merged[g.sink] = to_merged[g.source]
    edges = tuple((int(to_merged[u]), int(to_merged[v])) for u, v in g.edges)
    return MergedChainGraph(len(keep), edges, int(to_merged[g.source]), to_merged,
                            np.array(keep, dtype=np.int64), g)


def unmerge_edges(mg: MergedChainGraph) -> list[tuple[int, int]]:
    """Recover original edges; the source never has parents, so edges into the
    root must have pointed at the sink."""
    g = mg.original
    out = []
    for u, v in mg.edges:
        ou = int(mg.from_merged[u])
        ov = g.sink if v == mg.merged_root else int(mg.from_merged[v])
        out.append((ou, ov))
    return out


def dump_dag(g: DagGraph) -> str:
    lines = [f"source {g.source}", f"sink {g.sink}"]
    lines += [f"edge {u} {v}" for u, v in g.edges]
    return "\n".join(lines) + "\n"


def load_dag(text: str) -> DagGraph:
    source = sink = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "source" and len(parts) == 2:
                source = int(parts[1])
            elif parts[0] == "sink" and len(parts) == 2:
                sink = int(parts[1])
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from None
    if source is None or sink is None:
        raise ValueError("missing source or sink header")
    return DagGraph.from_edges(edges, source, sink)


def random_pointed_dag(rng: np.random.Generator, num_layers: int = 3, width: int = 3,
                       edge_prob: float = 0.5, skip_prob: float = 0.0) -> DagGraph:
    """Layered random pointed DAG: source, ``num_layers`` inner layers, sink.

    With ``skip_prob == 0`` every complete trajectory has ``num_layers + 1``
    edges; positive values add layer-skipping edges and mixed lengths.
    """
    layers = [[0]]
    nxt = 1
    for _ in range(num_layers):
        w = int(rng.integers(1, width + 1))
        layers.append(list(range(nxt, nxt + w)))
        nxt += w
    sink = nxt
    layers.append([sink])
    edges = set()
    for a, b in zip(layers[:-1], layers[1:]):
        for u in a:
            for v in b:
                if rng.random() < edge_prob:
                    edges.add((u, v))
        # pointedness: every node gets a parent and a child in adjacent layers
        for v in b:
            if not any((u, v) in edges for u in a):
                edges.add((int(rng.choice(a)), v))
        for u in a:
            if not any((u, v) in edges for v in b):
                edges.add((u, int(rng.choice(b))))
    if skip_prob > 0:
        for i in range(len(layers)):
            for j in range(i + 2, len(layers)):
                for u in layers[i]:
                    for v in layers[j]:
                        if (u, v) != (0, sink) and rng.random() < skip_prob:
                            edges.add((u, v))
    return DagGraph.from_edges(sorted(edges), 0, sink, num_states=sink + 1)
