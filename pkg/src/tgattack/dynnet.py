"""Temporal edge lists, snapshot slicing and the graph statistics used by attacks."""

from __future__ import annotations

import csv
import os
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, TextIO

import numpy as np

__all__ = [
    "DynamicNetwork",
    "EmptyNetworkError",
    "NodeHistory",
    "ParseError",
    "SnapshotSpec",
    "SpecError",
    "TemporalEdge",
    "common_neighbors",
    "dump_snapshots",
    "edge_betweenness",
    "history",
    "ingest_edge_list",
    "link_degree",
    "parse_edge_list",
]


class ParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str, source: str = "<stream>"):
        super().__init__(f"{source}:{lineno}: {reason}: {line.strip()!r}")
        self.lineno = lineno
        self.source = source


class SpecError(ValueError):
    """Inconsistent snapshot or experiment specification."""


class EmptyNetworkError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalEdge:
    src: str
    dst: str
    weight: float
    timestamp: int


@dataclass(frozen=True)
class SnapshotSpec:
    observe_start: int
    observe_end: int
    num_snapshots: int
    focus_window_end: int

    def __post_init__(self):
        if self.num_snapshots < 2:
            raise SpecError(f"num_snapshots must be >= 2, got {self.num_snapshots}")
        if not self.observe_start < self.focus_window_end:
            raise SpecError("observe_start must precede focus_window_end")
        if self.observe_end <= self.focus_window_end:
            raise SpecError(
                f"observe_end ({self.observe_end}) must come after "
                f"focus_window_end ({self.focus_window_end})"
            )

    def interval_of(self, t: int) -> int | None:
        """Snapshot index of timestamp ``t``, or None outside the sliced range."""
        if t < self.focus_window_end or t >= self.observe_end:
            return None
        span = self.observe_end - self.focus_window_end
        return (t - self.focus_window_end) * self.num_snapshots // span


class DynamicNetwork:
    """Fixed node set with an ordered sequence of binary directed snapshots.

    ``snapshots`` is a read-only ``(T, n, n)`` uint8 array.
    """

    def __init__(self, snapshots, node_labels: Iterable[str] | None = None):
        A = np.array(snapshots, dtype=np.uint8)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise SpecError(f"snapshots must have shape (T, n, n), got {A.shape}")
        if A.shape[1] == 0:
            raise EmptyNetworkError("network has no nodes")
        if A.max(initial=0) > 1:
            raise SpecError("snapshot entries must be 0 or 1")
        idx = np.arange(A.shape[1])
        if A[:, idx, idx].any():
            raise SpecError("snapshots contain self-loops")
        A.setflags(write=False)
        self.snapshots = A
        labels = tuple(str(x) for x in node_labels) if node_labels is not None \
            else tuple(str(i) for i in range(A.shape[1]))
        if len(labels) != A.shape[1]:
            raise SpecError(f"{len(labels)} labels for {A.shape[1]} nodes")
        self.node_labels = labels

    @property
    def n(self) -> int:
        return self.snapshots.shape[1]

    @property
    def num_snapshots(self) -> int:
        return self.snapshots.shape[0]

    def __len__(self) -> int:
        return self.num_snapshots

    def __getitem__(self, k: int) -> np.ndarray:
        return self.snapshots[k]

    def __eq__(self, other) -> bool:
        return (isinstance(other, DynamicNetwork)
                and self.node_labels == other.node_labels
                and np.array_equal(self.snapshots, other.snapshots))

    def __repr__(self) -> str:
        return f"DynamicNetwork(n={self.n}, snapshots={self.num_snapshots})"

    def link_counts(self) -> list[int]:
        return [int(a.sum()) for a in self.snapshots]

    def density(self) -> list[float]:
        n = self.n
        return [c / (n * (n - 1)) if n > 1 else 0.0 for c in self.link_counts()]

    def historical_counts(self, start: int, stop: int) -> np.ndarray:
        """Number of snapshots in ``[start, stop)`` that contain each link."""
        return self.snapshots[start:stop].sum(axis=0, dtype=np.int64)

    def symmetrized(self) -> "DynamicNetwork":
        A = self.snapshots
        return DynamicNetwork(A | A.transpose(0, 2, 1), self.node_labels)


@dataclass
class NodeHistory:
    """Rows of one node across consecutive snapshots.

    ``rows[k]`` is the node's adjacency row in the k-th snapshot of the window.
    """

    node: int
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.array(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError(f"history rows must be 2-D, got shape {self.rows.shape}")

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def reversed(self) -> "NodeHistory":
        return NodeHistory(self.node, self.rows[::-1].copy())

    def copy(self) -> "NodeHistory":
        return NodeHistory(self.node, self.rows.copy())


def _sort_labels(labels: Iterable[str]) -> list[str]:
    labels = list(labels)
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def parse_edge_list(stream: TextIO, source: str = "<stream>") -> list[TemporalEdge]:
    """Parse ``src dst weight timestamp`` lines; ``%`` and ``#`` start comments."""
    edges = []
    for lineno, line in enumerate(stream, start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "%#":
            continue
        parts = stripped.split()
        if len(parts) != 4:
            raise ParseError(lineno, line, f"expected 4 fields, got {len(parts)}", source)
        src, dst, w, ts = parts
        try:
            weight = float(w)
            timestamp = int(float(ts)) if "." in ts or "e" in ts.lower() else int(ts)
        except ValueError:
            raise ParseError(lineno, line, "non-numeric weight or timestamp", source) from None
        if timestamp < 0:
            raise ParseError(lineno, line, "negative timestamp", source)
        edges.append(TemporalEdge(src, dst, weight, timestamp))
    return edges


def ingest_edge_list(stream: TextIO, spec: SnapshotSpec, *, symmetrize: bool = False,
                     source: str = "<stream>") -> DynamicNetwork:
    """Build snapshots from a KONECT-style temporal edge list.

    Nodes are the endpoints of edges stamped in ``[observe_start,
    focus_window_end)``. The range ``[focus_window_end, observe_end)`` is
    cut into ``spec.num_snapshots`` equal half-open intervals; repeated
    interactions inside one interval collapse to a single link. Self-loops
    and edges touching unretained nodes are dropped.
    """
    edges = parse_edge_list(stream, source)
    focus = {e.src for e in edges if spec.observe_start <= e.timestamp < spec.focus_window_end}
    focus |= {e.dst for e in edges if spec.observe_start <= e.timestamp < spec.focus_window_end}
    if not focus:
        raise EmptyNetworkError("no node has an edge inside the focus window")
    labels = _sort_labels(focus)
    index = {label: i for i, label in enumerate(labels)}
    A = np.zeros((spec.num_snapshots, len(labels), len(labels)), dtype=np.uint8)
    for e in edges:
        k = spec.interval_of(e.timestamp)
        if k is None or e.src == e.dst:
            continue
        u, v = index.get(e.src), index.get(e.dst)
        if u is None or v is None:
            continue
        A[k, u, v] = 1
    if symmetrize:
        A |= A.transpose(0, 2, 1)
    return DynamicNetwork(A, labels)


def history(network: DynamicNetwork, node: int, start: int, stop: int) -> NodeHistory:
    """Rows of ``node`` in snapshots ``start .. stop-1``, as an independent copy."""
    T, n = network.num_snapshots, network.n
    if not 0 <= node < n:
        raise IndexError(f"node {node} out of range for n={n}")
    if not 0 <= start < stop <= T:
        raise IndexError(f"window [{start}, {stop}) invalid for {T} snapshots")
    return NodeHistory(node, network.snapshots[start:stop, node, :].astype(np.float64))


def _check_index(A: np.ndarray, *nodes: int) -> None:
    n = A.shape[0]
    for v in nodes:
        if not 0 <= v < n:
            raise IndexError(f"node {v} out of range for n={n}")


def common_neighbors(A: np.ndarray, i: int, j: int) -> int:
    """Shared neighbours of ``i`` and ``j``, ignoring link direction."""
    _check_index(A, i, j)
    if i == j:
        raise ValueError("common_neighbors needs two distinct nodes")
    Ni = (A[i] > 0) | (A[:, i] > 0)
    Nj = (A[j] > 0) | (A[:, j] > 0)
    return int(np.count_nonzero(Ni & Nj))


def link_degree(A: np.ndarray, i: int, j: int) -> int:
    """Total (in + out) degree of ``i`` plus that of ``j``."""
    _check_index(A, i, j)
    B = A > 0
    return int(B[i].sum() + B[:, i].sum() + B[j].sum() + B[:, j].sum())


def edge_betweenness(A: np.ndarray) -> dict[tuple[int, int], float]:
    """Unnormalized directed edge betweenness (Brandes accumulation).

    Each existing edge ``(u, v)`` scores the sum over ordered pairs ``(s, t)``
    of the fraction of shortest ``s -> t`` paths that use it. Accumulation is
    in exact rationals, so each score is the correctly rounded float.
    """
    n = A.shape[0]
    succ = [np.flatnonzero(A[u]).tolist() for u in range(n)]
    eb = {(u, v): Fraction(0) for u in range(n) for v in succ[u]}
    for s in range(n):
        order = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = [0] * n
        dist = [-1] * n
        sigma[s], dist[s] = 1, 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = [Fraction(0)] * n
        for w in reversed(order):
            for v in preds[w]:
                c = Fraction(sigma[v], sigma[w]) * (1 + delta[w])
                eb[(v, w)] += c
                delta[v] += c
    return {e: float(x) for e, x in eb.items()}


def dump_snapshots(network: DynamicNetwork, directory: str | os.PathLike) -> list[str]:
    """Write one ``k,i,j`` CSV per snapshot. Returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, A in enumerate(network.snapshots):
        path = os.path.join(directory, f"snapshot_{k:03d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "i", "j"])
            for i, j in zip(*np.nonzero(A)):
                writer.writerow([k, int(i), int(j)])
        paths.append(path)
    return paths
