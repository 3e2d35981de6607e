"""Directed communication graphs and their Laplacian data.

Nodes are indexed ``0..N-1``. An edge ``(sender, receiver, weight)`` means that
``receiver`` gets information from ``sender``; it populates the adjacency entry
``A[receiver, sender] = weight``. Channels elsewhere in the package are written
``(receiver, sender)`` to match that row/column convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

Channel = tuple[int, int]

ZERO_EIG_TOL = 1e-9
OMEGA_TOL = 1e-12


class GraphError(ValueError):
    """Invalid graph construction or a graph violating strong connectivity."""


@dataclass(frozen=True)
class Digraph:
    node_count: int
    edges: tuple[tuple[int, int, float], ...]
    adjacency: np.ndarray = field(repr=False, compare=False)

    @property
    def channels(self) -> tuple[Channel, ...]:
        """All ``(receiver, sender)`` pairs, in edge order."""
        return tuple((r, s) for s, r, _ in self.edges)

    def weight(self, receiver: int, sender: int) -> float:
        return float(self.adjacency[receiver, sender])


@dataclass(frozen=True)
class LaplacianBundle:
    raw: np.ndarray  # D - A
    omega: np.ndarray
    balanced: np.ndarray  # diag(omega) @ raw
    symmetric: np.ndarray  # (balanced + balanced.T) / 2
    lambda2: float

    @property
    def weights(self) -> np.ndarray:
        return np.diag(self.omega)


def build_digraph(node_count: int, weighted_edges: Iterable) -> Digraph:
    """Build a digraph from ``(sender, receiver[, weight])`` tuples.

    A missing weight defaults to 1. Duplicate edges, self-loops, unknown nodes
    and non-positive weights raise :class:`GraphError` naming the edge.
    """
    if int(node_count) != node_count or node_count < 2:
        raise GraphError(f"node_count must be an integer >= 2, got {node_count!r}")
    node_count = int(node_count)
    adjacency = np.zeros((node_count, node_count))
    edges = []
    seen = set()
    for item in weighted_edges:
        item = tuple(item)
        if len(item) == 2:
            sender, receiver, weight = item[0], item[1], 1.0
        elif len(item) == 3:
            sender, receiver, weight = item
        else:
            raise GraphError(f"edge {item!r} must be (sender, receiver[, weight])")
        if int(sender) != sender or int(receiver) != receiver:
            raise GraphError(f"edge {sender}->{receiver}: node ids must be integers")
        sender, receiver, weight = int(sender), int(receiver), float(weight)
        label = f"{sender}->{receiver}"
        if not (0 <= sender < node_count and 0 <= receiver < node_count):
            raise GraphError(f"edge {label} references a node outside 0..{node_count - 1}")
        if sender == receiver:
            raise GraphError(f"edge {label} is a self-loop")
        if not np.isfinite(weight) or weight <= 0:
            raise GraphError(f"edge {label} has non-positive weight {weight}")
        if (sender, receiver) in seen:
            raise GraphError(f"edge {label} is duplicated")
        seen.add((sender, receiver))
        adjacency[receiver, sender] = weight
        edges.append((sender, receiver, weight))
    adjacency.setflags(write=False)
    return Digraph(node_count, tuple(edges), adjacency)


def cycle_digraph(node_count: int, weight: float = 1.0) -> Digraph:
    """Directed cycle ``0 -> 1 -> ... -> N-1 -> 0``."""
    return build_digraph(
        node_count, [(i, (i + 1) % node_count, weight) for i in range(node_count)]
    )


def is_strongly_connected(g: Digraph) -> bool:
    graph = csr_matrix(g.adjacency.T > 0)
    n_components, _ = connected_components(graph, directed=True, connection="strong")
    return n_components == 1


def raw_laplacian(adjacency: np.ndarray) -> np.ndarray:
    return np.diag(adjacency.sum(axis=1)) - adjacency


def left_null_vector(laplacian: np.ndarray) -> np.ndarray:
    """Positive left null vector of ``laplacian`` normalised to unit sum."""
    vals, vecs = np.linalg.eig(laplacian.T)
    k = int(np.argmin(np.abs(vals)))
    if abs(vals[k]) > ZERO_EIG_TOL * max(1.0, np.abs(laplacian).max()):
        raise GraphError(f"Laplacian has no zero eigenvalue (closest {vals[k]:.3e})")
    omega = np.real(vecs[:, k])
    omega = omega / omega.sum()
    if omega.min() <= OMEGA_TOL:
        raise GraphError(
            f"balancing vector has a non-positive entry ({omega.min():.3e}); "
            "the graph is numerically degenerate"
        )
    return omega


def second_eigenvalue(symmetric: np.ndarray) -> float:
    """Smallest eigenvalue after discarding the one closest to zero."""
    vals = np.sort(np.linalg.eigvalsh(symmetric))
    k = int(np.argmin(np.abs(vals)))
    if abs(vals[k]) >= ZERO_EIG_TOL:
        raise GraphError(f"symmetrised Laplacian has no zero eigenvalue (closest {vals[k]:.3e})")
    return float(np.delete(vals, k).min())


def deflated_second_eigenvalue(symmetric: np.ndarray) -> float:
    """Same quantity as :func:`second_eigenvalue`, computed on the complement of 1."""
    n = symmetric.shape[0]
    # orthonormal basis of the complement of the all-ones direction
    q, _ = np.linalg.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]))
    basis = q[:, 1:]
    return float(np.linalg.eigvalsh(basis.T @ symmetric @ basis).min())


def laplacian_bundle(g: Digraph) -> LaplacianBundle:
    if not is_strongly_connected(g):
        raise GraphError(
            "graph is not strongly connected; the balancing vector needs a strongly "
            "connected communication graph in the attack-free mode"
        )
    raw = raw_laplacian(g.adjacency)
    omega = left_null_vector(raw)
    balanced = np.diag(omega) @ raw
    symmetric = 0.5 * (balanced + balanced.T)
    lam2 = second_eigenvalue(symmetric)
    for arr in (raw, omega, balanced, symmetric):
        arr.setflags(write=False)
    return LaplacianBundle(raw, omega, balanced, symmetric, lam2)


def effective_laplacian(g: Digraph, surviving_edges: Iterable[Channel]) -> np.ndarray:
    """Unit-weight Laplacian of the surviving ``(receiver, sender)`` channels."""
    adjacency = np.zeros_like(g.adjacency)
    base = set(g.channels)
    for channel in surviving_edges:
        channel = (int(channel[0]), int(channel[1]))
        if channel not in base:
            raise GraphError(f"channel {channel} (receiver, sender) is not in the base graph")
        adjacency[channel] = 1.0
    return raw_laplacian(adjacency)
