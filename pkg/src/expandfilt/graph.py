"""Dense graph representation, node expansion and Krylov utilities.

Shift convention: ``A[i, j]`` is the weight of the edge carrying signal from
node ``j`` to node ``i``, so ``(A @ x)[i]`` aggregates over in-neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InputError

INCOMING = "incoming"
OUTGOING = "outgoing"
DIRECTIONS = (INCOMING, OUTGOING)


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Weighted directed graph stored as a dense ``n x n`` adjacency."""

    adj: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adj, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise InputError(f"adjacency must be square, got shape {adj.shape}")
        if not np.all(np.isfinite(adj)):
            raise InputError("adjacency has non-finite entries")
        if np.any(adj < 0):
            raise InputError("adjacency has negative entries")
        object.__setattr__(self, "adj", _frozen(adj))

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @classmethod
    def from_edges(cls, n, edges):
        """Build from ``(src, dst, weight)`` triples; ``src`` feeds ``dst``."""
        adj = np.zeros((n, n))
        for src, dst, w in edges:
            adj[dst, src] = w
        return cls(adj)

    def is_symmetric(self, tol=1e-12) -> bool:
        return bool(np.allclose(self.adj, self.adj.T, atol=tol, rtol=0.0))

    def degrees(self) -> np.ndarray:
        """Total (in + out) unweighted degree of every node."""
        support = (self.adj != 0).astype(float)
        return support.sum(axis=0) + support.sum(axis=1)

    def neighbour_counts(self) -> np.ndarray:
        """Number of distinct neighbours of each node, ignoring direction."""
        support = (self.adj != 0) | (self.adj.T != 0)
        np.fill_diagonal(support, False)
        return support.sum(axis=1)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.adj)))) if self.n else 0.0

    def normalized(self) -> "Graph":
        """Copy scaled so the spectral radius is one (zero graph unchanged)."""
        rho = self.spectral_radius()
        if rho == 0:
            return self
        return Graph(self.adj / rho)

    def nonzero_weights(self) -> np.ndarray:
        return self.adj[self.adj != 0]


def _check_vector(g: Graph, x, name="x"):
    x = np.asarray(x, dtype=float)
    if x.shape != (g.n,):
        raise InputError(f"{name} must have shape ({g.n},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} has non-finite entries")
    return x


def krylov_matrix(g: Graph, x, order: int) -> np.ndarray:
    """Return ``[x, A x, ..., A^order x]`` as an ``n x (order + 1)`` matrix."""
    x = _check_vector(g, x)
    if order < 0:
        raise InputError("order must be >= 0")
    out = np.empty((g.n, order + 1))
    out[:, 0] = x
    for k in range(1, order + 1):
        out[:, k] = g.adj @ out[:, k - 1]
    return out


def shifted_krylov(g: Graph, x, order: int) -> np.ndarray:
    """Return ``[0, x, A x, ..., A^(order-1) x]``."""
    if order < 1:
        raise InputError("order must be >= 1 for the shifted Krylov matrix")
    out = np.zeros((g.n, order + 1))
    out[:, 1:] = krylov_matrix(g, x, order - 1)
    return out


def matrix_powers(g: Graph, order: int) -> list[np.ndarray]:
    """``[I, A, ..., A^order]`` by repeated multiplication."""
    powers = [np.eye(g.n)]
    for _ in range(order):
        powers.append(g.adj @ powers[-1])
    return powers


@dataclass(frozen=True, eq=False)
class ExpandedAdjacency:
    """Base graph plus one node attached in a single direction.

    ``incoming``: the attach vector is the last column (the new node feeds the
    existing ones). ``outgoing``: it is the last row (existing nodes feed the
    new node).
    """

    base: Graph
    direction: str
    attach: np.ndarray

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InputError(f"direction must be one of {DIRECTIONS}")
        object.__setattr__(self, "attach", _frozen(_check_vector(self.base, self.attach, "attach")))

    @property
    def n(self) -> int:
        return self.base.n

    def to_dense(self) -> np.ndarray:
        n = self.n
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = self.base.adj
        if self.direction == INCOMING:
            out[:n, n] = self.attach
        else:
            out[n, :n] = self.attach
        return out


def expand(g: Graph, direction: str, attach) -> ExpandedAdjacency:
    return ExpandedAdjacency(g, direction, attach)


def expanded_power(e: ExpandedAdjacency, k: int) -> np.ndarray:
    """k-th power of an expanded adjacency from its block structure.

    The top-left block is ``A^k``; the border holds ``A^(k-1) b`` (incoming,
    last column) or ``a^T A^(k-1)`` (outgoing, last row). ``k = 0`` gives the
    identity.
    """
    n = e.n
    if k < 0:
        raise InputError("power must be >= 0")
    if k == 0:
        return np.eye(n + 1)
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = np.linalg.matrix_power(e.base.adj, k)
    border = e.attach
    if e.direction == INCOMING:
        for _ in range(k - 1):
            border = e.base.adj @ border
        out[:n, n] = border
    else:
        for _ in range(k - 1):
            border = border @ e.base.adj
        out[n, :n] = border
    return out


def combined_expansion(g: Graph, b, a) -> np.ndarray:
    """Single ``(n+1) x (n+1)`` graph holding both the incoming and outgoing edges."""
    b = _check_vector(g, b, "b")
    a = _check_vector(g, a, "a")
    n = g.n
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = g.adj
    out[:n, n] = b
    out[n, :n] = a
    return out


def read_edge_list(path, n=None) -> Graph:
    """Parse ``src dst weight`` lines (0-based, ``#`` starts a comment)."""
    edges = []
    max_node = -1
    declared = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("# n="):
            try:
                declared = int(stripped[4:])
            except ValueError:
                pass
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise InputError(f"{path}:{lineno}: expected 'src dst [weight]', got {raw!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: cannot parse {raw!r}: {exc}") from None
        if src < 0 or dst < 0:
            raise InputError(f"{path}:{lineno}: negative node index")
        if not np.isfinite(w) or w < 0:
            raise InputError(f"{path}:{lineno}: weight must be finite and >= 0")
        edges.append((src, dst, w))
        max_node = max(max_node, src, dst)
    if n is None:
        n = declared if declared is not None else max_node + 1
    if max_node >= n:
        raise InputError(f"{path}: node index {max_node} out of range for n={n}")
    return Graph.from_edges(n, edges)


def write_edge_list(g: Graph, path) -> None:
    dst, src = np.nonzero(g.adj)
    lines = [f"# n={g.n}"]
    lines += [f"{s} {d} {float(g.adj[d, s])!r}" for s, d in sorted(zip(src.tolist(), dst.tolist()))]
    Path(path).write_text("\n".join(lines) + "\n")
