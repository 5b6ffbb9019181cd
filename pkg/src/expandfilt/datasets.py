"""Synthetic instances for the denoising and label-inference experiments, plus
ingestion of external edge lists and signal tables.

Low-variation eigenvectors of an adjacency are the ones with the largest
eigenvalues (total variation ``||x - A x||`` shrinks as the eigenvalue grows
for a unit-radius shift). Spectral routines symmetrise directed inputs where
noted.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .attachment import AttachmentModel, sample_attachments
from .exceptions import InputError, UnsupportedError
from .graph import Graph, combined_expansion, read_edge_list


def generate_ba(n: int, m_attach: int, seed) -> Graph:
    """Barabasi-Albert growth from a complete seed graph on ``m_attach + 1`` nodes.

    Unit weights, symmetric adjacency.
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(m_attach, (int, np.integer))):
        raise InputError("n and m_attach must be integers")
    if m_attach < 1 or n <= m_attach:
        raise InputError(f"need n > m_attach >= 1, got n={n}, m_attach={m_attach}")
    rng = np.random.default_rng(seed)
    start = nx.complete_graph(m_attach + 1)
    G = nx.barabasi_albert_graph(int(n), int(m_attach), seed=rng, initial_graph=start)
    return Graph(nx.to_numpy_array(G, nodelist=range(n), weight=None))


def bandlimited_signal(a_plus, bandwidth: int, seed) -> np.ndarray:
    """Unit-norm random mix of the ``bandwidth`` largest-eigenvalue eigenvectors."""
    A = np.asarray(a_plus, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("adjacency must be square")
    if not np.allclose(A, A.T, atol=1e-12, rtol=0):
        raise UnsupportedError("bandlimited signals need a symmetric adjacency")
    if not 1 <= bandwidth <= A.shape[0]:
        raise InputError(f"bandwidth must be in [1, {A.shape[0]}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, vecs = linalg.eigh(A)
    basis = vecs[:, ::-1][:, :bandwidth]
    t = basis @ rng.standard_normal(bandwidth)
    norm = np.linalg.norm(t)
    if norm == 0:
        raise InputError("degenerate signal draw")
    return t / norm


def knn_graph(points, k: int) -> Graph:
    """Gaussian-kernel ``k``-nearest-neighbour graph, symmetrised by max.

    Distance ties go to the lower node index (stable sort). The kernel width
    is the mean distance over all kept neighbour pairs.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k < n:
        raise InputError(f"k must be in [1, {n - 1}], got {k}")
    dist = np.sqrt(np.maximum(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1), 0.0))
    np.fill_diagonal(dist, np.inf)
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    d = dist[rows, nbrs.ravel()]
    scale = d.mean()
    w = np.exp(-(d**2) / scale**2) if scale > 0 else np.ones_like(d)
    W = np.zeros((n, n))
    W[rows, nbrs.ravel()] = w
    return Graph(np.maximum(W, W.T))


def sensor_points(n: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified points in the unit square: one uniform point in each of ``n``
    distinct cells of a ``c x c`` grid, ``c = ceil(sqrt(n))``."""
    c = int(math.ceil(math.sqrt(n)))
    cells = np.sort(rng.choice(c * c, size=n, replace=False))
    return (np.stack([cells % c, cells // c], axis=1) + rng.random((n, 2))) / c


def is_connected(g: Graph) -> bool:
    return connected_components(g.adj != 0, directed=True, connection="weak")[0] == 1


def sensor_graph(n: int, k: int, rng: np.random.Generator, max_tries: int = 100) -> Graph:
    """Connected kNN graph over random planar points (redraws until connected)."""
    for _ in range(max_tries):
        g = knn_graph(sensor_points(n, rng), k)
        if is_connected(g):
            return g
    raise InputError(f"no connected {k}-NN graph on {n} points after {max_tries} draws")


def spectral_bipartition(g: Graph) -> np.ndarray:
    """Sign of the Fiedler vector of the combinatorial Laplacian; zeros map to +1.

    The vector's sign is fixed so that its largest-magnitude entry is positive.
    """
    if not g.is_symmetric():
        raise InputError("spectral bipartition needs a symmetric graph")
    if g.n < 2 or not is_connected(g):
        raise InputError("spectral bipartition needs a connected graph with >= 2 nodes")
    W = g.adj.copy()
    np.fill_diagonal(W, 0.0)
    lap = np.diag(W.sum(axis=1)) - W
    _, vecs = linalg.eigh(lap)
    f = vecs[:, 1]
    if f[np.argmax(np.abs(f))] < 0:
        f = -f
    return np.where(f >= 0, 1.0, -1.0)


def two_clique_graph(size: int) -> Graph:
    """Two ``size``-cliques joined by a single edge between their first nodes."""
    if size < 2:
        raise InputError("clique size must be >= 2")
    n = 2 * size
    A = np.zeros((n, n))
    A[:size, :size] = 1
    A[size:, size:] = 1
    np.fill_diagonal(A, 0)
    A[0, size] = A[size, 0] = 1
    return Graph(A)


def noise_variance(t_plus, snr_db: float) -> float:
    """Per-entry variance giving the requested SNR for the whole expanded signal."""
    t_plus = np.asarray(t_plus, dtype=float)
    if np.isinf(snr_db):
        return 0.0
    return float(t_plus @ t_plus / (t_plus.size * 10 ** (snr_db / 10)))


def majority_label(labels, b, a) -> float:
    """Class with more edges to the incoming node (both directions); ties go to +1."""
    touched = (np.asarray(b) != 0).astype(int) + (np.asarray(a) != 0).astype(int)
    score = float(touched @ np.asarray(labels, dtype=float))
    return 1.0 if score >= 0 else -1.0


@dataclass(eq=False)
class DenoisingSample:
    t_plus: np.ndarray
    x_plus: np.ndarray
    b: np.ndarray
    a: np.ndarray
    sigma2: float


@dataclass(eq=False)
class DenoisingInstance:
    graph: Graph
    model_in: AttachmentModel
    model_out: AttachmentModel
    samples: list
    snr_db: float
    bandwidth: int


def make_denoising_instance(g: Graph, model_in: AttachmentModel, model_out: AttachmentModel,
                            realizations: int, snr_db: float, bandwidth: int,
                            rng: np.random.Generator) -> DenoisingInstance:
    """Per realisation: draw ``(b, a)``, a bandlimited signal on the symmetrised
    combined expansion, and Gaussian noise at ``snr_db`` (``inf`` for none)."""
    if realizations < 1:
        raise InputError("need at least one realisation")
    B = sample_attachments(model_in, rng, realizations)
    Aout = sample_attachments(model_out, rng, realizations)
    samples = []
    for b, a in zip(B, Aout):
        S = combined_expansion(g, b, a)
        t = bandlimited_signal(0.5 * (S + S.T), bandwidth, rng)
        s2 = noise_variance(t, snr_db)
        x = t + np.sqrt(s2) * rng.standard_normal(t.size) if s2 > 0 else t.copy()
        samples.append(DenoisingSample(t, x, b, a, s2))
    return DenoisingInstance(g, model_in, model_out, samples, float(snr_db), bandwidth)


@dataclass(eq=False)
class SSLSample:
    b: np.ndarray
    a: np.ndarray
    label: float
    labelled: bool
    observed: np.ndarray

    def signal(self, labels) -> np.ndarray:
        """Existing-node input: labels where observed, zero elsewhere."""
        return np.where(self.observed, labels, 0.0)

    @property
    def x_plus(self) -> float:
        return self.label if self.labelled else 0.0


@dataclass(eq=False)
class SSLInstance:
    graph: Graph
    labels: np.ndarray
    model_in: AttachmentModel
    model_out: AttachmentModel
    samples: list
    labeled_fraction_incoming: float
    meta: dict = field(default_factory=dict)

    def with_flags(self, flags, fraction) -> "SSLInstance":
        """Same realisations with a different set of labelled incoming nodes."""
        samples = [SSLSample(s.b, s.a, s.label, bool(f), s.observed) for s, f in zip(self.samples, flags)]
        return SSLInstance(self.graph, self.labels, self.model_in, self.model_out, samples, float(fraction),
                           dict(self.meta))


def observation_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with ``max(1, round(fraction * n))`` entries set, chosen uniformly."""
    if not 0 < fraction <= 1:
        raise InputError("label fraction must lie in (0, 1]")
    k = max(1, int(round(fraction * n)))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return mask


def labelled_flags(count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``round(fraction * count)`` True entries in random positions."""
    if fraction not in (0.5, 1.0):
        raise InputError("incoming label fraction must be 1.0 or 0.5")
    flags = np.zeros(count, dtype=bool)
    flags[rng.permutation(count)[: int(round(fraction * count))]] = True
    return flags


def make_ssl_instance(g: Graph, labels, model_in: AttachmentModel, model_out: AttachmentModel,
                      realizations: int, label_fraction: float, labeled_fraction_incoming: float,
                      rng: np.random.Generator, observed=None) -> SSLInstance:
    """Incoming realisations labelled by edge majority, each with its own
    random set of observed existing labels (or the shared ``observed`` mask)."""
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (g.n,) or not np.all(np.abs(labels) == 1):
        raise InputError("labels must be +-1, one per existing node")
    B = sample_attachments(model_in, rng, realizations)
    Aout = sample_attachments(model_out, rng, realizations)
    flags = labelled_flags(realizations, labeled_fraction_incoming, rng)
    if observed is None:
        masks = [observation_mask(g.n, label_fraction, rng) for _ in range(realizations)]
    else:
        masks = [np.asarray(observed, dtype=bool)] * realizations
    samples = [SSLSample(b, a, majority_label(labels, b, a), bool(f), m)
               for b, a, f, m in zip(B, Aout, flags, masks)]
    return SSLInstance(g, labels, model_in, model_out, samples, float(labeled_fraction_incoming))


def read_signal_csv(path, n: int | None = None):
    """Signal table: header row, first column node id, one column per sample.

    Returns ``(sample_ids, matrix)`` with rows ordered by node id.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = [(i, r) for i, r in enumerate(rows, 1) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise InputError(f"{path}: empty signal file")
    header = rows[0][1][1:]
    if not header:
        raise InputError(f"{path}: header names no sample columns")
    ids, values = [], []
    for lineno, r in rows[1:]:
        if len(r) != len(header) + 1:
            raise InputError(f"{path}:{lineno}: expected {len(header) + 1} fields, got {len(r)}")
        try:
            ids.append(int(r[0]))
            values.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    ids = np.asarray(ids)
    mat = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise InputError(f"{path}: non-finite signal values")
    count = n if n is not None else len(ids)
    if sorted(ids.tolist()) != list(range(count)):
        raise InputError(f"{path}: node ids must be exactly 0..{count - 1}")
    return header, mat[np.argsort(ids)]


def load_external(edge_list_path, signal_csv_path, expanded: bool = False):
    """Graph from an edge list and a node-by-sample signal matrix from CSV.

    With ``expanded`` the table carries one extra last row for the incoming node.
    """
    g = read_edge_list(edge_list_path)
    ids, mat = read_signal_csv(signal_csv_path)
    rows = g.n + 1 if expanded else g.n
    if mat.shape[0] != rows:
        raise InputError(f"signal file has {mat.shape[0]} nodes, expected {rows} for a graph of {g.n}")
    return g, ids, mat


def write_signal_csv(path, matrix, sample_ids=None) -> None:
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    ids = sample_ids or [f"s{j}" for j in range(mat.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *ids])
        for i, row in enumerate(mat):
            w.writerow([i, *(repr(float(v)) for v in row)])
