"""Comparison methods: single filter or filter bank with the realised
connectivity known (``kc1``/``kc2``), and a filter trained on the existing
graph and transferred unchanged (``it``).

Single-filter fits minimise ``(1/2 gamma) mean_s E||y_s - t_s||_D^2 + ||h||^2 / 2``
where the expectation is over the additive noise only; this is the same
noise treatment the filter bank uses, so the methods differ only in what
they know about the topology.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .attachment import deterministic_moments
from .exceptions import ConditioningError, InputError
from .filters import ExpandedSignal, FilterBank
from .graph import Graph, combined_expansion
from .learning import DENOISE, SSL, RegularizerWeights, TrainingSet, average_quadratic, solve_denoising, solve_ssl

METHODS = ("prop", "kc1", "kc2", "it")


@dataclass(frozen=True, eq=False)
class CombinedExpandedGraph:
    """Existing graph plus one node carrying both its incoming column and outgoing row."""

    adj: np.ndarray

    @classmethod
    def from_attachments(cls, g: Graph, b, a) -> "CombinedExpandedGraph":
        return cls(combined_expansion(g, b, a))

    @property
    def n(self) -> int:
        return self.adj.shape[0] - 1

    def graph(self) -> Graph:
        return Graph(self.adj)


@dataclass(eq=False)
class SingleFilterQuadratic:
    """``E||P h - t||_D^2 = h^T gram h - 2 h^T rhs + constant`` for one filter."""

    gram: np.ndarray
    rhs: np.ndarray
    constant: float

    @property
    def order(self) -> int:
        return self.rhs.size - 1

    def mse(self, h) -> float:
        h = np.asarray(h, dtype=float)
        return float(h @ self.gram @ h - 2 * h @ self.rhs + self.constant)

    @classmethod
    def average(cls, items):
        items = list(items)
        if not items:
            raise InputError("nothing to average")
        k = len(items)
        return cls(sum(q.gram for q in items) / k, sum(q.rhs for q in items) / k,
                   sum(q.constant for q in items) / k)


def _powers(S, K):
    out = [np.eye(S.shape[0])]
    for _ in range(K):
        out.append(S @ out[-1])
    return out


def single_filter_quadratic(S, t, d, sigma2: float, K: int, powers=None) -> SingleFilterQuadratic:
    """Noise-averaged normal equations for ``y = sum_k h_k S^k (t + noise)``."""
    S = np.asarray(S, dtype=float)
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if S.shape != (t.size, t.size) or d.size != t.size:
        raise InputError("shift, target and mask sizes disagree")
    P = _powers(S, K) if powers is None else powers
    cols = np.stack([Pk @ t for Pk in P], axis=1)
    Dcols = cols * d[:, None]
    gram = cols.T @ Dcols
    if sigma2:
        flat = np.stack([Pk.ravel() for Pk in P])
        DP = np.stack([(Pk * d[:, None]).ravel() for Pk in P])
        gram = gram + sigma2 * (flat @ DP.T)
    return SingleFilterQuadratic(0.5 * (gram + gram.T), Dcols.T @ t, float(t @ (d * t)))


def solve_single(q: SingleFilterQuadratic, gamma: float) -> np.ndarray:
    """Ridge minimiser ``(gram + gamma I)^{-1} rhs``."""
    if not gamma > 0:
        raise InputError(f"gamma must be > 0, got {gamma}")
    S = q.gram + gamma * np.eye(q.rhs.size)
    try:
        factor = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"single-filter system is not positive definite: {exc}") from exc
    h = linalg.cho_solve(factor, q.rhs)
    if not np.all(np.isfinite(h)):
        raise ConditioningError("single-filter solve produced non-finite coefficients")
    return h


def _need_realised(ts: TrainingSet):
    for i, s in enumerate(ts.samples):
        if s.b is None or s.a is None:
            raise InputError(f"sample {i} carries no realised attachments")


def kc1_quadratics(ts: TrainingSet, g: Graph, K: int) -> list:
    _need_realised(ts)
    out = []
    for s in ts.samples:
        S = combined_expansion(g, s.b, s.a)
        out.append(single_filter_quadratic(S, s.target.stacked, s.mask.d, s.target.sigma2, K))
    return out


def it_quadratics(ts: TrainingSet, g: Graph, K: int) -> list:
    """Existing-node part of every sample on the base graph alone."""
    P = _powers(g.adj, K)
    cache = {}
    out = []
    for s in ts.samples:
        key = (s.target.t.tobytes(), s.mask.existing.tobytes(), s.target.sigma2)
        if key not in cache:
            cache[key] = single_filter_quadratic(g.adj, s.target.t, s.mask.existing, s.target.sigma2, K, P)
        out.append(cache[key])
    return out


def train_kc1(ts: TrainingSet, g: Graph, K: int, gamma: float) -> np.ndarray:
    """Single filter of order ``K`` on each sample's realised combined graph."""
    return solve_single(SingleFilterQuadratic.average(kc1_quadratics(ts, g, K)), gamma)


def train_it(ts: TrainingSet, g: Graph, K: int, gamma: float) -> np.ndarray:
    """Single filter of order ``K`` fitted on the existing graph only."""
    return solve_single(SingleFilterQuadratic.average(it_quadratics(ts, g, K)), gamma)


def known_stats(sample):
    """Deterministic moment pair from a sample's realised attachments."""
    if sample.b is None or sample.a is None:
        raise InputError("sample carries no realised attachments")
    return deterministic_moments(sample.b), deterministic_moments(sample.a)


def train_kc2(ts: TrainingSet, g: Graph, reg: RegularizerWeights, task: str = DENOISE) -> FilterBank:
    """Filter bank trained through the moment pipeline with zero-covariance, realised moments."""
    _need_realised(ts)
    if task == SSL:
        qm, dp = average_quadratic(ts, g, known_stats, SSL)
        return solve_ssl(qm, dp, reg)
    return solve_denoising(average_quadratic(ts, g, known_stats, DENOISE), reg)


def apply_single(S, x, h) -> np.ndarray:
    """``sum_k h_k S^k x`` by repeated shifting."""
    S = np.asarray(S, dtype=float)
    y = np.zeros(S.shape[0])
    v = np.asarray(x, dtype=float)
    for k, hk in enumerate(np.asarray(h, dtype=float)):
        if k:
            v = S @ v
        y += hk * v
    return y


def apply_transferred(g: Graph, b, a, signal: ExpandedSignal, h) -> np.ndarray:
    """Run a single filter on the realised combined expansion."""
    return apply_single(combined_expansion(g, b, a), signal.stacked, h)
