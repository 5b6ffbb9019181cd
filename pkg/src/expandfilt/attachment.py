"""Stochastic attachment models for the incoming node and their moments."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import InputError, UnsupportedError
from .graph import Graph

BERNOULLI = "bernoulli"
FIXED_BUDGET = "fixed_budget"
SCHEMES = (BERNOULLI, FIXED_BUDGET)


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttachmentModel:
    """Law of one attachment vector.

    Attributes:
        p: per-node probabilities. Independent edge probabilities for the
            ``bernoulli`` scheme, a categorical selection law (sums to one)
            for ``fixed_budget``.
        w: per-node edge weights.
        budget: number of edges drawn under ``fixed_budget``.
        scheme: ``"bernoulli"`` or ``"fixed_budget"``.
    """

    p: np.ndarray
    w: np.ndarray
    budget: int = 1
    scheme: str = FIXED_BUDGET

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 0:
            w = np.full(p.shape, float(w))
        if p.ndim != 1 or w.shape != p.shape:
            raise InputError("p and w must be vectors of equal length")
        if self.scheme not in SCHEMES:
            raise InputError(f"scheme must be one of {SCHEMES}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(w))):
            raise InputError("p and w must be finite")
        if np.any(p < 0) or np.any(p > 1):
            raise InputError("probabilities must lie in [0, 1]")
        if np.any(w < 0):
            raise InputError("weights must be >= 0")
        if self.scheme == FIXED_BUDGET:
            if not np.isclose(p.sum(), 1.0, atol=1e-9):
                raise InputError("fixed_budget selection probabilities must sum to 1")
            if not 1 <= self.budget <= p.size:
                raise InputError(f"budget must be in [1, {p.size}], got {self.budget}")
            if np.count_nonzero(p) < self.budget:
                raise InputError("fewer nodes with positive probability than the budget")
        object.__setattr__(self, "p", _frozen(p))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "budget", int(self.budget))

    @property
    def n(self) -> int:
        return self.p.size


@dataclass(frozen=True, eq=False)
class MomentStatistics:
    """Mean and covariance of an attachment vector.

    ``sample_count`` is 0 for analytic or deterministic moments.
    """

    mu: np.ndarray
    sigma: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise InputError("mu must be a vector and sigma a matching square matrix")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise InputError("moments must be finite")
        if not np.allclose(sigma, sigma.T, atol=1e-12, rtol=0.0):
            raise InputError("sigma is not symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        if mu.size and np.linalg.eigvalsh(sigma)[0] < -1e-8:
            raise InputError("sigma is not positive semi-definite")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "sigma", _frozen(sigma))

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def second_moment(self) -> np.ndarray:
        """``E[b b^T] = Sigma + mu mu^T``."""
        return self.sigma + np.outer(self.mu, self.mu)

    @property
    def expected_sq_norm(self) -> float:
        """``E[b^T b] = tr(Sigma) + mu^T mu``."""
        return float(np.trace(self.sigma) + self.mu @ self.mu)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mu).tobytes())
        h.update(np.ascontiguousarray(self.sigma).tobytes())
        return h.hexdigest()[:16]

    def fingerprint(self) -> dict:
        return {"sample_count": self.sample_count, "checksum": self.checksum()}


def _weights(n, w):
    w = np.asarray(w, dtype=float)
    return np.full(n, float(w)) if w.ndim == 0 else w


def uniform_model(n: int, m: int, w=1.0) -> AttachmentModel:
    """Fixed-budget model choosing ``m`` endpoints uniformly at random."""
    if n < 1:
        raise InputError("n must be >= 1")
    if m > n:
        raise InputError(f"budget {m} exceeds node count {n}")
    return AttachmentModel(np.full(n, 1.0 / n), _weights(n, w), m, FIXED_BUDGET)


def preferential_model(g: Graph, m: int, w=1.0) -> AttachmentModel:
    """Fixed-budget model with selection probabilities proportional to degree."""
    d = g.degrees()
    if d.sum() == 0:
        raise InputError("graph has no edges; preferential attachment undefined")
    return AttachmentModel(d / d.sum(), _weights(g.n, w), m, FIXED_BUDGET)


def bernoulli_model(p, w=1.0) -> AttachmentModel:
    p = np.asarray(p, dtype=float)
    return AttachmentModel(p, _weights(p.size, w), 1, BERNOULLI)


def median_edge_weight(g: Graph) -> float:
    """Median of the non-zero edge weights (1.0 for an empty graph)."""
    nz = g.nonzero_weights()
    return float(np.median(nz)) if nz.size else 1.0


def sample_attachments(model: AttachmentModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` attachment vectors as rows of a ``size x n`` array.

    Fixed-budget draws pick ``budget`` distinct endpoints by successive
    sampling proportional to ``p`` (Gumbel top-k, equivalent in law to
    sequential draws without replacement).
    """
    n = model.n
    if model.scheme == BERNOULLI:
        hits = rng.random((size, n)) < model.p
        return hits * model.w
    with np.errstate(divide="ignore"):
        logp = np.log(model.p)
    keys = logp + rng.gumbel(size=(size, n))
    m = model.budget
    if m == n:
        chosen = np.broadcast_to(np.arange(n), (size, n))
    else:
        chosen = np.argpartition(-keys, m - 1, axis=1)[:, :m]
    out = np.zeros((size, n))
    rows = np.repeat(np.arange(size), m)
    cols = np.asarray(chosen).reshape(-1)
    out[rows, cols] = model.w[cols]
    return out


def sample_attachment(model: AttachmentModel, rng: np.random.Generator) -> np.ndarray:
    return sample_attachments(model, rng, 1)[0]


def estimate_moments(model: AttachmentModel, samples: int, rng: np.random.Generator) -> MomentStatistics:
    """Sample mean and unbiased sample covariance of ``samples`` draws."""
    if samples < 2:
        raise InputError("need at least 2 samples to estimate a covariance")
    draws = sample_attachments(model, rng, samples)
    mu = draws.mean(axis=0)
    centred = draws - mu
    sigma = centred.T @ centred / (samples - 1)
    return MomentStatistics(mu, 0.5 * (sigma + sigma.T), samples)


def analytic_bernoulli_moments(model: AttachmentModel) -> MomentStatistics:
    if model.scheme != BERNOULLI:
        raise UnsupportedError("closed-form moments exist only for the bernoulli scheme")
    mu = model.w * model.p
    sigma = np.diag(model.w**2 * model.p * (1.0 - model.p))
    return MomentStatistics(mu, sigma, 0)


def deterministic_moments(vector) -> MomentStatistics:
    """Moments of a known attachment: ``mu = vector``, ``Sigma = 0``."""
    v = np.asarray(vector, dtype=float)
    return MomentStatistics(v, np.zeros((v.size, v.size)), 0)
