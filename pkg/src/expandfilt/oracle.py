"""Brute-force Monte-Carlo estimates of every closed-form expectation.

Nothing here reuses the moments module: each draw materialises the dense
``(n+1) x (n+1)`` expanded adjacencies and propagates the signal by repeated
multiplication, which is the direct definition of the filter bank.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attachment import AttachmentModel, sample_attachments
from .exceptions import InputError
from .graph import INCOMING, OUTGOING, Graph

DEFAULT_BATCH = 50_000


@dataclass(frozen=True, eq=False)
class OracleReport:
    estimate: np.ndarray
    std_error: np.ndarray
    draws: int
    max_abs_z: float = float("nan")

    def compare(self, closed_form, exact_tol=1e-9) -> "OracleReport":
        """Attach the largest ``|closed - estimate| / std_error`` over entries.

        Entries with zero standard error must agree to ``exact_tol`` (relative
        to the magnitude), otherwise their z-score is infinite.
        """
        closed = np.asarray(closed_form, dtype=float)
        est = np.asarray(self.estimate, dtype=float)
        se = np.asarray(self.std_error, dtype=float)
        if closed.shape != est.shape:
            raise InputError(f"closed form shape {closed.shape} != estimate shape {est.shape}")
        diff = np.abs(closed - est)
        scale = exact_tol * (1.0 + np.abs(closed))
        z = np.zeros_like(diff)
        pos = (se > 0) & (diff > scale)
        z[pos] = diff[pos] / se[pos]
        z[(se == 0) & (diff > scale)] = np.inf
        return replace(self, max_abs_z=float(z.max()) if z.size else 0.0)

    def z_scores(self, closed_form) -> np.ndarray:
        closed = np.asarray(closed_form, dtype=float)
        se = np.asarray(self.std_error, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, np.abs(closed - self.estimate) / se, 0.0)


class _Moments:
    """Streaming mean / variance with batch merges (Chan et al.)."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, batch):
        batch = np.asarray(batch, dtype=float)
        nb = batch.shape[0]
        mb = batch.mean(axis=0)
        m2b = ((batch - mb) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = nb, mb, m2b
            return
        total = self.count + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / total
        self.m2 = self.m2 + m2b + delta**2 * self.count * nb / total
        self.count = total

    def report(self) -> OracleReport:
        if self.count < 2:
            raise InputError("need at least two draws")
        var = self.m2 / (self.count - 1)
        # spread at the level of summation rounding is treated as none
        floor = (64 * np.finfo(float).eps * np.abs(self.mean)) ** 2
        var = np.where(var <= floor, 0.0, var)
        return OracleReport(self.mean, np.sqrt(np.maximum(var, 0.0) / self.count), self.count)


def _batches(draws, batch):
    done = 0
    while done < draws:
        size = min(batch, draws - done)
        yield size
        done += size


def _draw_attachment(model, rng, size, n):
    if model is None:
        return np.zeros((size, n))
    if isinstance(model, AttachmentModel):
        return sample_attachments(model, rng, size)
    v = np.asarray(model, dtype=float)
    return np.broadcast_to(v, (size, n)).copy()


def _dense_expansions(A, vecs, direction):
    """Batch of dense expanded adjacencies, one per row of ``vecs``."""
    size, n = vecs.shape
    out = np.zeros((size, n + 1, n + 1))
    out[:, :n, :n] = A
    if direction == INCOMING:
        out[:, :n, n] = vecs
    else:
        out[:, n, :n] = vecs
    return out


def _propagate(mats, x, order):
    """``[x, S x, ..., S^order x]`` per draw; shape ``(batch, n+1, order+1)``."""
    cols = [x]
    for _ in range(order):
        cols.append(np.einsum("bij,bj->bi", mats, cols[-1]))
    return np.stack(cols, axis=2)


def _signals(target, size, rng, noisy=True):
    base = np.append(target.t, target.t_plus)
    if not noisy or target.sigma2 == 0:
        return np.broadcast_to(base, (size, base.size)).copy()
    return base + np.sqrt(target.sigma2) * rng.standard_normal((size, base.size))


def _designs(g, target, models, orders, size, rng, noisy=True):
    L, M = orders
    model_in, model_out = models
    n = g.n
    b = _draw_attachment(model_in, rng, size, n)
    a = _draw_attachment(model_out, rng, size, n)
    x = _signals(target, size, rng, noisy)
    Ai = _dense_expansions(g.adj, b, INCOMING)
    Ao = _dense_expansions(g.adj, a, OUTGOING)
    Ki = _propagate(Ai, x, L)
    Ko = _propagate(Ao, x, M)
    return Ki, Ko, Ai, Ao


def mc_expected_loss(h, g: Graph, target, mask, models, draws: int, rng: np.random.Generator,
                     orders=None, batch=DEFAULT_BATCH) -> OracleReport:
    """Monte-Carlo estimate of ``E||W h - t_+||_D^2`` over attachments and noise."""
    if draws < 100:
        raise InputError("use at least 100 draws")
    h = np.asarray(h, dtype=float)
    if orders is None:
        raise InputError("orders (L, M) are required")
    L, M = orders
    if h.size != L + M + 2:
        raise InputError("h does not match the filter orders")
    d = np.asarray(mask.d, dtype=float)
    tplus = np.append(target.t, target.t_plus)
    acc = _Moments()
    for size in _batches(draws, batch):
        Ki, Ko, _, _ = _designs(g, target, models, orders, size, rng)
        y = Ki @ h[: L + 1] + Ko @ h[L + 1 :]
        acc.add((d * (y - tplus) ** 2).sum(axis=1))
    return acc.report()


def mc_dirichlet(h_side, g: Graph, target, model, side: str, draws: int, rng: np.random.Generator,
                 batch=DEFAULT_BATCH) -> OracleReport:
    """Monte-Carlo estimate of ``E||y - S y||^2`` for one side of the bank, noise-free input."""
    if draws < 100:
        raise InputError("use at least 100 draws")
    if side not in (INCOMING, OUTGOING):
        raise InputError(f"side must be {INCOMING!r} or {OUTGOING!r}")
    h = np.atleast_1d(np.asarray(h_side, dtype=float))
    K = h.size - 1
    n = g.n
    acc = _Moments()
    for size in _batches(draws, batch):
        vecs = _draw_attachment(model, rng, size, n)
        S = _dense_expansions(g.adj, vecs, side)
        x = _signals(target, size, rng, noisy=False)
        y = _propagate(S, x, K) @ h
        r = y - np.einsum("bij,bj->bi", S, y)
        acc.add((r**2).sum(axis=1))
    return acc.report()


def mc_moment_matrices(g: Graph, target, mask, models, orders, draws: int, rng: np.random.Generator,
                       batch=DEFAULT_BATCH) -> dict:
    """Entrywise estimates of ``E[W^T D W]`` (``delta``) and ``E[W^T D t_+]`` (``theta``).

    ``delta12`` and ``delta21`` are cut from the same draws, so one is the
    transpose of the other.
    """
    L, M = orders
    d = np.asarray(mask.d, dtype=float)
    tplus = np.append(target.t, target.t_plus)
    acc_delta, acc_theta = _Moments(), _Moments()
    for size in _batches(draws, batch):
        Ki, Ko, _, _ = _designs(g, target, models, orders, size, rng)
        W = np.concatenate([Ki, Ko], axis=2)
        WD = W * d[None, :, None]
        acc_delta.add(np.einsum("bip,biq->bpq", WD, W))
        acc_theta.add(np.einsum("bip,i->bp", WD, tplus))
    delta = acc_delta.report()
    s = L + 1
    out = {"delta": delta, "theta": acc_theta.report()}
    for name, (rs, cs) in {
        "delta11": (slice(0, s), slice(0, s)),
        "delta12": (slice(0, s), slice(s, None)),
        "delta21": (slice(s, None), slice(0, s)),
        "delta22": (slice(s, None), slice(s, None)),
    }.items():
        out[name] = OracleReport(delta.estimate[rs, cs], delta.std_error[rs, cs], delta.draws)
    return out


def mc_dirichlet_matrices(g: Graph, target, models, orders, draws: int, rng: np.random.Generator,
                          batch=DEFAULT_BATCH) -> dict:
    """Entrywise estimates of the matrices whose quadratic forms are the expected Dirichlet energies.

    Per draw the incoming matrix is ``K^T (I - S)^T (I - S) K`` with
    ``K = [x, S x, ...]`` on the dense incoming expansion ``S``; likewise for
    the outgoing side. The input is the noise-free target.
    """
    L, M = orders
    n = g.n
    eye = np.eye(n + 1)
    acc_in, acc_out = _Moments(), _Moments()
    for size in _batches(draws, batch):
        Ki, Ko, Ai, Ao = _designs(g, target, models, orders, size, rng, noisy=False)
        Ri = np.einsum("bij,bjk->bik", eye - Ai, Ki)
        Ro = np.einsum("bij,bjk->bik", eye - Ao, Ko)
        acc_in.add(np.einsum("bip,biq->bpq", Ri, Ri))
        acc_out.add(np.einsum("bip,biq->bpq", Ro, Ro))
    return {"psi_in": acc_in.report(), "psi_out": acc_out.report()}


def mc_expected_gram(g: Graph, C, t, sigma2: float, orders, draws: int, rng: np.random.Generator,
                     batch=DEFAULT_BATCH) -> OracleReport:
    """Entrywise estimate of ``E[L_x^T C M_x]`` with ``x = t + N(0, sigma2 I)``."""
    KL, KM = orders
    C = np.asarray(C, dtype=float)
    t = np.asarray(t, dtype=float)
    acc = _Moments()
    for size in _batches(draws, batch):
        x = t + np.sqrt(sigma2) * rng.standard_normal((size, t.size))
        cols = [x]
        for _ in range(max(KL, KM)):
            cols.append(cols[-1] @ g.adj.T)
        K = np.stack(cols, axis=2)
        acc.add(np.einsum("bip,ij,bjq->bpq", K[:, :, : KL + 1], C, K[:, :, : KM + 1]))
    return acc.report()


def mc_dense_power_check(g: Graph, attach, direction, k_max: int):
    """Dense ``S^k`` by repeated multiplication for ``k = 0..k_max``."""
    S = _dense_expansions(g.adj, np.asarray(attach, dtype=float)[None, :], direction)[0]
    out = [np.eye(g.n + 1)]
    for _ in range(k_max):
        out.append(out[-1] @ S)
    return out
