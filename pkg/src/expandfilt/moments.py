"""Closed-form attachment expectations of the filter-bank quadratics.

Notation used in names below (``K`` stands for either filter order):

* ``Kt = [t, A t, ..., A^K t]`` and ``Kbar_v = [0, v, ..., A^(K-1) v]``;
* ``P_K = [I, A, ..., A^K]`` and ``Pbar_K = [0, I, ..., A^(K-1)]`` stacked
  horizontally (``n x (K+1) n``);
* ``blktr(Z, Y)[i, j] = tr(Y Z_ij)`` over the ``n x n`` blocks of ``Z``.

Every addend of the mean-squared-error model and of the expected Dirichlet
energies is produced as a separately named term so a mismatch against the
Monte-Carlo oracle can be traced to a single term. Powers of ``A`` enter
through ``P_K^T C P_K`` so the assembly is valid for directed graphs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .attachment import MomentStatistics
from .exceptions import InputError
from .graph import Graph, krylov_matrix

DELTA_BLOCKS = ("delta11", "delta12", "delta22")


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SampleMask:
    """0/1 selection over the ``n + 1`` expanded nodes (last entry: incoming node)."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 1 or d.size < 1 or not np.all((d == 0) | (d == 1)):
            raise InputError("mask entries must be 0 or 1")
        object.__setattr__(self, "d", _frozen(d))

    @property
    def n(self) -> int:
        return self.d.size - 1

    @property
    def existing(self) -> np.ndarray:
        return self.d[:-1]

    @property
    def d_plus(self) -> float:
        return float(self.d[-1])

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.existing)

    @classmethod
    def all_nodes(cls, n):
        return cls(np.ones(n + 1))

    @classmethod
    def from_parts(cls, existing, d_plus):
        return cls(np.append(np.asarray(existing, dtype=float), float(d_plus)))


@dataclass(frozen=True, eq=False)
class NoisyTarget:
    """True expanded signal ``[t; t_plus]`` observed with i.i.d. noise of variance ``sigma2``."""

    t: np.ndarray
    t_plus: float
    sigma2: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or not np.all(np.isfinite(t)) or not np.isfinite(self.t_plus):
            raise InputError("target must be finite")
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise InputError("noise variance must be finite and >= 0")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "t_plus", float(self.t_plus))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def stacked(self) -> np.ndarray:
        return np.append(self.t, self.t_plus)


@dataclass(eq=False)
class QuadraticModel:
    """``MSE(h) = h^T delta h - 2 h^T theta + constant``."""

    delta: np.ndarray
    theta: np.ndarray
    constant: float
    L: int
    M: int

    @property
    def size(self) -> int:
        return self.L + self.M + 2

    @property
    def delta11(self):
        return self.delta[: self.L + 1, : self.L + 1]

    @property
    def delta12(self):
        return self.delta[: self.L + 1, self.L + 1 :]

    @property
    def delta22(self):
        return self.delta[self.L + 1 :, self.L + 1 :]

    def mse(self, h) -> float:
        h = np.asarray(h, dtype=float)
        return float(h @ self.delta @ h - 2.0 * h @ self.theta + self.constant)

    @classmethod
    def average(cls, models):
        models = list(models)
        if not models:
            raise InputError("cannot average an empty list of quadratic models")
        first = models[0]
        return cls(
            np.mean([m.delta for m in models], axis=0),
            np.mean([m.theta for m in models], axis=0),
            float(np.mean([m.constant for m in models])),
            first.L,
            first.M,
        )


@dataclass(eq=False)
class DirichletPair:
    """Expected 2-Dirichlet energies ``h_in^T psi_in h_in`` and ``h_out^T psi_out h_out``."""

    psi_in: np.ndarray
    psi_out: np.ndarray

    @classmethod
    def average(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise InputError("cannot average an empty list of Dirichlet pairs")
        return cls(np.mean([p.psi_in for p in pairs], axis=0), np.mean([p.psi_out for p in pairs], axis=0))


def block_trace(Z, Y) -> np.ndarray:
    """``U[i, j] = tr(Y @ Z_ij)`` for the ``n x n`` blocks ``Z_ij`` of ``Z``."""
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
        raise InputError("Y must be square")
    n = Y.shape[0]
    if Z.ndim != 2 or n == 0 or Z.shape[0] % n or Z.shape[1] % n:
        raise InputError(f"Z shape {Z.shape} is not a multiple of block size {n}")
    p, q = Z.shape[0] // n, Z.shape[1] // n
    blocks = Z.reshape(p, n, q, n)
    return np.einsum("ab,ibja->ij", Y, blocks)


def stacked_powers(g: Graph, order: int, shifted: bool = False) -> np.ndarray:
    """``[I, A, ..., A^order]`` or, if ``shifted``, ``[0, I, ..., A^(order-1)]``."""
    n = g.n
    out = np.zeros((n, (order + 1) * n))
    power = np.eye(n)
    start = 1 if shifted else 0
    for k in range(start, order + 1):
        out[:, k * n : (k + 1) * n] = power
        power = g.adj @ power
    return out


def _shifted(g: Graph, x, order: int) -> np.ndarray:
    out = np.zeros((g.n, order + 1))
    if order >= 1:
        out[:, 1:] = krylov_matrix(g, x, order - 1)
    return out


def _e0(size: int, value: float = 1.0) -> np.ndarray:
    v = np.zeros(size)
    v[0] = value
    return v


def _sym(X):
    return 0.5 * (X + X.T)


def expected_gram(g: Graph, C, t, sigma2: float, orders) -> np.ndarray:
    """``E[L_x^T C M_x]`` for ``x = t + noise``, noise ``N(0, sigma2 I)``.

    Equals ``L_t^T C M_t + sigma2 * blktr(P_L^T C P_M, I)``; entry ``(i, j)``
    of the correction is ``sigma2 * tr((A^i)^T C A^j)``.
    """
    KL, KM = orders
    C = np.asarray(C, dtype=float)
    if C.shape != (g.n, g.n):
        raise InputError(f"C must be {g.n} x {g.n}")
    if sigma2 < 0:
        raise InputError("sigma2 must be >= 0")
    Lt = krylov_matrix(g, t, KL)
    Mt = krylov_matrix(g, t, KM)
    out = Lt.T @ C @ Mt
    if sigma2:
        PL = stacked_powers(g, KL)
        PM = stacked_powers(g, KM)
        out = out + sigma2 * block_trace(PL.T @ C @ PM, np.eye(g.n))
    return out


class MomentAssembler:
    """Builds the quadratic model and Dirichlet matrices for one graph.

    Target-independent pieces (stacked powers, the block traces against
    ``I`` and the attachment covariances) are computed once and reused for
    every training sample sharing the graph, the existing-node mask and the
    attachment moments.

    ``perturb`` maps term names to multipliers; it exists for fault-injection
    checks of the validation suite and should stay empty otherwise.
    """

    def __init__(self, g: Graph, stats_in: MomentStatistics, stats_out: MomentStatistics,
                 L: int, M: int, existing_mask=None, perturb=None):
        if L < 0 or M < 0:
            raise InputError("filter orders must be >= 0")
        n = g.n
        self.g = g
        self.L = L
        self.M = M
        d = np.ones(n) if existing_mask is None else np.asarray(existing_mask, dtype=float)
        if d.shape != (n,):
            raise InputError(f"existing mask must have length {n}")
        self.d_existing = d
        self.perturb = dict(perturb or {})

        D = np.diag(d)
        I = np.eye(n)
        self._PL, self._PM = stacked_powers(g, L), stacked_powers(g, M)
        self._PLbar = stacked_powers(g, L, shifted=True)
        self._PMbar = stacked_powers(g, M, shifted=True)
        self._I_minus_A = I - g.adj
        self.gamma = self._I_minus_A.T @ self._I_minus_A
        self.bt_LDL = block_trace(self._PL.T @ D @ self._PL, I)
        self.bt_LDM = block_trace(self._PL.T @ D @ self._PM, I)
        self.bt_MDM = block_trace(self._PM.T @ D @ self._PM, I)
        self._set_stats(stats_in, stats_out)

    def _set_stats(self, stats_in, stats_out):
        g, n = self.g, self.g.n
        for s in (stats_in, stats_out):
            if s.n != n:
                raise InputError(f"moment statistics have size {s.n}, graph has {n}")
        self.stats_in = stats_in
        self.stats_out = stats_out
        self.R_out = stats_out.second_moment
        cov = stats_in.sigma
        if np.any(cov):
            D = np.diag(self.d_existing)
            PLbar = self._PLbar
            self.bt_LbarDLbar_cov = block_trace(PLbar.T @ D @ PLbar, cov)
            self.bt_LbarGLbar_cov = block_trace(PLbar.T @ self.gamma @ PLbar, cov)
            self.bt_IALbar_cov = block_trace(self._I_minus_A @ PLbar, cov)[0]
        else:
            self.bt_LbarDLbar_cov = np.zeros((self.L + 1, self.L + 1))
            self.bt_LbarGLbar_cov = np.zeros((self.L + 1, self.L + 1))
            self.bt_IALbar_cov = np.zeros(self.L + 1)
        self._MbarRMbar = self._PMbar.T @ self.R_out @ self._PMbar
        self.bt_MbarRMbar_I = block_trace(self._MbarRMbar, np.eye(n))
        self.Lbar_mu = _shifted(g, stats_in.mu, self.L)

    def with_stats(self, stats_in: MomentStatistics, stats_out: MomentStatistics) -> "MomentAssembler":
        """Copy sharing the graph- and mask-dependent caches, with new attachment moments."""
        other = copy.copy(self)
        other._set_stats(stats_in, stats_out)
        return other

    def _check_target(self, target: NoisyTarget):
        if target.n != self.g.n:
            raise InputError(f"target has {target.n} existing nodes, graph has {self.g.n}")

    def _scale(self, name, value):
        return value * self.perturb[name] if name in self.perturb else value

    def delta_terms(self, target: NoisyTarget, d_plus: float) -> dict:
        """Named addends of the three blocks of the quadratic term."""
        self._check_target(target)
        g, L, M = self.g, self.L, self.M
        t, tp, s2 = target.t, target.t_plus, target.sigma2
        D = np.diag(self.d_existing)
        mu_out = self.stats_out.mu
        Lt, Mt = krylov_matrix(g, t, L), krylov_matrix(g, t, M)
        Mbar_t = _shifted(g, t, M)
        Lbar_mu = self.Lbar_mu
        x2 = tp**2 + s2
        tL, tM = _e0(L + 1, tp), _e0(M + 1, tp)
        T_LM = np.zeros((L + 1, M + 1))
        T_LM[0, 0] = x2
        Mbar_R = self.bt_MbarRMbar_I * s2 + block_trace(self._MbarRMbar, np.outer(t, t))

        terms = {
            "delta11.LtDLt": Lt.T @ D @ Lt,
            "delta11.noise": s2 * self.bt_LDL,
            "delta11.Lt_D_Lbarmu": tp * Lt.T @ D @ Lbar_mu,
            "delta11.Lbarmu_D_Lt": tp * Lbar_mu.T @ D @ Lt,
            "delta11.Lbarmu_D_Lbarmu": x2 * Lbar_mu.T @ D @ Lbar_mu,
            "delta11.cov_in": x2 * self.bt_LbarDLbar_cov,
            "delta11.incoming": d_plus * np.diag(_e0(L + 1, x2)),
            "delta12.LtDMt": Lt.T @ D @ Mt,
            "delta12.Lbarmu_D_Mt": tp * Lbar_mu.T @ D @ Mt,
            "delta12.noise": s2 * self.bt_LDM,
            "delta12.tL_muout_Mbart": d_plus * np.outer(tL, mu_out @ Mbar_t),
            "delta12.T_LM": d_plus * T_LM,
            "delta22.MtDMt": Mt.T @ D @ Mt,
            "delta22.noise": s2 * self.bt_MDM,
            "delta22.Rout": d_plus * Mbar_R,
            "delta22.Mbart_muout_tM": d_plus * np.outer(Mbar_t.T @ mu_out, tM),
            "delta22.tM_muout_Mbart": d_plus * np.outer(tM, mu_out @ Mbar_t),
            "delta22.incoming": d_plus * np.diag(_e0(M + 1, x2)),
        }
        return {k: self._scale(k, v) for k, v in terms.items()}

    def delta_blocks(self, target: NoisyTarget, d_plus: float) -> dict:
        blocks = {}
        for name, value in self.delta_terms(target, d_plus).items():
            key = name.split(".")[0]
            blocks[key] = blocks.get(key, 0) + value
        return blocks

    def delta(self, target: NoisyTarget, d_plus: float) -> np.ndarray:
        b = self.delta_blocks(target, d_plus)
        full = np.block([[b["delta11"], b["delta12"]], [b["delta12"].T, b["delta22"]]])
        return _sym(full)

    def theta_terms(self, target: NoisyTarget, d_plus: float) -> dict:
        self._check_target(target)
        g, L, M = self.g, self.L, self.M
        t, tp = target.t, target.t_plus
        Dt = self.d_existing * t
        Lt, Mt = krylov_matrix(g, t, L), krylov_matrix(g, t, M)
        Mbar_t = _shifted(g, t, M)
        terms = {
            "theta_in.krylov": (Lt + tp * self.Lbar_mu).T @ Dt,
            "theta_in.incoming": d_plus * tp * _e0(L + 1, tp),
            "theta_out.krylov": Mt.T @ Dt,
            "theta_out.matched": d_plus * tp * (Mbar_t.T @ self.stats_out.mu),
            "theta_out.incoming": d_plus * tp * _e0(M + 1, tp),
        }
        return {k: self._scale(k, v) for k, v in terms.items()}

    def theta(self, target: NoisyTarget, d_plus: float) -> np.ndarray:
        terms = self.theta_terms(target, d_plus)
        upper = sum(v for k, v in terms.items() if k.startswith("theta_in"))
        lower = sum(v for k, v in terms.items() if k.startswith("theta_out"))
        return np.concatenate([upper, lower])

    def constant(self, target: NoisyTarget, d_plus: float) -> float:
        """``||t_+||_D^2``; the noise never enters the target side."""
        return float(target.t @ (self.d_existing * target.t) + d_plus * target.t_plus**2)

    def quadratic(self, target: NoisyTarget, d_plus: float) -> QuadraticModel:
        return QuadraticModel(
            self.delta(target, d_plus),
            self.theta(target, d_plus),
            self.constant(target, d_plus),
            self.L,
            self.M,
        )

    def psi_in_terms(self, target: NoisyTarget, second_moment_norm=None) -> dict:
        """Addends of the expected Dirichlet energy over the incoming expansion.

        Noise-free: the input equals the target. ``second_moment_norm`` is
        ``E[b^T b]``; by default it is taken from the moments as
        ``tr(Sigma) + mu^T mu``.
        """
        self._check_target(target)
        g, L = self.g, self.L
        t, tp = target.t, target.t_plus
        mu = self.stats_in.mu
        Lt = krylov_matrix(g, t, L)
        Lhat = Lt + tp * self.Lbar_mu
        I_minus_A = np.eye(g.n) - g.adj
        if second_moment_norm is None:
            second_moment_norm = self.stats_in.expected_sq_norm
        # E[t_L b^T (I - A) Lhat_b]: rank one, e_0 times a row vector
        row = mu @ I_minus_A @ Lt + tp * (mu @ I_minus_A @ self.Lbar_mu + self.bt_IALbar_cov)
        cross = np.outer(_e0(L + 1, tp), row)
        terms = {
            "psi_in.mean_energy": Lhat.T @ self.gamma @ Lhat,
            "psi_in.cov_energy": tp**2 * self.bt_LbarGLbar_cov,
            "psi_in.cross": -(cross + cross.T),
            "psi_in.incoming": (second_moment_norm + 1.0) * np.diag(_e0(L + 1, tp**2)),
        }
        return {k: self._scale(k, v) for k, v in terms.items()}

    def psi_in(self, target: NoisyTarget, second_moment_norm=None) -> np.ndarray:
        return _sym(sum(self.psi_in_terms(target, second_moment_norm).values()))

    def psi_out_terms(self, target: NoisyTarget) -> dict:
        self._check_target(target)
        g, M = self.g, self.M
        t, tp = target.t, target.t_plus
        mu, R = self.stats_out.mu, self.R_out
        Mt, Mbar_t = krylov_matrix(g, t, M), _shifted(g, t, M)
        tM = _e0(M + 1, tp)
        left = Mt.T @ R @ Mbar_t + np.outer(Mt.T @ mu, tM)
        matched = np.outer(Mbar_t.T @ mu, tM)
        terms = {
            "psi_out.base": Mt.T @ (self.gamma + R) @ Mt,
            "psi_out.cross_left": -left,
            "psi_out.cross_right": -left.T,
            "psi_out.matched": Mbar_t.T @ R @ Mbar_t,
            "psi_out.matched_cross": matched + matched.T,
            "psi_out.incoming": np.outer(tM, tM),
        }
        return {k: self._scale(k, v) for k, v in terms.items()}

    def psi_out(self, target: NoisyTarget) -> np.ndarray:
        return _sym(sum(self.psi_out_terms(target).values()))

    def dirichlet(self, target: NoisyTarget) -> DirichletPair:
        return DirichletPair(self.psi_in(target), self.psi_out(target))


def _assembler(g, mask, stats_in, stats_out, orders):
    L, M = orders
    existing = None if mask is None else mask.existing
    if mask is not None and mask.n != g.n:
        raise InputError(f"mask covers {mask.n} existing nodes, graph has {g.n}")
    return MomentAssembler(g, stats_in, stats_out, L, M, existing)


def build_delta(g: Graph, target: NoisyTarget, mask: SampleMask, stats_in, stats_out, orders) -> np.ndarray:
    return _assembler(g, mask, stats_in, stats_out, orders).delta(target, mask.d_plus)


def build_theta(g: Graph, target: NoisyTarget, mask: SampleMask, stats_in, stats_out, orders) -> np.ndarray:
    return _assembler(g, mask, stats_in, stats_out, orders).theta(target, mask.d_plus)


def build_quadratic(g: Graph, target: NoisyTarget, mask: SampleMask, stats_in, stats_out, orders) -> QuadraticModel:
    return _assembler(g, mask, stats_in, stats_out, orders).quadratic(target, mask.d_plus)


def build_psi_in(g: Graph, target: NoisyTarget, stats_in: MomentStatistics, L: int,
                 weights=None, probs=None) -> np.ndarray:
    """Incoming-side Dirichlet matrix.

    With ``weights`` and ``probs`` given, ``E[b^T b]`` is taken as
    ``sum(w**2 * p)``, exact for independent Bernoulli edges; otherwise it
    comes from the moments.
    """
    zero = MomentStatistics(np.zeros(g.n), np.zeros((g.n, g.n)))
    asm = MomentAssembler(g, stats_in, zero, L, 0)
    sq = None
    if weights is not None and probs is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=float), (g.n,))
        sq = float(np.sum(w**2 * np.asarray(probs, dtype=float)))
    return asm.psi_in(target, sq)


def build_psi_out(g: Graph, target: NoisyTarget, stats_out: MomentStatistics, M: int) -> np.ndarray:
    zero = MomentStatistics(np.zeros(g.n), np.zeros((g.n, g.n)))
    return MomentAssembler(g, zero, stats_out, 0, M).psi_out(target)
