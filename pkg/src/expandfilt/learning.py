"""Regularised ERM for the filter bank: closed-form solves, descent fallback, CV."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .exceptions import ConditioningError, InputError, NumericalError
from .filters import ExpandedSignal, FilterBank
from .moments import DirichletPair, MomentAssembler, NoisyTarget, QuadraticModel, SampleMask

log = logging.getLogger(__name__)

DENOISE = "denoise"
SSL = "ssl"
TASKS = (DENOISE, SSL)

# Diagonal jitter (relative to the largest diagonal entry) allowed in the PSD check.
PSD_JITTER = 1e-10


@dataclass(frozen=True)
class RegularizerWeights:
    """``gamma > 0`` trades fit against regularisation; ``alpha``/``beta`` in (0, 1)
    split the coefficient and smoothness penalties between the two filters."""

    gamma: float
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise InputError(f"gamma must be > 0, got {self.gamma}")
        if not 0 < self.alpha < 1:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.beta < 1:
            raise InputError(f"beta must lie in (0, 1), got {self.beta}")

    def to_dict(self):
        return {"gamma": self.gamma, "alpha": self.alpha, "beta": self.beta}


@dataclass(eq=False)
class TrainingSample:
    """One incoming-node realisation.

    ``signal`` is what the filter sees; ``target`` holds the clean signal and
    the noise variance. ``b`` and ``a`` are the realised attachments, used
    only by methods that are allowed to know the connectivity.
    """

    signal: ExpandedSignal
    target: NoisyTarget
    mask: SampleMask
    b: np.ndarray | None = None
    a: np.ndarray | None = None


@dataclass(eq=False)
class TrainingSet:
    samples: list
    L: int
    M: int

    def __post_init__(self):
        if not self.samples:
            raise InputError("training set is empty")
        n = self.samples[0].target.n
        for s in self.samples:
            if s.target.n != n or s.signal.n != n or s.mask.n != n:
                raise InputError("inconsistent node counts across training samples")

    def __len__(self):
        return len(self.samples)

    @property
    def n(self) -> int:
        return self.samples[0].target.n

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet([self.samples[i] for i in idx], self.L, self.M)


def penalty_matrix(reg: RegularizerWeights, L: int, M: int) -> np.ndarray:
    """``diag(I/(2 alpha), I/(2 (1 - alpha)))``."""
    return np.diag(np.concatenate([np.full(L + 1, 0.5 / reg.alpha), np.full(M + 1, 0.5 / (1 - reg.alpha))]))


def dirichlet_matrix(reg: RegularizerWeights, dirichlet: DirichletPair) -> np.ndarray:
    """Block-diagonal ``diag(psi_in/(2 beta), psi_out/(2 (1 - beta)))``."""
    return linalg.block_diag(dirichlet.psi_in * (0.5 / reg.beta), dirichlet.psi_out * (0.5 / (1 - reg.beta)))


def average_quadratic(ts: TrainingSet, g, stats, task: str = DENOISE):
    """Average the per-sample closed-form quadratic models over a training set.

    Args:
        ts: training samples.
        g: existing graph.
        stats: ``(stats_in, stats_out)`` shared by all samples, or a callable
            mapping a sample to its own pair (known-connectivity baselines).
        task: ``"denoise"`` returns a :class:`QuadraticModel`; ``"ssl"``
            returns ``(QuadraticModel, DirichletPair)``.
    """
    if task not in TASKS:
        raise InputError(f"unknown task {task!r}")
    if len(ts) == 0:
        raise InputError("training set is empty")
    quads, pairs = build_sample_models(ts, g, stats, with_dirichlet=(task == SSL))
    qm = QuadraticModel.average(quads)
    if task == SSL:
        return qm, DirichletPair.average(pairs)
    return qm


def build_sample_models(ts: TrainingSet, g, stats, with_dirichlet=False):
    """Per-sample ``QuadraticModel`` (and ``DirichletPair``) lists."""
    cache = {}
    quads, pairs = [], []
    for s in ts.samples:
        st_in, st_out = stats(s) if callable(stats) else stats
        key = s.mask.existing.tobytes()
        asm = cache.get(key)
        if asm is None:
            asm = cache[key] = MomentAssembler(g, st_in, st_out, ts.L, ts.M, s.mask.existing)
        elif callable(stats):
            asm = asm.with_stats(st_in, st_out)
        quads.append(asm.quadratic(s.target, s.mask.d_plus))
        if with_dirichlet:
            pairs.append(asm.dirichlet(s.target))
    return quads, pairs


def _split(h, L):
    return h[: L + 1], h[L + 1 :]


def denoising_objective(h, qm: QuadraticModel, reg: RegularizerWeights) -> float:
    h = np.asarray(h, dtype=float)
    h_in, h_out = _split(h, qm.L)
    return (qm.mse(h) / (2 * reg.gamma)
            + (h_in @ h_in) / (2 * reg.alpha)
            + (h_out @ h_out) / (2 * (1 - reg.alpha)))


def denoising_gradient(h, qm: QuadraticModel, reg: RegularizerWeights) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    delta = 0.5 * (qm.delta + qm.delta.T)
    return (delta @ h - qm.theta) / reg.gamma + 2 * penalty_matrix(reg, qm.L, qm.M) @ h


def ssl_objective(h, qm: QuadraticModel, dirichlet: DirichletPair, reg: RegularizerWeights) -> float:
    h = np.asarray(h, dtype=float)
    omega = dirichlet_matrix(reg, dirichlet)
    lam = penalty_matrix(reg, qm.L, qm.M)
    return qm.mse(h) / (2 * reg.gamma) + h @ lam @ h + h @ omega @ h


def ssl_gradient(h, qm: QuadraticModel, dirichlet: DirichletPair, reg: RegularizerWeights) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    omega = dirichlet_matrix(reg, dirichlet)
    return denoising_gradient(h, qm, reg) + (omega + omega.T) @ h


def system_matrix(qm: QuadraticModel, reg: RegularizerWeights, dirichlet: DirichletPair | None = None) -> np.ndarray:
    """Symmetrised matrix ``S`` of the stationarity condition ``S h = theta``.

    Denoising: ``delta + 2 gamma Lambda``. SSL adds ``gamma (Omega + Omega^T)``,
    which is what differentiating the SSL objective gives.
    """
    S = 0.5 * (qm.delta + qm.delta.T) + 2 * reg.gamma * penalty_matrix(reg, qm.L, qm.M)
    if dirichlet is not None:
        omega = dirichlet_matrix(reg, dirichlet)
        S = S + reg.gamma * (omega + omega.T)
    return 0.5 * (S + S.T)


def psd_factor(S):
    """Cholesky factor of ``S`` (with the allowed jitter) or ``None`` if not PD."""
    if not np.all(np.isfinite(S)):
        raise ConditioningError("system matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(np.diag(S)))))
    for jitter in (0.0, PSD_JITTER * scale):
        try:
            return linalg.cho_factor(S + jitter * np.eye(S.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    return None


def _closed_form(S, theta):
    factor = psd_factor(S)
    if factor is None:
        return None
    h = linalg.cho_solve(factor, theta, check_finite=False)
    if not np.all(np.isfinite(h)):
        raise ConditioningError("closed-form solve produced non-finite coefficients")
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= np.finfo(float).eps * diag.max() * 1e-2:
        raise ConditioningError(
            f"system is numerically singular: Cholesky pivot ratio {diag.min() / diag.max():.3e}")
    return h


@dataclass
class DescentResult:
    h: np.ndarray
    value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def descent_fallback(objective: Callable, gradient: Callable, h0, step_rule: str = "armijo",
                     max_iters: int = 20000, tol: float = 1e-10, initial_step: float = 1.0,
                     armijo: float = 1e-4, max_halvings: int = 60) -> DescentResult:
    """Gradient descent with backtracking (halving) line search.

    A step is accepted on sufficient decrease of the objective. Once that
    decrease is below the rounding of ``f`` the test cannot tell steps apart,
    and a step is accepted if the directional derivative at the candidate
    still points downhill (the step stops short of the line minimum).

    Stops when ``||grad|| < tol * (1 + ||grad_0||)``, when no step qualifies
    in that regime (working precision reached), or after ``max_iters``. ``step_rule="armijo"`` tries ``initial_step`` at every
    iteration; ``"bb"`` starts each line search from the Barzilai-Borwein step.

    Raises:
        NumericalError: the objective became non-finite, or no step in a full
            backtracking sweep decreased it while it was still resolvable.
    """
    if step_rule not in ("armijo", "bb"):
        raise InputError(f"unknown step rule {step_rule!r}")
    h = np.array(h0, dtype=float)
    f = float(objective(h))
    g = np.asarray(gradient(h), dtype=float)
    if not np.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    step0 = initial_step
    prev = None
    floor = 16 * np.finfo(float).eps
    g_scale = 1.0 + float(np.linalg.norm(g))
    # overflow is detected explicitly below, so numpy need not warn about it
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(max_iters + 1):
            gnorm = float(np.linalg.norm(g))
            if gnorm < tol * g_scale:
                return DescentResult(h, f, it, True)
            if it == max_iters:
                break
            if step_rule == "bb" and prev is not None:
                s, yv = h - prev[0], g - prev[1]
                sy = float(s @ yv)
                step0 = float(s @ s) / sy if sy > 0 else initial_step
            step = step0
            unresolved = False
            for _ in range(max_halvings):
                cand = h - step * g
                fc = float(objective(cand))
                if np.isfinite(fc):
                    if fc <= f - armijo * step * gnorm**2:
                        gc = np.asarray(gradient(cand), dtype=float)
                        break
                    slack = floor * (1 + abs(f))
                    if armijo * step * gnorm**2 < slack and fc <= f + slack:
                        unresolved = True
                        gc = np.asarray(gradient(cand), dtype=float)
                        # still short of the minimum along -g
                        if float(gc @ g) >= 0:
                            break
                step *= 0.5
            else:
                if unresolved:
                    return DescentResult(h, f, it, True)
                if not np.isfinite(fc):
                    raise NumericalError(f"objective diverged at iteration {it} (value {fc})")
                raise NumericalError(
                    f"no descent step found at iteration {it}: objective {f:.6e}, gradient norm {gnorm:.3e}")
            if not np.all(np.isfinite(gc)):
                raise NumericalError(f"gradient became non-finite at iteration {it}")
            prev = (h, g)
            h, f, g = cand, fc, gc
    log.warning("descent stopped after %d iterations without meeting tolerance", max_iters)
    return DescentResult(h, f, max_iters, False)


def solve_denoising(qm: QuadraticModel, reg: RegularizerWeights, **descent_kw) -> FilterBank:
    """Minimiser of the denoising objective; closed form when the system is PD."""
    S = system_matrix(qm, reg)
    h = _closed_form(S, qm.theta)
    solver = "cholesky"
    if h is None:
        log.info("system matrix not PD; falling back to gradient descent")
        res = descent_fallback(lambda v: denoising_objective(v, qm, reg),
                               lambda v: denoising_gradient(v, qm, reg),
                               np.zeros(qm.size), **descent_kw)
        h, solver = res.h, "descent"
    return FilterBank.from_stacked(h, qm.L, {"solver": solver, **reg.to_dict()})


def solve_ssl(qm: QuadraticModel, dirichlet: DirichletPair, reg: RegularizerWeights, **descent_kw) -> FilterBank:
    """Minimiser of the SSL objective (label fit plus coefficient and smoothness penalties)."""
    S = system_matrix(qm, reg, dirichlet)
    h = _closed_form(S, qm.theta)
    solver = "cholesky"
    if h is None:
        log.info("system matrix not PD; falling back to gradient descent")
        res = descent_fallback(lambda v: ssl_objective(v, qm, dirichlet, reg),
                               lambda v: ssl_gradient(v, qm, dirichlet, reg),
                               np.zeros(qm.size), **descent_kw)
        h, solver = res.h, "descent"
    return FilterBank.from_stacked(h, qm.L, {"solver": solver, **reg.to_dict()})


# ---------------------------------------------------------------- cross-validation

GAMMA_GRID = tuple(float(v) for v in np.logspace(-3, 1, 7))
MIX_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def default_grid(task: str = DENOISE, gammas=GAMMA_GRID, alphas=MIX_GRID, betas=MIX_GRID):
    """gamma log-spaced in [1e-3, 10]; alpha (and beta for SSL) on a 0.2 grid."""
    if task == DENOISE:
        betas = (0.5,)
    return [RegularizerWeights(g, a, b) for g in gammas for a in alphas for b in betas]


def fold_indices(n_samples: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then cut into ``folds`` contiguous chunks."""
    if folds < 2:
        raise InputError("need at least 2 folds")
    if n_samples < folds:
        raise InputError(f"{n_samples} samples cannot be split into {folds} folds")
    perm = rng.permutation(n_samples)
    return [np.sort(c) for c in np.array_split(perm, folds)]


def select_best(grid: Sequence[RegularizerWeights], scores, rtol=1e-12) -> int:
    """Index of the lowest score; ties go to larger gamma, then alpha and beta nearest 0.5."""
    scores = np.asarray(scores, dtype=float)
    finite = np.isfinite(scores)
    if not finite.any():
        raise NumericalError("every grid point failed during cross-validation")
    best = np.min(scores[finite])
    tied = [i for i in range(len(grid)) if finite[i] and scores[i] <= best + rtol * max(1.0, abs(best))]
    return min(tied, key=lambda i: (-grid[i].gamma, abs(grid[i].alpha - 0.5), abs(grid[i].beta - 0.5)))


@dataclass
class CVResult:
    best: RegularizerWeights
    grid: list
    mean_scores: np.ndarray
    fold_scores: np.ndarray

    def trace_rows(self):
        for reg, score in zip(self.grid, self.mean_scores):
            yield {**reg.to_dict(), "mean_metric": float(score)}


def run_cv(n_samples: int, grid, folds: int, rng: np.random.Generator, score_fold: Callable) -> CVResult:
    """Generic K-fold driver.

    ``score_fold(fold, train_idx, val_idx, grid)`` returns one validation
    metric per grid point (``nan``/``inf`` marks a failed fit).
    """
    grid = list(grid)
    if not grid:
        raise InputError("grid is empty")
    splits = fold_indices(n_samples, folds, rng)
    scores = np.empty((folds, len(grid)))
    for k, val in enumerate(splits):
        train = np.sort(np.concatenate([s for j, s in enumerate(splits) if j != k]))
        scores[k] = score_fold(k, train, val, grid)
    with np.errstate(invalid="ignore"):
        mean = np.where(np.all(np.isfinite(scores), axis=0), scores.mean(axis=0), np.inf)
    return CVResult(grid[select_best(grid, mean)], grid, mean, scores)


def expected_nmse(h, quads) -> float:
    """Sum of model MSEs over the sum of target energies."""
    num = sum(q.mse(h) for q in quads)
    den = sum(q.constant for q in quads)
    return num / den if den > 0 else np.inf


def cross_validate(ts: TrainingSet, g, stats, grid=None, folds: int = 5, task: str = DENOISE,
                   rng: np.random.Generator | None = None) -> CVResult:
    """Pick regulariser weights by K-fold CV on the closed-form models.

    The validation metric is the model-expected NMSE of the held-out
    samples, which needs only the attachment statistics. For SSL, the
    validation metric adds nothing label-specific; experiment drivers pass
    their own scorer through :func:`run_cv` for label hold-out.
    """
    if task not in TASKS:
        raise InputError(f"unknown task {task!r}")
    grid = default_grid(task) if grid is None else list(grid)
    rng = np.random.default_rng() if rng is None else rng
    quads, pairs = build_sample_models(ts, g, stats, with_dirichlet=(task == SSL))

    def score(_k, train, val, grid):
        qm = QuadraticModel.average([quads[i] for i in train])
        dp = DirichletPair.average([pairs[i] for i in train]) if task == SSL else None
        val_q = [quads[i] for i in val]
        out = np.empty(len(grid))
        for j, reg in enumerate(grid):
            try:
                bank = solve_ssl(qm, dp, reg) if task == SSL else solve_denoising(qm, reg)
                out[j] = expected_nmse(bank.stacked, val_q)
            except (ConditioningError, NumericalError):
                out[j] = np.inf
        return out

    return run_cv(len(ts), grid, folds, rng, score)
