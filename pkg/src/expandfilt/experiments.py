"""Experiment drivers behind the command-line interface.

Configuration is a flat JSON object; every key has a default (see
``DEFAULTS``) and unknown keys are rejected. Randomness flows from one
master seed through named, independent streams so that, for example, the
oracle never shares draws with training.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attachment import (MomentStatistics, analytic_bernoulli_moments, bernoulli_model, deterministic_moments, estimate_moments,
                         median_edge_weight, preferential_model, sample_attachments, uniform_model)
from .baselines import (METHODS, SingleFilterQuadratic, apply_single, it_quadratics, kc1_quadratics, known_stats,
                        solve_single)
from .datasets import (DenoisingInstance, DenoisingSample, SSLInstance, generate_ba, labelled_flags, load_external, make_denoising_instance,
                       make_ssl_instance, noise_variance, sensor_graph, spectral_bipartition,
                       two_clique_graph, write_signal_csv)
from .exceptions import ConditioningError, InputError, NumericalError
from .filters import ExpandedSignal, FilterBank, apply_bank
from .graph import (INCOMING, OUTGOING, Graph, combined_expansion, expand, expanded_power, krylov_matrix,
                    write_edge_list)
from .learning import (DENOISE, SSL, RegularizerWeights, TrainingSample, TrainingSet, build_sample_models,
                       default_grid, expected_nmse, run_cv, solve_denoising, solve_ssl)
from .moments import DirichletPair, MomentAssembler, NoisyTarget, QuadraticModel, SampleMask, expected_gram
from .oracle import mc_dense_power_check, mc_dirichlet_matrices, mc_expected_gram, mc_moment_matrices

log = logging.getLogger(__name__)

VALIDATE = "validate"
GEN_DATA = "gen-data"
GAMMAS = [float(v) for v in np.logspace(-3, 1, 7)]
MIXES = [0.1, 0.3, 0.5, 0.7, 0.9]

DEFAULTS = {
    "task": DENOISE,
    "seed": 0,
    "graph": None,  # "ba" for denoise, "sensor" for ssl, or "two_clique" / "external"
    "n": None,
    "ba_m": 2,
    "knn_k": 6,
    "clique_size": 10,
    "edge_list": None,
    "signal_csv": None,
    "normalize_shift": True,
    "attach_in": "uniform",
    "attach_out": "preferential",
    "budget": "median",
    "weight": "median",
    "moment_samples": 10000,
    "moments": "estimated",
    "L": 4,
    "M": 4,
    "K": 4,
    "snr_db": [5.0, 10.0, 20.0],
    "bandwidth": 10,
    "realizations": None,
    "train_fraction": 0.7,
    "folds": 5,
    "gammas": GAMMAS,
    "alphas": MIXES,
    "betas": MIXES,
    "test_realizations": 100,
    "test_resample": "both",
    "label_fraction": 0.1,
    "incoming_fractions": [1.0, 0.5],
    "methods": list(METHODS),
    "validation_n": 8,
    "validation_order": 2,
    "validation_draws": 1_000_000,
    "validation_sigma2": 0.1,
    "validation_scheme": "bernoulli",
    "validation_threshold": 4.0,
    "corrupt_term": None,
}

TASK_DEFAULTS = {
    DENOISE: {"graph": "ba", "n": 50, "realizations": 200},
    SSL: {"graph": "sensor", "n": 100, "realizations": 200},
}
FULL_SCALE = {
    DENOISE: {"n": 100, "realizations": 1000},
    SSL: {"n": 200, "realizations": 500},
}
TASK_CHOICES = (DENOISE, SSL, VALIDATE, GEN_DATA)

# Named seed domains; the integer is the spawn key, never reuse one.
STREAMS = {"graph": 1, "moments": 2, "instance": 3, "split": 4, "cv": 5, "test": 6, "labels": 7,
           "oracle": 8, "validation_graph": 9, "flags": 10}


class ConfigError(InputError):
    pass


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *extra)))


def read_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def load_config(path=None, overrides=None, full_scale: bool = False) -> dict:
    """Merge file keys and overrides (``None`` values ignored) over the defaults and validate."""
    raw = read_config_file(path) if path is not None else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve_config(raw, full_scale)


def resolve_config(raw: dict, full_scale: bool = False) -> dict:
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {**DEFAULTS, **raw}
    task = cfg["task"]
    if task not in TASK_CHOICES:
        raise ConfigError(f"task must be one of {TASK_CHOICES}, got {task!r}")
    base = TASK_DEFAULTS.get(task, TASK_DEFAULTS[DENOISE])
    for k, v in base.items():
        if cfg[k] is None:
            cfg[k] = v
    if full_scale:
        cfg.update(FULL_SCALE.get(task, {}))
    _validate(cfg)
    return cfg


def _validate(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    ints = ("n", "ba_m", "knn_k", "clique_size", "moment_samples", "L", "M", "K", "bandwidth", "realizations",
            "folds", "test_realizations", "validation_n", "validation_order", "validation_draws")
    for k in ints:
        need(isinstance(cfg[k], int) and not isinstance(cfg[k], bool), f"{k} must be an integer")
    need(isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2**64, "seed must be an unsigned 64-bit integer")
    for k in ("L", "M", "K"):
        need(cfg[k] >= 0, f"{k} must be >= 0")
    need(0 < cfg["train_fraction"] < 1, "train_fraction must lie in (0, 1)")
    need(cfg["folds"] >= 2, "folds must be >= 2")
    need(cfg["moment_samples"] >= 2, "moment_samples must be >= 2")
    need(cfg["realizations"] >= 2, "realizations must be >= 2")
    need(cfg["test_realizations"] >= 1, "test_realizations must be >= 1")
    need(cfg["graph"] in ("ba", "sensor", "two_clique", "external"), f"unknown graph {cfg['graph']!r}")
    need(cfg["attach_in"] in ("uniform", "preferential"), "attach_in must be uniform or preferential")
    need(cfg["attach_out"] in ("uniform", "preferential"), "attach_out must be uniform or preferential")
    need(cfg["budget"] == "median" or (isinstance(cfg["budget"], int) and cfg["budget"] >= 1),
         "budget must be 'median' or a positive integer")
    need(cfg["weight"] == "median" or (isinstance(cfg["weight"], (int, float)) and cfg["weight"] >= 0),
         "weight must be 'median' or a non-negative number")
    need(cfg["moments"] in ("estimated", "known"), "moments must be 'estimated' or 'known'")
    need(cfg["test_resample"] in ("noise", "both"), "test_resample must be 'noise' or 'both'")
    need(isinstance(cfg["snr_db"], list) and cfg["snr_db"], "snr_db must be a non-empty list")
    for s in cfg["snr_db"]:
        need(s == "inf" or isinstance(s, (int, float)), "snr_db entries must be numbers or 'inf'")
    need(0 < cfg["label_fraction"] <= 1, "label_fraction must lie in (0, 1]")
    need(isinstance(cfg["incoming_fractions"], list) and cfg["incoming_fractions"]
         and all(f in (0.5, 1.0) for f in cfg["incoming_fractions"]), "incoming_fractions must be drawn from {1.0, 0.5}")
    need(isinstance(cfg["methods"], list) and cfg["methods"] and set(cfg["methods"]) <= set(METHODS),
         f"methods must be a non-empty subset of {METHODS}")
    for k in ("gammas", "alphas", "betas"):
        need(isinstance(cfg[k], list) and cfg[k], f"{k} must be a non-empty list")
    need(all(g > 0 for g in cfg["gammas"]), "gammas must be > 0")
    need(all(0 < a < 1 for a in cfg["alphas"] + cfg["betas"]), "alphas and betas must lie in (0, 1)")
    need(cfg["validation_scheme"] in ("bernoulli", "deterministic"), "validation_scheme must be bernoulli or deterministic")
    need(cfg["validation_sigma2"] >= 0, "validation_sigma2 must be >= 0")
    need(cfg["validation_draws"] >= 100, "validation_draws must be >= 100")
    need(cfg["validation_n"] >= 2, "validation_n must be >= 2")
    if cfg["graph"] == "external":
        for k in ("edge_list", "signal_csv"):
            need(cfg[k] is not None and Path(cfg[k]).is_file(), f"{k} must name an existing file")
    need(cfg["graph"] != "ba" or cfg["n"] > cfg["ba_m"], "n must exceed ba_m")
    need(cfg["graph"] != "sensor" or cfg["n"] > cfg["knn_k"], "n must exceed knn_k")


def config_hash(cfg: dict) -> str:
    """Short digest of every resolved key except the seed."""
    body = {k: v for k, v in cfg.items() if k != "seed"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _snr(v) -> float:
    return math.inf if v == "inf" else float(v)


# ------------------------------------------------------------------ metrics

def nmse(y_hat, t) -> float:
    """``||y - t||^2 / ||t||^2``."""
    y_hat, t = np.asarray(y_hat, dtype=float), np.asarray(t, dtype=float)
    if y_hat.shape != t.shape:
        raise InputError("prediction and target shapes differ")
    den = float(t @ t)
    if den == 0:
        raise InputError("NMSE undefined for a zero target")
    return float((y_hat - t) @ (y_hat - t)) / den


def nmse_plus(y_hat, t) -> float:
    """NMSE of the last (incoming-node) entry only."""
    y_hat, t = np.asarray(y_hat, dtype=float), np.asarray(t, dtype=float)
    if y_hat.shape != t.shape:
        raise InputError("prediction and target shapes differ")
    return nmse(y_hat[-1:], t[-1:])


def ssl_error(y_hat, labels, evaluate=None) -> float:
    """Percentage of evaluated nodes whose sign disagrees with the label (sign 0 counts as +1)."""
    y_hat, labels = np.asarray(y_hat, dtype=float), np.asarray(labels, dtype=float)
    if y_hat.shape != labels.shape:
        raise InputError("prediction and label shapes differ")
    sel = np.ones(labels.size, bool) if evaluate is None else np.asarray(evaluate, bool)
    if not sel.any():
        raise InputError("no nodes to evaluate")
    pred = np.where(y_hat[sel] >= 0, 1.0, -1.0)
    return 100.0 * float(np.mean(pred != labels[sel]))


# ------------------------------------------------------------------ shared setup

@dataclass
class Setup:
    graph: Graph
    model_in: object
    model_out: object
    stats_in: MomentStatistics
    stats_out: MomentStatistics
    info: dict = field(default_factory=dict)


def _base_graph(cfg, rng):
    kind = cfg["graph"]
    if kind == "ba":
        g = generate_ba(cfg["n"], cfg["ba_m"], rng)
    elif kind == "sensor":
        g = sensor_graph(cfg["n"], cfg["knn_k"], rng)
    elif kind == "two_clique":
        g = two_clique_graph(cfg["clique_size"])
    else:
        g, _, _ = load_external(cfg["edge_list"], cfg["signal_csv"], expanded=cfg["task"] == DENOISE)
    return g


def _models(cfg, g):
    w = median_edge_weight(g) if cfg["weight"] == "median" else float(cfg["weight"])
    if cfg["budget"] == "median":
        m = max(1, int(round(float(np.median(g.neighbour_counts())))))
    else:
        m = int(cfg["budget"])
    m = min(m, g.n)

    def build(kind):
        return uniform_model(g.n, m, w) if kind == "uniform" else preferential_model(g, m, w)

    return build(cfg["attach_in"]), build(cfg["attach_out"]), {"budget": m, "weight": w}


def prepare(cfg) -> Setup:
    g = _base_graph(cfg, stream(cfg["seed"], "graph"))
    if cfg["normalize_shift"]:
        g = g.normalized()
    model_in, model_out, info = _models(cfg, g)
    rng = stream(cfg["seed"], "moments")
    st_in = estimate_moments(model_in, cfg["moment_samples"], rng)
    st_out = estimate_moments(model_out, cfg["moment_samples"], rng)
    info.update({"n": g.n, "edges": int(np.count_nonzero(g.adj)), "moments_in": st_in.checksum(),
                 "moments_out": st_out.checksum()})
    return Setup(g, model_in, model_out, st_in, st_out, info)


def split_indices(count: int, train_fraction: float, rng):
    perm = rng.permutation(count)
    k = int(round(train_fraction * count))
    if not 0 < k < count:
        raise ConfigError("train/test split leaves an empty side")
    return np.sort(perm[:k]), np.sort(perm[k:])


def bank_operator(g: Graph, b, a, bank: FilterBank) -> np.ndarray:
    """Dense ``(n+1) x (n+1)`` linear map of the bank on a realised expansion."""
    F = np.zeros((g.n + 1, g.n + 1))
    for direction, attach, h in ((INCOMING, b, bank.h_in), (OUTGOING, a, bank.h_out)):
        e = expand(g, direction, attach)
        for k, hk in enumerate(h):
            F += hk * expanded_power(e, k)
    return F


def single_operator(S, h) -> np.ndarray:
    F = np.zeros_like(S)
    P = np.eye(S.shape[0])
    for k, hk in enumerate(h):
        if k:
            P = S @ P
        F += hk * P
    return F


@dataclass
class MethodOutcome:
    method: str
    setting: str
    metrics: dict = field(default_factory=dict)  # name -> (mean, std)
    best: dict | None = None
    filters: dict | None = None
    trace: list = field(default_factory=list)
    status: str = "ok"


def _grid(cfg, task):
    return default_grid(task, cfg["gammas"], cfg["alphas"], cfg["betas"])


def _gamma_grid(cfg):
    return [RegularizerWeights(g, 0.5, 0.5) for g in cfg["gammas"]]


def _guard(name, setting, fn):
    """Run one method; numerical trouble is recorded instead of propagating."""
    try:
        return fn()
    except (ConditioningError, NumericalError) as exc:
        log.warning("%s (%s) failed: %s", name, setting, exc)
        return MethodOutcome(name, setting, status=f"failed: {exc}")


# ------------------------------------------------------------------ denoising

def _denoise_training(inst, idx):
    samples = []
    for i in idx:
        s = inst.samples[i]
        samples.append(TrainingSample(ExpandedSignal.from_stacked(s.x_plus),
                                      NoisyTarget(s.t_plus[:-1], s.t_plus[-1], s.sigma2),
                                      SampleMask.all_nodes(inst.graph.n), s.b, s.a))
    return samples


def _single_cv(quads, cfg, rng, train_count):
    """Gamma-only CV for single-filter methods on precomputed quadratics."""
    grid = _gamma_grid(cfg)

    def score(_k, tr, va, grid):
        q = SingleFilterQuadratic.average([quads[i] for i in tr])
        vq = [quads[i] for i in va]
        den = sum(v.constant for v in vq)
        out = np.empty(len(grid))
        for j, reg in enumerate(grid):
            try:
                h = solve_single(q, reg.gamma)
                out[j] = sum(v.mse(h) for v in vq) / den if den > 0 else np.inf
            except ConditioningError:
                out[j] = np.inf
        return out

    return run_cv(train_count, grid, cfg["folds"], rng, score)


def _bank_cv(quads, cfg, rng, task=DENOISE, pairs=None):
    grid = _grid(cfg, task)

    def score(_k, tr, va, grid):
        qm = QuadraticModel.average([quads[i] for i in tr])
        dp = DirichletPair.average([pairs[i] for i in tr]) if pairs is not None else None
        vq = [quads[i] for i in va]
        out = np.empty(len(grid))
        for j, reg in enumerate(grid):
            try:
                bank = solve_ssl(qm, dp, reg) if dp is not None else solve_denoising(qm, reg)
                out[j] = expected_nmse(bank.stacked, vq)
            except (ConditioningError, NumericalError):
                out[j] = np.inf
        return out

    return run_cv(len(quads), grid, cfg["folds"], rng, score)


def _test_denoise(cfg, setup, inst, test_idx, operator_fn, setting_key):
    """Mean and std over test realisations of the NMSE and of the incoming-node NMSE."""
    rng = stream(cfg["seed"], "test", setting_key)
    n1 = setup.graph.n + 1
    per, per_plus = [], []
    for i in test_idx:
        s = inst.samples[i]
        R = cfg["test_realizations"]
        noise = math.sqrt(s.sigma2) * rng.standard_normal((R, n1)) if s.sigma2 > 0 else np.zeros((R, n1))
        X = s.t_plus + noise
        if cfg["test_resample"] == "both":
            B = sample_attachments(setup.model_in, rng, R)
            A = sample_attachments(setup.model_out, rng, R)
            Y = np.stack([operator_fn(b, a) @ x for b, a, x in zip(B, A, X)])
        else:
            Y = X @ operator_fn(s.b, s.a).T
        err = Y - s.t_plus
        per.extend((err**2).sum(axis=1) / (s.t_plus @ s.t_plus))
        if s.t_plus[-1] != 0:
            per_plus.extend(err[:, -1] ** 2 / s.t_plus[-1] ** 2)
    if not per_plus:
        raise InputError("incoming-node target is zero in every test sample")
    per, per_plus = np.asarray(per), np.asarray(per_plus)
    return {"NMSE": (float(per.mean()), float(per.std())),
            "NMSE_plus": (float(per_plus.mean()), float(per_plus.std()))}


def run_denoising(cfg, setup: Setup | None = None) -> dict:
    """All methods at every configured SNR. Returns outcomes plus instance info."""
    setup = setup or prepare(cfg)
    outcomes = []
    for si, snr in enumerate(cfg["snr_db"]):
        snr_v = _snr(snr)
        setting = f"snr_db={snr}"
        inst = _denoise_instance(cfg, setup, snr_v, si)
        train_idx, test_idx = split_indices(len(inst.samples), cfg["train_fraction"], stream(cfg["seed"], "split", si))
        ts = TrainingSet(_denoise_training(inst, train_idx), cfg["L"], cfg["M"])
        for method in cfg["methods"]:
            cv_rng = stream(cfg["seed"], "cv", si)
            outcomes.append(_guard(method, setting, lambda: _denoise_method(
                method, cfg, setup, inst, ts, test_idx, cv_rng, setting, si)))
    return {"outcomes": outcomes, "info": setup.info}


def _denoise_instance(cfg, setup, snr_v, si):
    rng = stream(cfg["seed"], "instance", si)
    if cfg["graph"] == "external":
        return _external_denoise_instance(cfg, setup, snr_v, rng)
    return make_denoising_instance(setup.graph, setup.model_in, setup.model_out, cfg["realizations"], snr_v,
                                   cfg["bandwidth"], rng)


def _external_denoise_instance(cfg, setup, snr_v, rng):
    _, _, mat = load_external(cfg["edge_list"], cfg["signal_csv"], expanded=True)
    cols = mat.T
    B = sample_attachments(setup.model_in, rng, len(cols))
    A = sample_attachments(setup.model_out, rng, len(cols))
    samples = []
    for t, b, a in zip(cols, B, A):
        s2 = noise_variance(t, snr_v)
        x = t + math.sqrt(s2) * rng.standard_normal(t.size) if s2 > 0 else t.copy()
        samples.append(DenoisingSample(t, x, b, a, s2))
    return DenoisingInstance(setup.graph, setup.model_in, setup.model_out, samples, snr_v, 0)


def _stats_for(cfg, setup):
    if cfg["moments"] == "known":
        return known_stats
    return (setup.stats_in, setup.stats_out)


def _denoise_method(method, cfg, setup, inst, ts, test_idx, cv_rng, setting, si):
    g = setup.graph
    if method in ("prop", "kc2"):
        stats = known_stats if method == "kc2" else _stats_for(cfg, setup)
        quads, _ = build_sample_models(ts, g, stats)
        cv = _bank_cv(quads, cfg, cv_rng)
        bank = solve_denoising(QuadraticModel.average(quads), cv.best)
        op = lambda b, a: bank_operator(g, b, a, bank)
        filters = bank.to_dict()
    else:
        quads = kc1_quadratics(ts, g, cfg["K"]) if method == "kc1" else it_quadratics(ts, g, cfg["K"])
        cv = _single_cv(quads, cfg, cv_rng, len(ts))
        h = solve_single(SingleFilterQuadratic.average(quads), cv.best.gamma)
        op = lambda b, a: single_operator(combined_expansion(g, b, a), h)
        filters = {"K": cfg["K"], "h": [float(v) for v in h], "gamma": cv.best.gamma}
    metrics = _test_denoise(cfg, setup, inst, test_idx, op, si)
    return MethodOutcome(method, setting, metrics, cv.best.to_dict(), filters, list(cv.trace_rows()))


# ------------------------------------------------------------------ semi-supervised labels

def _ssl_training(inst: SSLInstance, idx) -> list:
    """Loss on the observed existing labels and, when labelled, the incoming node."""
    out = []
    for i in idx:
        s = inst.samples[i]
        x = s.signal(inst.labels)
        out.append(TrainingSample(ExpandedSignal(x, s.x_plus), NoisyTarget(x, s.x_plus, 0.0),
                                  SampleMask.from_parts(s.observed.astype(float), float(s.labelled)), s.b, s.a))
    return out


def _ssl_models(method, cfg, setup, ts):
    g = setup.graph
    if method in ("prop", "kc2"):
        stats = known_stats if method == "kc2" else _stats_for(cfg, setup)
        return build_sample_models(ts, g, stats, with_dirichlet=True)
    if method == "kc1":
        return kc1_quadratics(ts, g, cfg["K"]), None
    return it_quadratics(ts, g, cfg["K"]), None


def _ssl_solve(method, quads, pairs, reg):
    if method in ("prop", "kc2"):
        return solve_ssl(QuadraticModel.average(quads), DirichletPair.average(pairs), reg)
    return solve_single(SingleFilterQuadratic.average(quads), reg.gamma)


def _ssl_errors(method, g, fit, inst, idx, mean_attach=None) -> np.ndarray:
    """SSL error over the unobserved existing nodes of each sample.

    ``mean_attach`` replaces the realised attachments by their means, which
    gives the expected bank output (the output is linear in ``b`` and ``a``).
    """
    errs = []
    for i in idx:
        s = inst.samples[i]
        signal = ExpandedSignal(s.signal(inst.labels), s.x_plus)
        if method in ("prop", "kc2"):
            b, a = (s.b, s.a) if mean_attach is None else mean_attach
            y = apply_bank(g, b, a, signal, fit)[:-1]
        elif method == "kc1":
            y = apply_single(combined_expansion(g, s.b, s.a), signal.stacked, fit)[:-1]
        else:
            y = apply_single(g.adj, signal.x, fit)
        errs.append(ssl_error(y, inst.labels, ~s.observed))
    return np.asarray(errs)


def _ssl_method(method, cfg, setup, inst, train_idx, test_idx, cv_rng, setting):
    g = setup.graph
    ts = TrainingSet(_ssl_training(inst, train_idx), cfg["L"], cfg["M"])
    quads, pairs = _ssl_models(method, cfg, setup, ts)
    grid = _grid(cfg, SSL) if method in ("prop", "kc2") else _gamma_grid(cfg)
    # the proposed method never sees realised connectivity, so it validates on the expected output
    mean_attach = (setup.stats_in.mu, setup.stats_out.mu) if method == "prop" else None

    def score(_k, tr, va, grid):
        q_tr = [quads[i] for i in tr]
        p_tr = [pairs[i] for i in tr] if pairs is not None else None
        out = np.empty(len(grid))
        for j, reg in enumerate(grid):
            try:
                fit = _ssl_solve(method, q_tr, p_tr, reg)
            except (ConditioningError, NumericalError):
                out[j] = np.inf
                continue
            out[j] = float(_ssl_errors(method, g, fit, inst, train_idx[va], mean_attach).mean())
        return out

    cv = run_cv(len(train_idx), grid, cfg["folds"], cv_rng, score)
    fit = _ssl_solve(method, quads, pairs, cv.best)
    errs = _ssl_errors(method, g, fit, inst, test_idx)
    if isinstance(fit, FilterBank):
        filters = fit.to_dict()
    else:
        filters = {"K": cfg["K"], "h": [float(v) for v in fit], "gamma": cv.best.gamma}
    return MethodOutcome(method, setting, {"ssl_error": (float(errs.mean()), float(errs.std()))},
                         cv.best.to_dict(), filters, list(cv.trace_rows()))


def ssl_instance(cfg, setup: Setup) -> SSLInstance:
    g = setup.graph
    labels = spectral_bipartition(g)
    return make_ssl_instance(g, labels, setup.model_in, setup.model_out, cfg["realizations"],
                             cfg["label_fraction"], 1.0, stream(cfg["seed"], "instance"))


def run_ssl(cfg, setup: Setup | None = None) -> dict:
    setup = setup or prepare(cfg)
    base = ssl_instance(cfg, setup)
    outcomes = []
    info = dict(setup.info)
    info["class_balance"] = float(np.mean(base.labels > 0))
    info["observed_labels"] = int(base.samples[0].observed.sum())
    for fi, frac in enumerate(cfg["incoming_fractions"]):
        # every setting shares the realisations; only the labelled incoming nodes change
        inst = base.with_flags(labelled_flags(len(base.samples), frac, stream(cfg["seed"], "flags", fi)), frac)
        train_idx, test_idx = split_indices(len(inst.samples), cfg["train_fraction"], stream(cfg["seed"], "split", fi))
        setting = f"incoming_labelled={frac}"
        for method in cfg["methods"]:
            cv_rng = stream(cfg["seed"], "cv", fi)
            outcomes.append(_guard(method, setting, lambda: _ssl_method(
                method, cfg, setup, inst, train_idx, test_idx, cv_rng, setting)))
    return {"outcomes": outcomes, "info": info}


# ------------------------------------------------------------------ oracle validation

@dataclass
class CheckResult:
    name: str
    max_abs_z: float
    passed: bool
    detail: str = ""


def validation_instance(cfg):
    """Small random directed graph with attachment models and a noisy target."""
    rng = stream(cfg["seed"], "validation_graph")
    n = cfg["validation_n"]
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
    np.fill_diagonal(A, 0.0)
    g = Graph(A).normalized()
    if cfg["validation_scheme"] == "deterministic":
        b = (rng.random(n) < 0.5) * rng.uniform(0.5, 1.5, n)
        a = (rng.random(n) < 0.5) * rng.uniform(0.5, 1.5, n)
        models = (b, a)
        stats = (deterministic_moments(b), deterministic_moments(a))
    else:
        m_in = bernoulli_model(rng.uniform(0.2, 0.8, n), rng.uniform(0.5, 1.5, n))
        m_out = bernoulli_model(rng.uniform(0.2, 0.8, n), rng.uniform(0.5, 1.5, n))
        models = (m_in, m_out)
        stats = (analytic_bernoulli_moments(m_in), analytic_bernoulli_moments(m_out))
    t = rng.standard_normal(n)
    target = NoisyTarget(t, float(rng.standard_normal()), cfg["validation_sigma2"])
    mask = SampleMask(np.append((rng.random(n) < 0.7).astype(float), 1.0))
    return g, models, stats, target, mask


def run_validation(cfg) -> list:
    """Closed forms against the brute-force oracle; failures are reported, not raised."""
    g, models, stats, target, mask = validation_instance(cfg)
    K = cfg["validation_order"]
    draws = cfg["validation_draws"]
    thr = cfg["validation_threshold"]
    perturb = {cfg["corrupt_term"]: 1.5} if cfg["corrupt_term"] else None
    asm = MomentAssembler(g, stats[0], stats[1], K, K, mask.existing, perturb)
    if perturb:
        names = set(asm.delta_terms(target, mask.d_plus)) | set(asm.theta_terms(target, mask.d_plus))
        names |= set(asm.psi_in_terms(target)) | set(asm.psi_out_terms(target))
        if cfg["corrupt_term"] not in names:
            raise ConfigError(f"unknown term {cfg['corrupt_term']!r}; choose from {sorted(names)}")
    rng = stream(cfg["seed"], "oracle")
    results = []

    def add(name, report, closed):
        rep = report.compare(closed)
        results.append(CheckResult(name, rep.max_abs_z, bool(rep.max_abs_z < thr), f"draws={rep.draws}"))

    C = np.diag(mask.existing)
    lemma_draws = max(100, min(draws, 100_000))
    exact = expected_gram(g, C, target.t, 0.0, (K, K))
    direct = krylov_matrix(g, target.t, K).T @ C @ krylov_matrix(g, target.t, K)
    rel = float(np.max(np.abs(exact - direct)) / max(1.0, np.max(np.abs(direct))))
    results.append(CheckResult("lemma1_exact", rel, rel < 1e-12, "relative error, noise-free"))
    add("lemma1_noise", mc_expected_gram(g, C, target.t, target.sigma2, (K, K), lemma_draws, rng),
        expected_gram(g, C, target.t, target.sigma2, (K, K)))

    blocks = asm.delta_blocks(target, mask.d_plus)
    mc = mc_moment_matrices(g, target, mask, models, (K, K), draws, rng)
    add("delta11", mc["delta11"], blocks["delta11"])
    add("delta12", mc["delta12"], blocks["delta12"])
    add("delta22", mc["delta22"], blocks["delta22"])
    add("theta", mc["theta"], asm.theta(target, mask.d_plus))

    clean = NoisyTarget(target.t, target.t_plus, 0.0)
    mcd = mc_dirichlet_matrices(g, clean, models, (K, K), draws, rng)
    add("psi_in", mcd["psi_in"], asm.psi_in(clean))
    add("psi_out", mcd["psi_out"], asm.psi_out(clean))

    worst = 0.0
    prng = stream(cfg["seed"], "oracle", 1)
    for _ in range(20):
        h = prng.integers(1, 7)
        A = prng.random((h, h)) * (prng.random((h, h)) < 0.5)
        gg = Graph(A)
        v = prng.standard_normal(h)
        for direction in (INCOMING, OUTGOING):
            dense = mc_dense_power_check(gg, v, direction, 6)
            for k in range(7):
                block = expanded_power(expand(gg, direction, v), k)
                worst = max(worst, float(np.max(np.abs(block - dense[k])) / max(1.0, np.max(np.abs(dense[k])))))
    results.append(CheckResult("block_powers", worst, worst < 1e-10, "relative error, k <= 6"))
    return results


# ------------------------------------------------------------------ data export

def generate_data(cfg, out_dir) -> list:
    """Write the existing graph plus per-realisation signals and attachments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = prepare(cfg)
    g = setup.graph
    write_edge_list(g, out / "graph.txt")
    files = ["graph.txt"]
    if cfg["task"] == SSL:
        inst = ssl_instance(cfg, setup)
        write_signal_csv(out / "labels.csv", inst.labels[:, None], ["label"])
        write_signal_csv(out / "observed.csv", np.stack([s.observed for s in inst.samples], axis=1).astype(float))
        write_signal_csv(out / "incoming_labels.csv", np.array([[s.label for s in inst.samples]]))
        files += ["labels.csv", "observed.csv", "incoming_labels.csv"]
        B = np.stack([s.b for s in inst.samples], axis=1)
        A = np.stack([s.a for s in inst.samples], axis=1)
    else:
        snr = _snr(cfg["snr_db"][0])
        inst = _denoise_instance(cfg, setup, snr, 0)
        write_signal_csv(out / "targets.csv", np.stack([s.t_plus for s in inst.samples], axis=1))
        write_signal_csv(out / "observed.csv", np.stack([s.x_plus for s in inst.samples], axis=1))
        files += ["targets.csv", "observed.csv"]
        B = np.stack([s.b for s in inst.samples], axis=1)
        A = np.stack([s.a for s in inst.samples], axis=1)
    write_signal_csv(out / "attach_in.csv", B)
    write_signal_csv(out / "attach_out.csv", A)
    files += ["attach_in.csv", "attach_out.csv"]
    return files


# ------------------------------------------------------------------ result files

RESULT_FIELDS = ["task", "setting", "method", "metric", "mean", "std", "status", "config_hash", "seed"]
TRACE_FIELDS = ["setting", "method", "gamma", "alpha", "beta", "mean_metric"]


def result_rows(cfg, outcomes):
    h = config_hash(cfg)
    metric_names = ["NMSE", "NMSE_plus"] if cfg["task"] == DENOISE else ["ssl_error"]
    rows = []
    for o in outcomes:
        for name in metric_names:
            mean, std = o.metrics.get(name, (float("nan"), float("nan")))
            rows.append({"task": cfg["task"], "setting": o.setting, "method": o.method, "metric": name,
                         "mean": mean, "std": std, "status": o.status, "config_hash": h, "seed": cfg["seed"]})
    order = {m: i for i, m in enumerate(METHODS)}
    settings = list(dict.fromkeys(o.setting for o in outcomes))
    rows.sort(key=lambda r: (settings.index(r["setting"]), order[r["method"]], metric_names.index(r["metric"])))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def write_outputs(cfg, result, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = result["outcomes"]
    write_csv(out / "results.csv", RESULT_FIELDS, result_rows(cfg, outcomes))
    trace = [{"setting": o.setting, "method": o.method, **r} for o in outcomes for r in o.trace]
    write_csv(out / "cv_trace.csv", TRACE_FIELDS, trace)
    filters = {f"{o.setting}/{o.method}": {"selected": o.best, **(o.filters or {}), "status": o.status}
               for o in outcomes}
    (out / "filters.txt").write_text(json.dumps(filters, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, out / "manifest.txt", result.get("info", {}))


def write_manifest(cfg, path, info) -> None:
    lines = [f"config_hash={config_hash(cfg)}", f"seed={cfg['seed']}", f"package_version={__version__}",
             f"numpy={np.__version__}", f"python={platform.python_version()}",
             f"test_resample={cfg['test_resample']}"]
    lines += [f"{k}={v}" for k, v in sorted(info.items())]
    lines.append("config=" + json.dumps(cfg, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
