"""End-to-end acceptance checks.

Each criterion prints one ``[criterion N] PASS|FAIL`` line with its measured
quantities and runtime. Results are cached per session so the
reproducibility criterion can rerun every earlier one and compare bytes.
"""
import hashlib
import json
import time

import numpy as np
import pytest

from expandfilt import experiments as ex
from expandfilt.attachment import analytic_bernoulli_moments, bernoulli_model, deterministic_moments
from expandfilt.baselines import known_stats, train_kc2
from expandfilt.filters import ExpandedSignal, build_design_matrix
from expandfilt.graph import INCOMING, OUTGOING, Graph, expand, expanded_power, krylov_matrix
from expandfilt.learning import (DENOISE, SSL, RegularizerWeights, TrainingSample, TrainingSet, average_quadratic,
                                 build_sample_models, denoising_gradient, denoising_objective, descent_fallback,
                                 solve_denoising, solve_ssl, ssl_gradient, ssl_objective)
from expandfilt.moments import NoisyTarget, SampleMask, expected_gram
from expandfilt.oracle import mc_dense_power_check, mc_expected_gram

SEEDS = range(5)
_cache = {}


def report(capsys, number, passed, detail, seconds):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'} {detail} ({seconds:.1f} s)")


def digest(obj) -> str:
    def enc(o):
        if isinstance(o, np.ndarray):
            return {"shape": o.shape, "bytes": hashlib.sha256(np.ascontiguousarray(o).tobytes()).hexdigest()}
        if isinstance(o, (np.floating, float)):
            return float(o).hex()
        raise TypeError(type(o))
    return hashlib.sha256(json.dumps(obj, default=enc, sort_keys=True).encode()).hexdigest()


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# ---------------------------------------------------------------- criterion 1

def moment_oracle():
    cfg = ex.load_config(overrides={"task": "validate", "seed": 0, "validation_n": 8, "validation_order": 2,
                                    "validation_scheme": "bernoulli", "validation_sigma2": 0.1,
                                    "validation_draws": 1_000_000})
    return {r.name: r.max_abs_z for r in ex.run_validation(cfg)}


def test_criterion_1_moment_oracle(capsys):
    z, secs = timed(moment_oracle)
    _cache[1] = z
    keys = ("delta11", "delta12", "delta22", "theta", "psi_in", "psi_out")
    worst = max(z[k] for k in keys)
    ok = worst < 4 and secs < 300
    report(capsys, 1, ok, "max|z| " + " ".join(f"{k}={z[k]:.2f}" for k in keys), secs)
    assert worst < 4
    assert secs < 300


# ---------------------------------------------------------------- criterion 2

def lemma_instance():
    rng = np.random.default_rng(2024)
    n = 8
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
    g = Graph(A).normalized()
    C = np.diag((rng.random(n) < 0.7).astype(float))
    return g, C, rng.standard_normal(n)


def lemma_check():
    g, C, t = lemma_instance()
    K = (2, 3)
    direct = krylov_matrix(g, t, K[0]).T @ C @ krylov_matrix(g, t, K[1])
    exact = expected_gram(g, C, t, 0.0, K)
    rel = float(np.max(np.abs(exact - direct)) / np.max(np.abs(direct)))
    rep = mc_expected_gram(g, C, t, 0.1, K, 100_000, np.random.default_rng(7))
    z = rep.compare(expected_gram(g, C, t, 0.1, K)).max_abs_z
    return {"rel": rel, "z": z, "estimate": rep.estimate}


def test_criterion_2_lemma(capsys):
    out, secs = timed(lemma_check)
    _cache[2] = out
    ok = out["rel"] < 1e-12 and out["z"] < 3 and secs < 60
    report(capsys, 2, ok, f"noise-free rel err={out['rel']:.2e}, noisy max|z|={out['z']:.2f} at 1e5 draws", secs)
    assert out["rel"] < 1e-12
    assert out["z"] < 3
    assert secs < 60


# ---------------------------------------------------------------- criterion 3

def block_powers():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 12))
        g = Graph(rng.random((n, n)) * (rng.random((n, n)) < 0.5))
        v = rng.standard_normal(n)
        for direction in (INCOMING, OUTGOING):
            dense = mc_dense_power_check(g, v, direction, 6)
            for k in range(7):
                block = expanded_power(expand(g, direction, v), k)
                worst = max(worst, float(np.max(np.abs(block - dense[k])) / max(1.0, np.max(np.abs(dense[k])))))
    return worst


def test_criterion_3_block_powers(capsys):
    worst, secs = timed(block_powers)
    _cache[3] = worst
    report(capsys, 3, worst < 1e-10 and secs < 10, f"max rel err={worst:.2e} over 20 graphs, k<=6", secs)
    assert worst < 1e-10
    assert secs < 10


# ---------------------------------------------------------------- criterion 4

def solver_instance(seed):
    rng = np.random.default_rng(seed)
    n = 8
    g = Graph(rng.random((n, n)) * (rng.random((n, n)) < 0.4)).normalized()
    m_in = bernoulli_model(rng.uniform(0.1, 0.6, n), 1.0)
    m_out = bernoulli_model(rng.uniform(0.1, 0.6, n), 1.0)
    stats = (analytic_bernoulli_moments(m_in), analytic_bernoulli_moments(m_out))
    samples = []
    for _ in range(10):
        t = rng.standard_normal(n + 1)
        mask = SampleMask(np.append(rng.random(n) < 0.6, float(rng.random() < 0.7)))
        samples.append(TrainingSample(ExpandedSignal(t[:-1], t[-1]), NoisyTarget(t[:-1], t[-1], 0.05), mask))
    reg = RegularizerWeights(float(10 ** rng.uniform(-2, 1)), float(rng.uniform(0.1, 0.9)),
                             float(rng.uniform(0.1, 0.9)))
    return TrainingSet(samples, 3, 3), g, stats, reg


def fd_gradient(f, h, eps=1e-6):
    eye = np.eye(h.size)
    return np.array([(f(h + eps * e) - f(h - eps * e)) / (2 * eps) for e in eye])


def solver_optimality():
    worst_grad, worst_gap, solved = 0.0, 0.0, 0
    hs = []
    for seed in range(20):
        ts, g, stats, reg = solver_instance(seed)
        qm, dp = average_quadratic(ts, g, stats, SSL)
        for task in (DENOISE, SSL):
            if task == DENOISE:
                bank = solve_denoising(qm, reg)
                f, grad = (lambda v: denoising_objective(v, qm, reg)), (lambda v: denoising_gradient(v, qm, reg))
            else:
                bank = solve_ssl(qm, dp, reg)
                f, grad = (lambda v: ssl_objective(v, qm, dp, reg)), (lambda v: ssl_gradient(v, qm, dp, reg))
            if bank.meta["solver"] != "cholesky":
                continue
            solved += 1
            h = bank.stacked
            scale = max(1.0, float(np.linalg.norm(h)))
            worst_grad = max(worst_grad, float(np.linalg.norm(fd_gradient(f, h))) / scale)
            for rule in ("armijo", "bb"):
                res = descent_fallback(f, grad, np.zeros_like(h), rule)
                worst_gap = max(worst_gap, float(np.linalg.norm(res.h - h)) / scale)
            hs.append(h)
    return {"grad": worst_grad, "gap": worst_gap, "solved": solved, "h": np.concatenate(hs)}


def test_criterion_4_solver_optimality(capsys):
    out, secs = timed(solver_optimality)
    _cache[4] = out
    ok = out["grad"] < 1e-6 and out["gap"] < 1e-6 and out["solved"] == 40 and secs < 60
    report(capsys, 4, ok, f"{out['solved']} closed-form solves, max FD grad={out['grad']:.2e}, "
                          f"max descent gap={out['gap']:.2e}", secs)
    assert out["solved"] == 40
    assert out["grad"] < 1e-6
    assert out["gap"] < 1e-6
    assert secs < 60


# ---------------------------------------------------------------- criterion 5

def collapse():
    rng = np.random.default_rng(5)
    n = 10
    g = Graph(rng.random((n, n)) * (rng.random((n, n)) < 0.3)).normalized()
    b = rng.random(n) * (rng.random(n) < 0.4)
    a = rng.random(n) * (rng.random(n) < 0.4)
    samples = []
    for _ in range(12):
        t = rng.standard_normal(n + 1)
        samples.append(TrainingSample(ExpandedSignal(t[:-1], t[-1]), NoisyTarget(t[:-1], t[-1]),
                                      SampleMask(np.append(rng.random(n) < 0.7, 1.0).astype(float)), b, a))
    ts = TrainingSet(samples, 3, 2)
    stats = (deterministic_moments(b), deterministic_moments(a))
    reg = RegularizerWeights(0.2, 0.3, 0.6)
    worst = 0.0
    for task in (DENOISE, SSL):
        if task == SSL:
            qm, dp = average_quadratic(ts, g, stats, SSL)
            prop = solve_ssl(qm, dp, reg)
        else:
            prop = solve_denoising(average_quadratic(ts, g, stats, DENOISE), reg)
        kc2 = train_kc2(ts, g, reg, task)
        worst = max(worst, float(np.max(np.abs(prop.stacked - kc2.stacked))))
    quads, _ = build_sample_models(ts, g, stats)
    h = rng.standard_normal(7)
    loss_gap = 0.0
    for s, q in zip(samples, quads):
        W = build_design_matrix(g, b, a, s.signal, 3, 2)
        exact = float(s.mask.d @ (W @ h - s.target.stacked) ** 2)
        loss_gap = max(loss_gap, abs(q.mse(h) - exact) / max(1.0, exact))
    # the per-sample callable route must agree with the shared-statistics route
    alt, _ = build_sample_models(ts, g, known_stats)
    route_gap = max(float(np.max(np.abs(x.delta - y.delta))) for x, y in zip(quads, alt))
    return {"filter": worst, "loss": loss_gap, "route": route_gap}


def test_criterion_5_deterministic_collapse(capsys):
    out, secs = timed(collapse)
    _cache[5] = out
    ok = out["filter"] < 1e-9 and out["loss"] < 1e-9
    report(capsys, 5, ok, f"max |h_prop - h_kc2|={out['filter']:.2e}, model vs exact loss rel={out['loss']:.2e}",
           secs)
    assert out["filter"] < 1e-9
    assert out["loss"] < 1e-9
    assert out["route"] < 1e-12


# ---------------------------------------------------------------- criterion 6

def denoising_runs():
    per_seed = []
    for seed in SEEDS:
        cfg = ex.load_config(overrides={"task": "denoise", "seed": seed, "n": 50, "realizations": 200,
                                        "snr_db": [5.0, 10.0, 20.0]})
        res = ex.run_denoising(cfg)
        per_seed.append({f"{o.setting}/{o.method}/{k}": v[0] for o in res["outcomes"] for k, v in o.metrics.items()}
                        | {f"{o.setting}/{o.method}/status": o.status for o in res["outcomes"]})
    return per_seed


def seed_mean(per_seed, key):
    return float(np.mean([r[key] for r in per_seed]))


@pytest.mark.slow
def test_criterion_6_ba_denoising(capsys):
    runs, secs = timed(denoising_runs)
    _cache[6] = runs
    snrs = ("5.0", "10.0", "20.0")
    statuses = {v for r in runs for k, v in r.items() if k.endswith("status")}
    nmse = {m: [seed_mean(runs, f"snr_db={s}/{m}/NMSE") for s in snrs] for m in ex.METHODS}
    plus = {m: seed_mean(runs, f"snr_db=5.0/{m}/NMSE_plus") for m in ex.METHODS}
    a = nmse["prop"][0] > nmse["prop"][1] > nmse["prop"][2]
    b = all(p <= 2 * k for p, k in zip(nmse["prop"], nmse["kc2"]))
    c = plus["it"] >= 2 * plus["prop"]
    d = nmse["prop"][2] < 1e-2
    ok = a and b and c and d and statuses == {"ok"} and secs < 600
    detail = (f"NMSE prop={['%.4f' % v for v in nmse['prop']]} kc2={['%.4f' % v for v in nmse['kc2']]} "
              f"it={['%.4f' % v for v in nmse['it']]}; NMSE+ at 5 dB it/prop={plus['it']:.3f}/{plus['prop']:.3f}; "
              f"(a)={a} (b)={b} (c)={c} (d)={d}")
    report(capsys, 6, ok, detail, secs)
    assert statuses == {"ok"}
    assert a, "proposed NMSE must decrease with SNR"
    assert b, "proposed NMSE must stay within 2x of KC2"
    assert c, "IT NMSE+ must be at least 2x the proposed at 5 dB"
    assert d, "proposed NMSE at 20 dB must be below 1e-2"
    assert secs < 600


# ---------------------------------------------------------------- criterion 7

def ssl_runs():
    per_seed = []
    for seed in SEEDS:
        cfg = ex.load_config(overrides={"task": "ssl", "seed": seed, "n": 100, "realizations": 200,
                                        "label_fraction": 0.1, "incoming_fractions": [1.0, 0.5]})
        res = ex.run_ssl(cfg)
        per_seed.append({f"{o.setting}/{o.method}": o.metrics.get("ssl_error", (np.nan,))[0]
                         for o in res["outcomes"]} | {f"{o.setting}/{o.method}/status": o.status
                                                      for o in res["outcomes"]})
    return per_seed


@pytest.mark.slow
def test_criterion_7_sensor_ssl(capsys):
    runs, secs = timed(ssl_runs)
    _cache[7] = runs
    settings = ("incoming_labelled=1.0", "incoming_labelled=0.5")
    statuses = {v for r in runs for k, v in r.items() if k.endswith("status")}
    err = {(s, m): seed_mean(runs, f"{s}/{m}") for s in settings for m in ex.METHODS}
    close = all(abs(err[(s, "prop")] - err[(s, "kc2")]) <= 3 for s in settings)
    vs_it = all(err[(s, "prop")] <= err[(s, "it")] + 1 for s in settings)
    ok = close and vs_it and statuses == {"ok"} and secs < 600
    detail = "; ".join(f"{s}: " + " ".join(f"{m}={err[(s, m)]:.2f}" for m in ex.METHODS) for s in settings)
    report(capsys, 7, ok, f"{detail}; within 3 of KC2={close}, <= IT+1={vs_it}", secs)
    assert statuses == {"ok"}
    assert close
    assert vs_it
    assert secs < 600


# ---------------------------------------------------------------- criterion 8

RERUN = {1: moment_oracle, 2: lemma_check, 3: block_powers, 4: solver_optimality, 5: collapse,
         6: denoising_runs, 7: ssl_runs}


@pytest.mark.slow
def test_criterion_8_reproducibility(capsys):
    start = time.perf_counter()
    for k in sorted(set(RERUN) - set(_cache)):
        _cache[k] = RERUN[k]()
    mismatched = [k for k, fn in RERUN.items() if digest(fn()) != digest(_cache[k])]
    secs = time.perf_counter() - start
    report(capsys, 8, not mismatched,
           "all criteria bit-identical on rerun" if not mismatched else f"mismatch in criteria {mismatched}", secs)
    assert not mismatched
