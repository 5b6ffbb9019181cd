import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import exact
from expandfilt.attachment import analytic_bernoulli_moments, bernoulli_model, deterministic_moments
from expandfilt.exceptions import InputError
from expandfilt.filters import ExpandedSignal, build_design_matrix
from expandfilt.graph import Graph
from expandfilt.moments import (MomentAssembler, NoisyTarget, QuadraticModel, SampleMask, block_trace, build_delta,
                                build_psi_in, build_psi_out, build_quadratic, build_theta, expected_gram,
                                stacked_powers)

A2 = np.array([[0, 1.0], [0.5, 0]])
LAW_IN = ([0.5, 0.25], [1.0, 2.0])
LAW_OUT = ([0.4, 0.6], [1.0, 1.0])


def stats(law):
    return analytic_bernoulli_moments(bernoulli_model(*law))


def test_block_trace_hand_example():
    Z = np.arange(16.0).reshape(4, 4)
    Y = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(block_trace(Z, Y), [[31, 51], [111, 131]])
    with pytest.raises(InputError):
        block_trace(np.ones((3, 4)), Y)


def test_stacked_powers():
    g = Graph(A2)
    P = stacked_powers(g, 2)
    assert np.allclose(P[:, 4:], A2 @ A2)
    Pb = stacked_powers(g, 2, shifted=True)
    assert np.allclose(Pb[:, :2], 0) and np.allclose(Pb[:, 2:4], np.eye(2)) and np.allclose(Pb[:, 4:], A2)


def test_expected_gram_hand_example():
    g = Graph(A2)
    out = expected_gram(g, np.eye(2), [1.0, -1.0], 0.1, (1, 1))
    assert np.allclose(out, [[2.2, -1.5], [-1.5, 1.375]], rtol=0, atol=1e-15)
    clean = expected_gram(g, np.eye(2), [1.0, -1.0], 0.0, (1, 1))
    assert np.allclose(clean, [[2.0, -1.5], [-1.5, 1.25]], rtol=0, atol=1e-15)


def test_two_node_instance_frozen_values():
    # values from exhaustive enumeration of the 16 attachment outcomes
    g = Graph(A2)
    target = NoisyTarget([1.0, -1.0], 2.0, 0.1)
    mask = SampleMask.all_nodes(2)
    q = build_quadratic(g, target, mask, stats(LAW_IN), stats(LAW_OUT), (1, 1))
    assert np.allclose(q.delta, [[6.3, -1.5, 6.3, -1.9],
                                 [-1.5, 6.525, -1.5, 0.875],
                                 [6.3, -1.5, 6.3, -1.9],
                                 [-1.9, 0.875, -1.9, 1.995]], rtol=0, atol=1e-12)
    assert np.allclose(q.theta, [6.0, -1.5, 6.0, -1.9], rtol=0, atol=1e-12)
    assert q.constant == 6.0
    clean = NoisyTarget([1.0, -1.0], 2.0)
    assert np.allclose(build_psi_in(g, clean, stats(LAW_IN), 1), [[15.25, -9.25], [-9.25, 11.75]], atol=1e-12)
    assert np.allclose(build_psi_out(g, clean, stats(LAW_OUT), 1), [[11.57, -5.56], [-5.56, 4.76]], atol=1e-12)


@st.composite
def small_instances(draw):
    n = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    law_in = (rng.uniform(0, 1, n), rng.uniform(0.2, 2, n))
    law_out = (rng.uniform(0, 1, n), rng.uniform(0.2, 2, n))
    d = np.append(rng.random(n) < 0.7, draw(st.sampled_from([0.0, 1.0]))).astype(float)
    t = rng.standard_normal(n + 1)
    sigma2 = draw(st.sampled_from([0.0, 0.3]))
    return Graph(A), law_in, law_out, d, t, sigma2, draw(st.integers(0, 3)), draw(st.integers(0, 3))


@settings(max_examples=40, deadline=None)
@given(small_instances())
def test_closed_form_equals_enumeration(inst):
    g, law_in, law_out, d, t, sigma2, L, M = inst
    target = NoisyTarget(t[:-1], t[-1], sigma2)
    asm = MomentAssembler(g, stats(law_in), stats(law_out), L, M, d[:-1])
    q = asm.quadratic(target, d[-1])
    De, Th, C = exact.moments(g.adj, law_in, law_out, t, sigma2, d, L, M)
    scale = max(1.0, np.abs(De).max())
    assert np.allclose(q.delta, De, rtol=0, atol=1e-10 * scale)
    assert np.allclose(q.theta, Th, rtol=0, atol=1e-10 * scale)
    assert q.constant == pytest.approx(C, abs=1e-12)
    clean = NoisyTarget(t[:-1], t[-1])
    assert np.allclose(asm.psi_in(clean), exact.dirichlet(g.adj, law_in, t, L, "incoming"), atol=1e-10 * scale)
    assert np.allclose(asm.psi_out(clean), exact.dirichlet(g.adj, law_out, t, M, "outgoing"), atol=1e-10 * scale)


def test_bernoulli_second_moment_override_matches_moments():
    g = Graph(A2)
    clean = NoisyTarget([1.0, -1.0], 2.0)
    a = build_psi_in(g, clean, stats(LAW_IN), 2)
    b = build_psi_in(g, clean, stats(LAW_IN), 2, weights=LAW_IN[1], probs=LAW_IN[0])
    assert np.allclose(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.integers(0, 3))
def test_known_connectivity_model_is_exact_loss(seed, L, M):
    rng = np.random.default_rng(seed)
    n = 5
    g = Graph(rng.random((n, n)) * (rng.random((n, n)) < 0.5)).normalized()
    b, a = rng.random(n) * (rng.random(n) < 0.5), rng.random(n)
    t = rng.standard_normal(n + 1)
    d = np.append(rng.random(n) < 0.6, 1.0).astype(float)
    h = rng.standard_normal(L + M + 2)
    q = build_quadratic(g, NoisyTarget(t[:-1], t[-1]), SampleMask(d), deterministic_moments(b),
                        deterministic_moments(a), (L, M))
    W = build_design_matrix(g, b, a, ExpandedSignal(t[:-1], t[-1]), L, M)
    loss = float(d @ (W @ h - t) ** 2)
    assert q.mse(h) == pytest.approx(loss, rel=1e-10, abs=1e-12)


def test_terms_sum_to_blocks():
    rng = np.random.default_rng(2)
    g = Graph(rng.random((4, 4))).normalized()
    asm = MomentAssembler(g, stats((rng.random(4), np.ones(4))), stats((rng.random(4), np.ones(4))), 2, 2)
    target = NoisyTarget(rng.standard_normal(4), 0.5, 0.2)
    terms = asm.delta_terms(target, 1.0)
    blocks = asm.delta_blocks(target, 1.0)
    for name, block in blocks.items():
        total = sum(v for k, v in terms.items() if k.startswith(name + "."))
        assert np.allclose(total, block)
    th = asm.theta_terms(target, 1.0)
    upper = sum(v for k, v in th.items() if k.startswith("theta_in."))
    lower = sum(v for k, v in th.items() if k.startswith("theta_out."))
    assert np.allclose(np.concatenate([upper, lower]), asm.theta(target, 1.0))
    assert np.allclose(sum(asm.psi_out_terms(target).values()), asm.psi_out(target))


def test_perturb_changes_only_named_term():
    rng = np.random.default_rng(4)
    g = Graph(rng.random((3, 3))).normalized()
    si, so = stats((rng.random(3), np.ones(3))), stats((rng.random(3), np.ones(3)))
    target = NoisyTarget(rng.standard_normal(3), 0.5, 0.2)
    base = MomentAssembler(g, si, so, 2, 2)
    name = next(k for k, v in base.delta_terms(target, 1.0).items() if k.startswith("delta12") and np.any(v))
    bad = MomentAssembler(g, si, so, 2, 2, perturb={name: 1.5})
    b0, b1 = base.delta_blocks(target, 1.0), bad.delta_blocks(target, 1.0)
    assert not np.allclose(b0["delta12"], b1["delta12"])
    assert np.allclose(b0["delta11"], b1["delta11"]) and np.allclose(b0["delta22"], b1["delta22"])


def test_with_stats_matches_fresh_assembler():
    rng = np.random.default_rng(5)
    g = Graph(rng.random((4, 4))).normalized()
    d = np.array([1.0, 0, 1, 1])
    s1, s2 = stats((rng.random(4), np.ones(4))), stats((rng.random(4), np.ones(4)))
    target = NoisyTarget(rng.standard_normal(4), 1.0, 0.1)
    reused = MomentAssembler(g, s1, s1, 2, 1, d).with_stats(s2, s1)
    fresh = MomentAssembler(g, s2, s1, 2, 1, d)
    assert np.allclose(reused.delta(target, 1.0), fresh.delta(target, 1.0))
    assert np.allclose(reused.psi_in(target), fresh.psi_in(target))


def test_builders_agree_with_assembler():
    g = Graph(A2)
    target = NoisyTarget([1.0, -1.0], 2.0, 0.1)
    mask = SampleMask.from_parts([1.0, 0.0], 1.0)
    si, so = stats(LAW_IN), stats(LAW_OUT)
    asm = MomentAssembler(g, si, so, 1, 2, mask.existing)
    assert np.allclose(build_delta(g, target, mask, si, so, (1, 2)), asm.delta(target, 1.0))
    assert np.allclose(build_theta(g, target, mask, si, so, (1, 2)), asm.theta(target, 1.0))


def test_quadratic_average():
    q1 = QuadraticModel(np.eye(2), np.ones(2), 1.0, 0, 0)
    q2 = QuadraticModel(3 * np.eye(2), np.zeros(2), 3.0, 0, 0)
    avg = QuadraticModel.average([q1, q2])
    assert np.allclose(avg.delta, 2 * np.eye(2)) and avg.constant == 2.0
    with pytest.raises(InputError):
        QuadraticModel.average([])


def test_input_validation():
    with pytest.raises(InputError):
        SampleMask([1.0, 0.5])
    with pytest.raises(InputError):
        NoisyTarget([1.0], 0.0, -1.0)
    g = Graph(A2)
    with pytest.raises(InputError):
        MomentAssembler(g, stats(LAW_IN), stats(LAW_OUT), -1, 0)
    with pytest.raises(InputError):
        MomentAssembler(g, deterministic_moments([1.0]), stats(LAW_OUT), 1, 1)
