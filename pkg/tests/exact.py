"""Exact expectations by enumerating every Bernoulli attachment outcome.

Independent of the package's closed forms: the expanded graphs are built
densely and powers taken by repeated multiplication.
"""
import itertools

import numpy as np


def outcomes(p, w):
    """All ``(vector, probability)`` pairs of independent Bernoulli edges."""
    p, w = np.asarray(p, float), np.asarray(w, float)
    for bits in itertools.product((0, 1), repeat=p.size):
        bits = np.array(bits, float)
        yield bits * w, float(np.prod(np.where(bits == 1, p, 1 - p)))


def dense_in(A, b):
    n = A.shape[0]
    S = np.zeros((n + 1, n + 1))
    S[:n, :n] = A
    S[:n, n] = b
    return S


def dense_out(A, a):
    n = A.shape[0]
    S = np.zeros((n + 1, n + 1))
    S[:n, :n] = A
    S[n, :n] = a
    return S


def krylov(S, x, K):
    cols = [x]
    for _ in range(K):
        cols.append(S @ cols[-1])
    return np.stack(cols, axis=1)


def design(A, b, a, x, L, M):
    return np.hstack([krylov(dense_in(A, b), x, L), krylov(dense_out(A, a), x, M)])


def moments(A, law_in, law_out, t_full, sigma2, d, L, M):
    """Exact ``(delta, theta, constant)`` of ``E||W h - t||_D^2``.

    ``W`` is linear in the input so the noise enters only through
    ``E[x x^T] = t t^T + sigma2 I``.
    """
    n1 = t_full.size
    second = np.outer(t_full, t_full) + sigma2 * np.eye(n1)
    D = np.diag(d)
    delta = np.zeros((L + M + 2, L + M + 2))
    theta = np.zeros(L + M + 2)
    for b, pb in outcomes(*law_in):
        for a, pa in outcomes(*law_out):
            basis = [design(A, b, a, e, L, M) for e in np.eye(n1)]
            acc = sum(second[j, k] * basis[j].T @ D @ basis[k] for j in range(n1) for k in range(n1))
            delta += pb * pa * acc
            theta += pb * pa * design(A, b, a, t_full, L, M).T @ D @ t_full
    return delta, theta, float(t_full @ D @ t_full)


def dirichlet(A, law, t_full, K, side):
    """Exact ``E[K^T (I - S)^T (I - S) K]`` for one side, noise-free input."""
    n1 = t_full.size
    out = np.zeros((K + 1, K + 1))
    for v, pv in outcomes(*law):
        S = dense_in(A, v) if side == "incoming" else dense_out(A, v)
        R = (np.eye(n1) - S) @ krylov(S, t_full, K)
        out += pv * R.T @ R
    return out
