"""Two-filter bank over the incoming and outgoing expansions.

The bank output is linear in the stacked coefficients ``h = [h_in; h_out]``:
``y = W h`` with the design matrix built by :func:`build_design_matrix`.
Everything is evaluated from Krylov columns of the base graph, never from
``(n+1)``-dimensional powers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .graph import Graph, _check_vector, krylov_matrix, shifted_krylov


@dataclass(eq=False)
class FilterBank:
    h_in: np.ndarray
    h_out: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h_in = np.atleast_1d(np.asarray(self.h_in, dtype=float))
        self.h_out = np.atleast_1d(np.asarray(self.h_out, dtype=float))
        if self.h_in.ndim != 1 or self.h_out.ndim != 1:
            raise InputError("filter coefficients must be vectors")
        if not (np.all(np.isfinite(self.h_in)) and np.all(np.isfinite(self.h_out))):
            raise InputError("filter coefficients must be finite")

    @property
    def L(self) -> int:
        return self.h_in.size - 1

    @property
    def M(self) -> int:
        return self.h_out.size - 1

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.h_in, self.h_out])

    @classmethod
    def from_stacked(cls, h, L, meta=None):
        h = np.asarray(h, dtype=float)
        return cls(h[: L + 1], h[L + 1 :], dict(meta or {}))

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "M": self.M,
            "h_in": [float(v) for v in self.h_in],
            "h_out": [float(v) for v in self.h_out],
            **self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        meta = {k: v for k, v in d.items() if k not in ("L", "M", "h_in", "h_out")}
        return cls(d["h_in"], d["h_out"], meta)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ExpandedSignal:
    """Signal over the existing nodes plus the value at the incoming node."""

    x: np.ndarray
    x_plus: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)) or not np.isfinite(self.x_plus):
            raise InputError("expanded signal must be a finite vector plus a finite scalar")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_plus", float(self.x_plus))

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def stacked(self) -> np.ndarray:
        return np.append(self.x, self.x_plus)

    @classmethod
    def from_stacked(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:-1], v[-1])


def _check(g: Graph, s: ExpandedSignal):
    if s.n != g.n:
        raise InputError(f"signal has {s.n} existing nodes, graph has {g.n}")


def incoming_design(g: Graph, b, s: ExpandedSignal, L: int) -> np.ndarray:
    """``(n+1) x (L+1)`` block ``[L_x + x_+ Lbar_b; x_L^T]``."""
    _check(g, s)
    b = _check_vector(g, b, "b")
    out = np.zeros((g.n + 1, L + 1))
    out[: g.n] = krylov_matrix(g, s.x, L)
    if L >= 1:
        out[: g.n] += s.x_plus * shifted_krylov(g, b, L)
    out[g.n, 0] = s.x_plus
    return out


def outgoing_design(g: Graph, a, s: ExpandedSignal, M: int) -> np.ndarray:
    """``(n+1) x (M+1)`` block ``[M_x; a^T Mbar_x + x_M^T]``."""
    _check(g, s)
    a = _check_vector(g, a, "a")
    out = np.zeros((g.n + 1, M + 1))
    out[: g.n] = krylov_matrix(g, s.x, M)
    if M >= 1:
        out[g.n] = a @ shifted_krylov(g, s.x, M)
    out[g.n, 0] += s.x_plus
    return out


def apply_incoming(g: Graph, b, s: ExpandedSignal, h_in) -> np.ndarray:
    h_in = np.atleast_1d(np.asarray(h_in, dtype=float))
    return incoming_design(g, b, s, h_in.size - 1) @ h_in


def apply_outgoing(g: Graph, a, s: ExpandedSignal, h_out) -> np.ndarray:
    h_out = np.atleast_1d(np.asarray(h_out, dtype=float))
    return outgoing_design(g, a, s, h_out.size - 1) @ h_out


def build_design_matrix(g: Graph, b, a, s: ExpandedSignal, L: int, M: int) -> np.ndarray:
    """Compact design ``W`` with ``W @ [h_in; h_out]`` equal to the bank output."""
    if L < 0 or M < 0:
        raise InputError("filter orders must be >= 0")
    return np.hstack([incoming_design(g, b, s, L), outgoing_design(g, a, s, M)])


def apply_bank(g: Graph, b, a, s: ExpandedSignal, bank: FilterBank) -> np.ndarray:
    return apply_incoming(g, b, s, bank.h_in) + apply_outgoing(g, a, s, bank.h_out)
