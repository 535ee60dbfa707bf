"""Cartesian Taylor expansions of the Laplace kernel 1/|r|.

Coefficients are stored per multi-index ``a = (ax, ay, az)`` with ``|a| < p``,
ordered by total degree and then lexicographically (descending ax).

Conventions, for sources q_j at x_j and expansion centre c:

    M_a = sum_j q_j (x_j - c)^a / a!
    phi(x) = sum_a (-1)^|a| M_a d^a G(x - c),      G(r) = 1/|r|
    L_b    = sum_a (-1)^|a| M_a (a+b)!/b! T_{a+b}(x_t - c),   |a| + |b| < p
    phi(x_t + y) = sum_b L_b y^b

with ``T_g = d^g G / g!`` the scaled derivative tensor.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb, factorial

import numpy as np


def n_terms(p: int) -> int:
    """Number of monomials of total degree < p in three variables."""
    return comb(p + 2, 3)


@lru_cache(maxsize=None)
def multi_indices(p: int) -> tuple[tuple[int, int, int], ...]:
    out = []
    for deg in range(p):
        for ax in range(deg, -1, -1):
            for ay in range(deg - ax, -1, -1):
                out.append((ax, ay, deg - ax - ay))
    return tuple(out)


def _mfact(a) -> int:
    return factorial(a[0]) * factorial(a[1]) * factorial(a[2])


class Tables:
    """Index tables for one expansion order, built once and cached."""

    def __init__(self, p: int):
        if p < 1:
            raise ValueError("expansion order must be >= 1")
        self.p = p
        self.idx = multi_indices(p)
        self.nterms = len(self.idx)
        pos = {a: i for i, a in enumerate(self.idx)}
        self.pos = pos
        self.exps = np.array(self.idx, dtype=np.int64)
        self.degree = self.exps.sum(axis=1)
        self.fact = np.array([_mfact(a) for a in self.idx], dtype=float)
        self.sign = np.where(self.degree % 2 == 0, 1.0, -1.0)

        # recurrence for T: predecessors along each axis (k - e_i, k - 2 e_i)
        rec = []
        for g, a in enumerate(self.idx):
            if g == 0:
                continue
            one, two = [], []
            for ax in range(3):
                if a[ax] >= 1:
                    b = list(a)
                    b[ax] -= 1
                    one.append((ax, pos[tuple(b)]))
                if a[ax] >= 2:
                    b = list(a)
                    b[ax] -= 2
                    two.append(pos[tuple(b)])
            rec.append((g, int(sum(a)), one, two))
        self.recurrence = rec

        # M2M / L2L / M2L entries as flat arrays: (target, source, shift, coeff)
        m2m = []  # M_p[a] += M_c[b] * d^(a-b) / (a-b)!
        l2l = []  # L_c[b] += L_p[a] * a!/(b!(a-b)!) * d^(a-b)
        for ia, a in enumerate(self.idx):
            for ib, b in enumerate(self.idx):
                if all(b[k] <= a[k] for k in range(3)):
                    diff = (a[0] - b[0], a[1] - b[1], a[2] - b[2])
                    m2m.append((ia, ib, pos[diff], 1.0 / _mfact(diff)))
                    l2l.append((ib, ia, pos[diff], _mfact(a) / (_mfact(b) * _mfact(diff))))
        self.m2m = _pack(m2m)
        self.l2l = _pack(l2l)

        m2l = []  # L[b] += M[a] * T[a+b] * (-1)^|a| (a+b)!/b!
        for ia, a in enumerate(self.idx):
            for ib, b in enumerate(self.idx):
                g = (a[0] + b[0], a[1] + b[1], a[2] + b[2])
                if sum(g) < p:
                    c = (-1.0) ** sum(a) * _mfact(g) / _mfact(b)
                    m2l.append((ib, ia, pos[g], c))
        self.m2l = _pack(m2l)

        # derivative of monomials: d/dy_i y^b = b_i y^(b - e_i)
        grad = []
        for ib, b in enumerate(self.idx):
            for ax in range(3):
                if b[ax] >= 1:
                    lower = list(b)
                    lower[ax] -= 1
                    grad.append((ax, ib, pos[tuple(lower)], float(b[ax])))
        self.grad = grad


def _pack(entries):
    """Split entries into index arrays plus a 0/1 scatter matrix onto targets."""
    t = np.array([e[0] for e in entries], dtype=np.int64)
    s = np.array([e[1] for e in entries], dtype=np.int64)
    k = np.array([e[2] for e in entries], dtype=np.int64)
    c = np.array([e[3] for e in entries], dtype=float)
    scatter = np.zeros((len(entries), int(t.max()) + 1))
    scatter[np.arange(len(entries)), t] = 1.0
    return s, k, c, scatter


@lru_cache(maxsize=None)
def tables(p: int) -> Tables:
    return Tables(p)


def monomials(d: np.ndarray, p: int) -> np.ndarray:
    """All monomials d^a with |a| < p for an (n, 3) array; returns (n, nterms)."""
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    tab = tables(p)
    pw = np.ones((p, len(d), 3))
    for k in range(1, p):
        pw[k] = pw[k - 1] * d
    e = tab.exps
    return pw[e[:, 0], :, 0].T * pw[e[:, 1], :, 1].T * pw[e[:, 2], :, 2].T


def derivative_tensor(r: np.ndarray, p: int) -> np.ndarray:
    """Scaled derivatives T_g(r) = d^g (1/|r|) / g! for |g| < p; shape (n, nterms).

    Uses the three-term recurrence
    |g| |r|^2 T_g + (2|g| - 1) sum_i r_i T_{g-e_i} + (|g| - 1) sum_i T_{g-2e_i} = 0.
    """
    r = np.asarray(r, dtype=float).reshape(-1, 3)
    tab = tables(p)
    r2 = np.einsum("ij,ij->i", r, r)
    out = np.empty((len(r), tab.nterms))
    out[:, 0] = 1.0 / np.sqrt(r2)
    inv_r2 = 1.0 / r2
    for g, deg, one, two in tab.recurrence:
        acc = np.zeros(len(r))
        for ax, j in one:
            acc += r[:, ax] * out[:, j]
        acc *= 2 * deg - 1
        if two:
            acc2 = np.zeros(len(r))
            for j in two:
                acc2 += out[:, j]
            acc += (deg - 1) * acc2
        out[:, g] = -acc * inv_r2 / deg
    return out


def p2m(pos: np.ndarray, q: np.ndarray, center: np.ndarray, p: int) -> np.ndarray:
    """Multipole moments of sources about ``center``."""
    mono = monomials(np.asarray(pos) - center, p)
    return (q[:, None] * mono).sum(axis=0) / tables(p).fact


def m2m(m_child: np.ndarray, shift: np.ndarray, p: int) -> np.ndarray:
    """Translate child moments (n, nterms) by ``shift = c_child - c_parent`` (n, 3)."""
    m_child = np.atleast_2d(m_child)
    s, k, c, scatter = tables(p).m2m
    mono = monomials(shift, p)
    return (m_child[:, s] * mono[:, k] * c) @ scatter


def m2p(m: np.ndarray, center: np.ndarray, x: np.ndarray, p: int) -> np.ndarray:
    """Evaluate a multipole expansion at target points."""
    tab = tables(p)
    d = derivative_tensor(np.asarray(x, dtype=float).reshape(-1, 3) - center, p)
    return d @ (tab.sign * tab.fact * m)


def m2l(m: np.ndarray, r: np.ndarray, p: int) -> np.ndarray:
    """Local coefficients (n, nterms) from moments (n, nterms) at offsets r = x_t - c_s."""
    m = np.atleast_2d(m)
    s, k, c, scatter = tables(p).m2l
    deriv = derivative_tensor(r, p)
    return (m[:, s] * deriv[:, k] * c) @ scatter


def l2l(l_parent: np.ndarray, shift: np.ndarray, p: int) -> np.ndarray:
    """Shift local coefficients by ``shift = c_child - c_parent``."""
    l_parent = np.atleast_2d(l_parent)
    s, k, c, scatter = tables(p).l2l
    mono = monomials(shift, p)
    return (l_parent[:, s] * mono[:, k] * c) @ scatter


def l2p(l: np.ndarray, center: np.ndarray, x: np.ndarray, p: int, gradient: bool = False):
    """Evaluate local expansion(s) at points. ``l`` may be one row or one row per point."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    mono = monomials(x - center, p)
    l = np.broadcast_to(l, mono.shape)
    phi = np.einsum("ij,ij->i", mono, l)
    if not gradient:
        return phi
    g = np.zeros((len(x), 3))
    for ax, ib, lower, coef in tables(p).grad:
        g[:, ax] += coef * l[:, ib] * mono[:, lower]
    return phi, g
