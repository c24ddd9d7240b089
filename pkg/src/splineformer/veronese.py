"""Graded-lexicographic monomial enumeration, Veronese evaluation, and the
factorizations that route monomials between quadratic stages."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

from .spline import Monomial, ONE
from .tensor import Mat, ShapeError


def veronese_dim(nvars: int, k: int) -> int:
    """Number of monomials of degree <= k in nvars variables."""
    if nvars < 1 or k < 1:
        raise ValueError(f"need nvars >= 1 and k >= 1, got ({nvars}, {k})")
    return math.comb(nvars + k, k)


def graded_lex_monomials(varlist: Sequence[tuple], k: int) -> tuple:
    """All monomials of degree <= k over the ordered variables, graded-lex.

    The constant comes first, then the variables in the given order, then
    degree-2 products, and so on.
    """
    out = []
    for d in range(k + 1):
        for combo in itertools.combinations_with_replacement(range(len(varlist)), d):
            exps: dict = {}
            for idx in combo:
                v = varlist[idx]
                exps[v] = exps.get(v, 0) + 1
            out.append(Monomial.from_dict(exps))
    return tuple(out)


@dataclass(frozen=True)
class VeroneseIndex:
    """Ordered monomial basis of degree <= k over an n x p matrix's entries."""

    n: int
    p: int
    k: int
    monomials: tuple

    @staticmethod
    def for_matrix(n: int, p: int, k: int) -> "VeroneseIndex":
        varlist = [(i, j) for i in range(1, n + 1) for j in range(1, p + 1)]
        return VeroneseIndex(n, p, k, graded_lex_monomials(varlist, k))

    def __len__(self):
        return len(self.monomials)

    def position(self, m: Monomial) -> int:
        return self.monomials.index(m)

    def monomial_at(self, idx: int) -> Monomial:
        return self.monomials[idx]


def veronese_eval(idx: VeroneseIndex, x: Mat) -> Mat:
    """Column vector of the monomial values, in index order."""
    if x.shape != (idx.n, idx.p):
        raise ShapeError(f"input {x.shape} does not match index over {idx.n}x{idx.p}")
    return Mat(x.backend, tuple((m.eval(x),) for m in idx.monomials))


def factor_split(m: Monomial, cap: int) -> tuple:
    """Greedy split of a monomial into factors of degree <= cap.

    Exponents are consumed in variable order, filling each factor up to
    the cap before starting the next; the product of the factors always
    recovers the input.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    factors = []
    current: dict = {}
    room = cap
    for v, e in m.exps:
        while e > 0:
            if room == 0:
                factors.append(Monomial.from_dict(current))
                current, room = {}, cap
            take = min(e, room)
            current[v] = current.get(v, 0) + take
            e -= take
            room -= take
    if current:
        factors.append(Monomial.from_dict(current))
    return tuple(factors)


def factor_pair(m: Monomial, cap: int) -> tuple:
    """Split into exactly two factors of degree <= cap (degree <= 2*cap)."""
    if m.degree > 2 * cap:
        raise ValueError(f"degree {m.degree} exceeds 2*{cap}")
    parts = factor_split(m, cap)
    if len(parts) == 1:
        return (parts[0], ONE)
    return parts


def compose_cover(k: int, k2: int, nvars: int) -> dict:
    """Factorization table: every monomial of degree <= k*k2 over nvars
    column-vector variables mapped to <= k factors of degree <= k2."""
    varlist = [(i, 1) for i in range(1, nvars + 1)]
    table = {}
    for m in graded_lex_monomials(varlist, k * k2):
        table[m] = factor_split(m, k2)
    return table
