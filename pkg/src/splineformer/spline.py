"""Sparse-monomial polynomials, max-min spline forms, and the lattice
expression language used to author them.

Coefficients are exact rationals throughout, so every evaluation here is
an exact oracle.  Variables are matrix coordinates (i, j), 1-based.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .tensor import Mat, Scalar


class VariableRangeError(ValueError):
    """A polynomial mentions a variable outside the input shape."""


class UnsupportedProductError(ValueError):
    """Product whose factors both contain max/min; not reducible here."""


# -- monomials -------------------------------------------------------------

@dataclass(frozen=True)
class Monomial:
    """Product of matrix-entry variables; exps is a sorted ((i,j), e) tuple."""

    exps: tuple

    @staticmethod
    def from_dict(d: Mapping[tuple, int]) -> "Monomial":
        items = tuple(sorted((v, e) for v, e in d.items() if e))
        for (i, j), e in items:
            if e < 0 or i < 1 or j < 1:
                raise ValueError(f"bad exponent entry {((i, j), e)}")
        return Monomial(items)

    @staticmethod
    def variable(i: int, j: int) -> "Monomial":
        return Monomial((((i, j), 1),))

    @property
    def degree(self) -> int:
        return sum(e for _, e in self.exps)

    def mul(self, other: "Monomial") -> "Monomial":
        d = dict(self.exps)
        for v, e in other.exps:
            d[v] = d.get(v, 0) + e
        return Monomial.from_dict(d)

    def variables(self) -> tuple:
        return tuple(v for v, _ in self.exps)

    def eval(self, x: Mat) -> Scalar:
        acc = Fraction(1) if x.backend == "rational" else 1.0
        for (i, j), e in self.exps:
            if i > x.rows or j > x.cols:
                raise VariableRangeError(f"variable x_{i}_{j} outside {x.rows}x{x.cols} input")
            acc = acc * x.at(i - 1, j - 1) ** e
        return acc

    def __repr__(self):
        if not self.exps:
            return "1"
        return "*".join(f"x_{i}_{j}" + (f"^{e}" if e > 1 else "") for (i, j), e in self.exps)


ONE = Monomial(())


# -- polynomials -----------------------------------------------------------

@dataclass(frozen=True)
class Polynomial:
    """terms: canonical sorted tuple of (Monomial, nonzero Fraction)."""

    terms: tuple

    @staticmethod
    def from_terms(terms: Mapping[Monomial, Fraction]) -> "Polynomial":
        kept = {m: Fraction(c) for m, c in terms.items() if c != 0}
        return Polynomial(tuple(sorted(kept.items(), key=lambda t: (t[0].degree, t[0].exps))))

    @staticmethod
    def constant(c) -> "Polynomial":
        return Polynomial.from_terms({ONE: Fraction(c)})

    @staticmethod
    def variable(i: int, j: int) -> "Polynomial":
        return Polynomial.from_terms({Monomial.variable(i, j): Fraction(1)})

    @property
    def degree(self) -> int:
        return max((m.degree for m, _ in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, m: Monomial) -> Fraction:
        for mon, c in self.terms:
            if mon == m:
                return c
        return Fraction(0)

    def support(self) -> tuple:
        return tuple(m for m, _ in self.terms)

    def add(self, other: "Polynomial") -> "Polynomial":
        d = dict(self.terms)
        for m, c in other.terms:
            d[m] = d.get(m, Fraction(0)) + c
        return Polynomial.from_terms(d)

    def neg(self) -> "Polynomial":
        return Polynomial(tuple((m, -c) for m, c in self.terms))

    def sub(self, other: "Polynomial") -> "Polynomial":
        return self.add(other.neg())

    def scale(self, c) -> "Polynomial":
        return Polynomial.from_terms({m: k * Fraction(c) for m, k in self.terms})

    def mul(self, other: "Polynomial") -> "Polynomial":
        d: dict = {}
        for m1, c1 in self.terms:
            for m2, c2 in other.terms:
                m = m1.mul(m2)
                d[m] = d.get(m, Fraction(0)) + c1 * c2
        return Polynomial.from_terms(d)

    def eval(self, x: Mat) -> Scalar:
        acc = Fraction(0) if x.backend == "rational" else 0.0
        for m, c in self.terms:
            acc = acc + c * m.eval(x)
        return acc

    def __repr__(self):
        if not self.terms:
            return "0"
        return " + ".join(f"{c}*{m!r}" for m, c in self.terms)


def eval_poly(poly: Polynomial, x: Mat) -> Scalar:
    return poly.eval(x)


# -- max-min (Pierce-Birkhoff style) forms ----------------------------------

@dataclass(frozen=True)
class PBForm:
    """Value = max over rows of (min of the polynomials within the row)."""

    rows: tuple

    def __post_init__(self):
        if not self.rows or any(not r for r in self.rows):
            raise ValueError("max-min form needs at least one nonempty row")

    @staticmethod
    def of_poly(p: Polynomial) -> "PBForm":
        return PBForm(((p,),))

    @staticmethod
    def of_rows(rows: Sequence[Sequence[Polynomial]]) -> "PBForm":
        return PBForm(tuple(tuple(r) for r in rows))

    @property
    def degree(self) -> int:
        return max(p.degree for row in self.rows for p in row)

    def support(self) -> set:
        return {m for row in self.rows for p in row for m in p.support()}

    def variables(self) -> set:
        return {v for m in self.support() for v in m.variables()}

    def eval(self, x: Mat) -> Scalar:
        return max(min(p.eval(x) for p in row) for row in self.rows)


def eval_pbform(f: PBForm, x: Mat) -> Scalar:
    return f.eval(x)


def degree(f: PBForm) -> int:
    return f.degree


def pb_max(forms: Sequence[PBForm]) -> PBForm:
    return PBForm(tuple(row for f in forms for row in f.rows))


def pb_min(forms: Sequence[PBForm]) -> PBForm:
    # min of max-min forms: distribute, one row drawn from each operand
    rows = [()]
    for f in forms:
        rows = [acc + r for acc in rows for r in f.rows]
    return PBForm(tuple(rows))


def pb_sum(a: PBForm, b: PBForm) -> PBForm:
    # max distributes over + on the outside, min on the inside
    return PBForm(tuple(
        tuple(p.add(q) for p in ra for q in rb)
        for ra in a.rows for rb in b.rows))


def pb_negate(f: PBForm) -> PBForm:
    """-f re-expressed as max-min (lattice distribution over row choices)."""
    choices = itertools.product(*[range(len(r)) for r in f.rows])
    return PBForm(tuple(
        tuple(f.rows[i][k].neg() for i, k in enumerate(choice))
        for choice in choices))


def pb_scale(f: PBForm, c) -> PBForm:
    c = Fraction(c)
    if c == 0:
        return PBForm.of_poly(Polynomial.from_terms({}))
    if c > 0:
        return PBForm(tuple(tuple(p.scale(c) for p in row) for row in f.rows))
    return pb_scale(pb_negate(f), -c)


def _pb_scale_positive_poly(f: PBForm, c: Polynomial) -> PBForm:
    # valid only for c pointwise positive (used with q^2 + 1)
    return PBForm(tuple(tuple(p.mul(c) for p in row) for row in f.rows))


# -- lattice expression trees -----------------------------------------------

@dataclass(frozen=True)
class Const:
    value: Fraction


@dataclass(frozen=True)
class Var:
    i: int
    j: int


@dataclass(frozen=True)
class Sum:
    args: tuple


@dataclass(frozen=True)
class Prod:
    args: tuple


@dataclass(frozen=True)
class ScaleE:
    coef: Fraction
    arg: object


@dataclass(frozen=True)
class Max:
    args: tuple


@dataclass(frozen=True)
class Min:
    args: tuple


def const(c) -> Const:
    return Const(Fraction(c))


def var(i: int, j: int = 1) -> Var:
    return Var(i, j)


def esum(*args) -> Sum:
    return Sum(tuple(args))


def eprod(*args) -> Prod:
    return Prod(tuple(args))


def escale(c, arg) -> ScaleE:
    return ScaleE(Fraction(c), arg)


def emax(*args) -> Max:
    return Max(tuple(args))


def emin(*args) -> Min:
    return Min(tuple(args))


def eval_maxdef(e, x: Mat) -> Scalar:
    if isinstance(e, Const):
        return e.value if x.backend == "rational" else float(e.value)
    if isinstance(e, Var):
        if e.i > x.rows or e.j > x.cols:
            raise VariableRangeError(f"variable x_{e.i}_{e.j} outside {x.rows}x{x.cols} input")
        return x.at(e.i - 1, e.j - 1)
    if isinstance(e, Sum):
        return sum(eval_maxdef(a, x) for a in e.args)
    if isinstance(e, Prod):
        acc = Fraction(1) if x.backend == "rational" else 1.0
        for a in e.args:
            acc = acc * eval_maxdef(a, x)
        return acc
    if isinstance(e, ScaleE):
        return e.coef * eval_maxdef(e.arg, x)
    if isinstance(e, Max):
        return max(eval_maxdef(a, x) for a in e.args)
    if isinstance(e, Min):
        return min(eval_maxdef(a, x) for a in e.args)
    raise TypeError(f"malformed expression node {e!r}")


def _is_pure_poly(e) -> bool:
    if isinstance(e, (Const, Var)):
        return True
    if isinstance(e, (Sum, Prod)):
        return all(_is_pure_poly(a) for a in e.args)
    if isinstance(e, ScaleE):
        return _is_pure_poly(e.arg)
    return False


def _to_polynomial(e) -> Polynomial:
    if isinstance(e, Const):
        return Polynomial.constant(e.value)
    if isinstance(e, Var):
        return Polynomial.variable(e.i, e.j)
    if isinstance(e, Sum):
        acc = Polynomial.from_terms({})
        for a in e.args:
            acc = acc.add(_to_polynomial(a))
        return acc
    if isinstance(e, Prod):
        acc = Polynomial.constant(1)
        for a in e.args:
            acc = acc.mul(_to_polynomial(a))
        return acc
    if isinstance(e, ScaleE):
        return _to_polynomial(e.arg).scale(e.coef)
    raise TypeError(f"not a polynomial subtree: {e!r}")


def _fold_binary(node_cls, args):
    if len(args) == 1:
        return args[0]
    return node_cls((args[0], _fold_binary(node_cls, args[1:])))


def _poly_times_plus(q: Polynomial, d) -> PBForm:
    """q * max(d, 0) via the sign-split identity with the polynomial factor.

    q*d+ = max(min(q*d, (q^2+1)*d), min(0, -(q^2+1)*d)); the factor q^2+1
    is pointwise positive, so it distributes straight into the form of d.
    """
    qd = _poly_times_expr(q, d)
    c = q.mul(q).add(Polynomial.constant(1))
    cd = _pb_scale_positive_poly(normalize_to_pbform(d), c)
    zero = PBForm.of_poly(Polynomial.from_terms({}))
    return pb_max([pb_min([qd, cd]), pb_min([zero, pb_negate(cd)])])


def _poly_times_expr(q: Polynomial, e) -> PBForm:
    if _is_pure_poly(e):
        return PBForm.of_poly(q.mul(_to_polynomial(e)))
    if isinstance(e, Sum):
        acc = None
        for a in e.args:
            part = _poly_times_expr(q, a)
            acc = part if acc is None else pb_sum(acc, part)
        return acc
    if isinstance(e, ScaleE):
        return _poly_times_expr(q.scale(e.coef), e.arg)
    if isinstance(e, Prod):
        polys = [a for a in e.args if _is_pure_poly(a)]
        others = [a for a in e.args if not _is_pure_poly(a)]
        if len(others) != 1:
            raise UnsupportedProductError(f"product with several max/min factors: {e!r}")
        for a in polys:
            q = q.mul(_to_polynomial(a))
        return _poly_times_expr(q, others[0])
    if isinstance(e, Max):
        a = _fold_binary(Max, e.args)
        if not isinstance(a, Max):
            return _poly_times_expr(q, a)
        lhs, rhs = a.args
        # q*max(a,b) = q*a + q*(b-a)+
        diff = Sum((rhs, ScaleE(Fraction(-1), lhs)))
        return pb_sum(_poly_times_expr(q, lhs), _poly_times_plus(q, diff))
    if isinstance(e, Min):
        a = _fold_binary(Min, e.args)
        if not isinstance(a, Min):
            return _poly_times_expr(q, a)
        lhs, rhs = a.args
        # q*min(a,b) = q*a - q*(a-b)+
        diff = Sum((lhs, ScaleE(Fraction(-1), rhs)))
        return pb_sum(_poly_times_expr(q, lhs), pb_negate(_poly_times_plus(q, diff)))
    raise TypeError(f"malformed expression node {e!r}")


def normalize_to_pbform(e) -> PBForm:
    """Reduce a lattice expression to a max-min form over polynomials.

    Handles sums, scalar multiples, max/min, and products where at least
    one factor is a pure polynomial; products of two max/min-bearing
    factors are rejected.
    """
    if _is_pure_poly(e):
        return PBForm.of_poly(_to_polynomial(e))
    if isinstance(e, Max):
        return pb_max([normalize_to_pbform(a) for a in e.args])
    if isinstance(e, Min):
        return pb_min([normalize_to_pbform(a) for a in e.args])
    if isinstance(e, Sum):
        acc = None
        for a in e.args:
            part = normalize_to_pbform(a)
            acc = part if acc is None else pb_sum(acc, part)
        return acc
    if isinstance(e, ScaleE):
        return pb_scale(normalize_to_pbform(e.arg), e.coef)
    if isinstance(e, Prod):
        polys = [a for a in e.args if _is_pure_poly(a)]
        others = [a for a in e.args if not _is_pure_poly(a)]
        if len(others) != 1:
            raise UnsupportedProductError(f"product with several max/min factors: {e!r}")
        q = Polynomial.constant(1)
        for a in polys:
            q = q.mul(_to_polynomial(a))
        return _poly_times_expr(q, others[0])
    raise TypeError(f"malformed expression node {e!r}")


# -- matrix-valued spline grids ----------------------------------------------

@dataclass(frozen=True)
class SplineGrid:
    """r x p grid of scalar max-min forms over the entries of an n x p input."""

    n: int
    p: int
    grid: tuple  # tuple of r rows, each a tuple of p PBForm

    def __post_init__(self):
        if not self.grid or any(len(row) != self.p for row in self.grid):
            raise ValueError(f"grid must be r x {self.p}")
        for row in self.grid:
            for f in row:
                for (i, j) in f.variables():
                    if i > self.n or j > self.p:
                        raise VariableRangeError(
                            f"variable x_{i}_{j} outside {self.n}x{self.p} input")

    @property
    def r(self) -> int:
        return len(self.grid)

    @property
    def degree(self) -> int:
        return max(f.degree for row in self.grid for f in row)

    def column(self, j: int) -> tuple:
        """The r forms producing output column j (1-based)."""
        return tuple(row[j - 1] for row in self.grid)

    def eval(self, x: Mat) -> Mat:
        return Mat(x.backend, tuple(tuple(f.eval(x) for f in row) for row in self.grid))


# -- JSON wire format ---------------------------------------------------------

def _poly_to_json(p: Polynomial):
    return {"op": "poly", "terms": [
        {"coef": str(c), "exps": {f"x_{i}_{j}": e for (i, j), e in m.exps}}
        for m, c in p.terms]}


def expr_to_json(f: PBForm):
    if len(f.rows) == 1 and len(f.rows[0]) == 1:
        return _poly_to_json(f.rows[0][0])
    return {"op": "max", "args": [
        {"op": "min", "args": [_poly_to_json(p) for p in row]} if len(row) > 1
        else _poly_to_json(row[0])
        for row in f.rows]}


def _parse_var_key(key: str) -> tuple:
    parts = key.split("_")
    if len(parts) != 3 or parts[0] != "x":
        raise ValueError(f"bad variable key {key!r}, expected x_<i>_<j>")
    return (int(parts[1]), int(parts[2]))


def expr_from_json(obj):
    """Parse {"op": "max"|"min"|"poly", ...} into a lattice expression."""
    op = obj.get("op")
    if op == "poly":
        terms: dict = {}
        for t in obj["terms"]:
            m = Monomial.from_dict({_parse_var_key(k): e for k, e in t["exps"].items()})
            terms[m] = terms.get(m, Fraction(0)) + Fraction(t["coef"])
        p = Polynomial.from_terms(terms)
        args = []
        for m, c in p.terms:
            node = const(c) if not m.exps else None
            if node is None:
                factors = [var(i, j) for (i, j), e in m.exps for _ in range(e)]
                node = factors[0] if len(factors) == 1 else Prod(tuple(factors))
                if c != 1:
                    node = ScaleE(c, node)
            args.append(node)
        if not args:
            return const(0)
        return args[0] if len(args) == 1 else Sum(tuple(args))
    if op == "max":
        return Max(tuple(expr_from_json(a) for a in obj["args"]))
    if op == "min":
        return Min(tuple(expr_from_json(a) for a in obj["args"]))
    raise ValueError(f"unknown expression op {op!r}")


def grid_to_json(g: SplineGrid):
    return {"n": g.n, "p": g.p,
            "grid": [[expr_to_json(f) for f in row] for row in g.grid]}


def grid_from_json(obj) -> SplineGrid:
    n, p = int(obj["n"]), int(obj["p"])
    grid = tuple(
        tuple(normalize_to_pbform(expr_from_json(cell)) for cell in row)
        for row in obj["grid"])
    return SplineGrid(n, p, grid)
