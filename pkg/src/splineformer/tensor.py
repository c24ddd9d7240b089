"""Dense matrices over exact rationals or binary64 floats.

Every value is immutable after construction.  The rational backend does
exact arithmetic through `fractions.Fraction` and never holds -inf; the
float backend admits -inf as a distinguished score value so that masking
and SoftMax exclusion behave as expected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

Scalar = Union[Fraction, float]

RATIONAL = "rational"
FLOAT = "float"

NEG_INF = float("-inf")


class ShapeError(ValueError):
    """Matrix dimensions do not line up for the requested operation."""


class BackendError(ValueError):
    """Operation applied to a matrix with an unsupported scalar backend."""


class DegenerateColumnError(ValueError):
    """SoftMax column with no finite entry."""


def _coerce_rational(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, str)):
        return Fraction(x)
    raise BackendError(f"cannot place {x!r} in a rational matrix")


def _coerce_float(x) -> float:
    if isinstance(x, str):
        if x == "-inf":
            return NEG_INF
        return float(Fraction(x))
    return float(x)


@dataclass(frozen=True)
class Mat:
    """Row-major dense matrix; `data` is a tuple of row tuples."""

    backend: str
    data: tuple

    def __post_init__(self):
        if self.backend not in (RATIONAL, FLOAT):
            raise BackendError(f"unknown backend {self.backend!r}")
        if not self.data or not self.data[0]:
            raise ShapeError("matrices must have at least one row and column")
        width = len(self.data[0])
        if any(len(row) != width for row in self.data):
            raise ShapeError("ragged rows")

    # -- constructors ---------------------------------------------------

    @staticmethod
    def rational(rows: Iterable[Iterable]) -> "Mat":
        return Mat(RATIONAL, tuple(tuple(_coerce_rational(x) for x in row) for row in rows))

    @staticmethod
    def from_floats(rows: Iterable[Iterable]) -> "Mat":
        return Mat(FLOAT, tuple(tuple(_coerce_float(x) for x in row) for row in rows))

    @staticmethod
    def zeros(rows: int, cols: int, backend: str = RATIONAL) -> "Mat":
        zero = Fraction(0) if backend == RATIONAL else 0.0
        return Mat(backend, tuple((zero,) * cols for _ in range(rows)))

    @staticmethod
    def identity(n: int, backend: str = RATIONAL) -> "Mat":
        one = Fraction(1) if backend == RATIONAL else 1.0
        zero = Fraction(0) if backend == RATIONAL else 0.0
        return Mat(backend, tuple(tuple(one if i == j else zero for j in range(n)) for i in range(n)))

    @staticmethod
    def basis(rows: int, cols: int, i: int, j: int, backend: str = RATIONAL) -> "Mat":
        """Standard basis matrix with a one in (i, j), 1-based."""
        if not (1 <= i <= rows and 1 <= j <= cols):
            raise ShapeError(f"basis index ({i},{j}) outside {rows}x{cols}")
        one = Fraction(1) if backend == RATIONAL else 1.0
        zero = Fraction(0) if backend == RATIONAL else 0.0
        return Mat(backend, tuple(tuple(one if (r + 1, c + 1) == (i, j) else zero for c in range(cols)) for r in range(rows)))

    @staticmethod
    def column(entries: Sequence, backend: str = RATIONAL) -> "Mat":
        coerce = _coerce_rational if backend == RATIONAL else _coerce_float
        return Mat(backend, tuple((coerce(x),) for x in entries))

    # -- views ----------------------------------------------------------

    @property
    def rows(self) -> int:
        return len(self.data)

    @property
    def cols(self) -> int:
        return len(self.data[0])

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def at(self, i: int, j: int) -> Scalar:
        """0-based entry access."""
        return self.data[i][j]

    def col_entries(self, j: int) -> tuple:
        return tuple(row[j] for row in self.data)

    def to_float(self) -> "Mat":
        if self.backend == FLOAT:
            return self
        return Mat(FLOAT, tuple(tuple(float(x) for x in row) for row in self.data))

    def max_abs(self) -> Scalar:
        return max(abs(x) for row in self.data for x in row)

    def __repr__(self):
        return f"Mat({self.backend}, {self.rows}x{self.cols})"


@dataclass(frozen=True)
class MaskedScores:
    """Square score matrix whose strictly-lower triangle is pinned out.

    The rational backend cannot hold -inf, so masking is recorded as a
    structural flag and consumed by the activation; the result is the
    same as applying the activation to the -inf-masked float matrix.
    """

    mat: Mat


def _require_same_backend(a: Mat, b: Mat, op: str):
    if a.backend != b.backend:
        raise BackendError(f"{op}: mixed backends {a.backend}/{b.backend}")


def matmul(a: Mat, b: Mat) -> Mat:
    _require_same_backend(a, b, "matmul")
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    zero = Fraction(0) if a.backend == RATIONAL else 0.0
    bdata = b.data
    out = []
    for arow in a.data:
        acc = [zero] * b.cols
        for k, aik in enumerate(arow):
            if not aik:
                continue
            brow = bdata[k]
            for j, bkj in enumerate(brow):
                if bkj:
                    acc[j] = acc[j] + aik * bkj
        out.append(tuple(acc))
    return Mat(a.backend, tuple(out))


def add(a: Mat, b: Mat) -> Mat:
    _require_same_backend(a, b, "add")
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return Mat(a.backend, tuple(tuple(x + y for x, y in zip(ra, rb)) for ra, rb in zip(a.data, b.data)))


def sub(a: Mat, b: Mat) -> Mat:
    _require_same_backend(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return Mat(a.backend, tuple(tuple(x - y for x, y in zip(ra, rb)) for ra, rb in zip(a.data, b.data)))


def scale(a: Mat, c: Scalar) -> Mat:
    return Mat(a.backend, tuple(tuple(c * x for x in row) for row in a.data))


def transpose(a: Mat) -> Mat:
    return Mat(a.backend, tuple(zip(*a.data)))


def stack_rows(parts: Sequence[Mat]) -> Mat:
    """Vertically stack matrices sharing a column count."""
    if not parts:
        raise ShapeError("stack_rows: empty list")
    width = parts[0].cols
    backend = parts[0].backend
    for m in parts[1:]:
        if m.cols != width:
            raise ShapeError(f"stack_rows: column mismatch {m.cols} vs {width}")
        if m.backend != backend:
            raise BackendError("stack_rows: mixed backends")
    return Mat(backend, tuple(row for m in parts for row in m.data))


def broadcast_cols(v: Mat, p: int) -> Mat:
    """Repeat a column vector across p columns (bias broadcast)."""
    if v.cols != 1:
        raise ShapeError(f"broadcast_cols expects a column vector, got {v.shape}")
    return Mat(v.backend, tuple(tuple(row[0] for _ in range(p)) for row in v.data))


def relu(m) -> Mat:
    """Entrywise max(x, 0); accepts masked scores and zeroes their lower triangle."""
    if isinstance(m, MaskedScores):
        inner = m.mat
        zero = Fraction(0) if inner.backend == RATIONAL else 0.0
        return Mat(inner.backend, tuple(
            tuple((x if x > 0 else zero) if i <= j else zero for j, x in enumerate(row))
            for i, row in enumerate(inner.data)))
    zero = Fraction(0) if m.backend == RATIONAL else 0.0
    return Mat(m.backend, tuple(tuple(x if x > 0 else zero for x in row) for row in m.data))


def softmax_columns(m) -> Mat:
    """Columnwise softmax on the float backend; -inf entries map to exactly 0."""
    if isinstance(m, MaskedScores):
        raise BackendError("softmax on a structurally masked rational matrix; use the float backend")
    if m.backend != FLOAT:
        raise BackendError("softmax requires the float backend")
    cols = []
    for j in range(m.cols):
        entries = m.col_entries(j)
        finite = [x for x in entries if x != NEG_INF]
        if not finite:
            raise DegenerateColumnError(f"column {j} is entirely -inf")
        top = max(finite)
        exps = [0.0 if x == NEG_INF else math.exp(x - top) for x in entries]
        total = sum(exps)
        cols.append([e / total for e in exps])
    return Mat(FLOAT, tuple(tuple(cols[j][i] for j in range(m.cols)) for i in range(m.rows)))


def _softplus_scalar(x: float, beta: float) -> float:
    if x == NEG_INF:
        return 0.0
    z = beta * x
    if z > 0:
        return x + math.log1p(math.exp(-z)) / beta
    return math.log1p(math.exp(z)) / beta


def softplus_beta(m, beta: float) -> Mat:
    """Entrywise log(1 + exp(beta*x)) / beta, computed overflow-safely."""
    if beta <= 0:
        raise ValueError(f"softplus beta must be positive, got {beta}")
    if isinstance(m, MaskedScores):
        inner = m.mat.to_float()
        return Mat(FLOAT, tuple(
            tuple(_softplus_scalar(x, beta) if i <= j else 0.0 for j, x in enumerate(row))
            for i, row in enumerate(inner.data)))
    if m.backend != FLOAT:
        raise BackendError("softplus requires the float backend")
    return Mat(FLOAT, tuple(tuple(_softplus_scalar(x, beta) for x in row) for row in m.data))


def apply_mask(m: Mat):
    """Pin the strictly-lower triangle of a square score matrix.

    Float backend: entries below the diagonal become -inf.  Rational
    backend: returns MaskedScores, a structural flag consumed by the
    activation (equivalent to ReLU after the -inf mask).
    """
    if m.rows != m.cols:
        raise ShapeError(f"mask needs a square matrix, got {m.shape}")
    if m.backend == RATIONAL:
        return MaskedScores(m)
    return Mat(FLOAT, tuple(
        tuple(x if i <= j else NEG_INF for j, x in enumerate(row))
        for i, row in enumerate(m.data)))


# -- JSON wire format ----------------------------------------------------

def mat_to_json(m: Mat):
    """Array-of-rows; rationals as "p/q" strings, floats as numbers, -inf as "-inf"."""
    if m.backend == RATIONAL:
        return [[str(x) for x in row] for row in m.data]
    return [["-inf" if x == NEG_INF else x for x in row] for row in m.data]


def mat_from_json(obj) -> Mat:
    entries = [x for row in obj for x in row]
    rational = any(isinstance(x, str) and x != "-inf" for x in entries)
    if rational:
        if any(x == "-inf" for x in entries):
            raise BackendError("rational matrices cannot hold -inf")
        return Mat.rational(obj)
    return Mat.from_floats(obj)
