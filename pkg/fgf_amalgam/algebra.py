from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Tuple, Union

from .errors import DomainError, ValidationError

log = logging.getLogger("fgf_amalgam.algebra")

# Exact nonnegative rationals; Fraction keeps itself reduced with a positive denominator.
Ratio = Fraction

MATRIX = "matrix"
DIFFUSE_TYPE_I = "diffuse_typeI"
HYPERFINITE_II1 = "hyperfinite_II1"
FGF = "fgf"

KINDS = (MATRIX, DIFFUSE_TYPE_I, HYPERFINITE_II1, FGF)
_KIND_RANK = {MATRIX: 0, DIFFUSE_TYPE_I: 1, HYPERFINITE_II1: 2, FGF: 3}

ZERO = Fraction(0)
ONE = Fraction(1)

RatioLike = Union[Fraction, int, str]


def ratio(value: RatioLike) -> Fraction:
    """
    Parses an exact rational: a Fraction, an int, or a "p/q" / "p" string in lowest terms
    with q > 0. Floats are refused; nothing in the computation path is allowed to round.
    """
    if isinstance(value, bool):
        raise ValidationError(f"not a rational: {value!r}")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        s = value.strip()
        try:
            num, _, den = s.partition("/")
            if not den:
                return Fraction(int(num))
            p, q = int(num), int(den)
            x = Fraction(p, q)
        except (ValueError, ZeroDivisionError):
            raise ValidationError(f"not a rational 'p/q': {value!r}") from None
        if q < 0 or math.gcd(p, q) != 1:
            raise ValidationError(f"rational not in lowest terms: {value!r} (write {format_ratio(x)!r})")
        return x
    raise ValidationError(f"not a rational (floats are not accepted): {value!r}")


def format_ratio(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    return f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class Summand:
    """
    One central summand with its central-support trace.

    kind MATRIX carries size n and the trace of a minimal projection (min_trace);
    DIFFUSE_TYPE_I carries size n (L-infinity tensor M_n); FGF carries the parameter s > 1.
    """

    kind: str
    central_trace: Fraction
    size: int = 1
    min_trace: Optional[Fraction] = None
    param: Optional[Fraction] = None

    def __post_init__(self) -> None:
        if self.kind not in _KIND_RANK:
            raise ValidationError(f"unknown summand kind {self.kind!r}")
        if self.central_trace <= 0:
            raise ValidationError(f"{self.kind} summand needs centralTrace > 0, got {format_ratio(self.central_trace)}")
        if self.size < 1:
            raise ValidationError(f"{self.kind} summand needs size >= 1, got {self.size}")
        if self.kind == MATRIX:
            if self.min_trace is None or self.min_trace * self.size != self.central_trace:
                raise ValidationError(
                    f"matrix summand M_{self.size}: centralTrace {format_ratio(self.central_trace)} "
                    f"!= size x minTrace"
                )
        elif self.min_trace is not None:
            raise ValidationError(f"minTrace is only meaningful for matrix summands (got {self.kind})")
        if self.kind == FGF:
            if self.param is None or self.param <= 1:
                raise ValidationError("free group factor parameter must satisfy s > 1")
        elif self.param is not None:
            raise ValidationError(f"param is only meaningful for fgf summands (got {self.kind})")
        if self.kind in (HYPERFINITE_II1, FGF) and self.size != 1:
            raise ValidationError(f"{self.kind} summands carry no size")

    @classmethod
    def matrix(cls, size: int, min_trace: RatioLike) -> "Summand":
        t = ratio(min_trace)
        return cls(kind=MATRIX, central_trace=t * size, size=size, min_trace=t)

    @classmethod
    def diffuse(cls, size: int, central_trace: RatioLike) -> "Summand":
        return cls(kind=DIFFUSE_TYPE_I, central_trace=ratio(central_trace), size=size)

    @classmethod
    def hyperfinite(cls, central_trace: RatioLike) -> "Summand":
        return cls(kind=HYPERFINITE_II1, central_trace=ratio(central_trace))

    @classmethod
    def fgf(cls, param: RatioLike, central_trace: RatioLike) -> "Summand":
        return cls(kind=FGF, central_trace=ratio(central_trace), param=ratio(param))

    @property
    def is_atomic(self) -> bool:
        return self.kind == MATRIX

    @property
    def is_diffuse(self) -> bool:
        return self.kind != MATRIX

    @property
    def weight(self) -> Fraction:
        # Absolute units: fdim(sum) = 1 + sum of weights.
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return -(self.min_trace * self.min_trace)
        if self.kind == FGF:
            assert self.param is not None
            return self.central_trace * self.central_trace * (self.param - 1)
        return ZERO

    def scaled(self, factor: Fraction) -> "Summand":
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return Summand.matrix(self.size, self.min_trace * factor)
        return Summand(
            kind=self.kind,
            central_trace=self.central_trace * factor,
            size=self.size,
            param=self.param,
        )

    def sort_key(self) -> Tuple[int, int, Fraction, Fraction]:
        return (_KIND_RANK[self.kind], self.size, -self.central_trace, self.param or ZERO)

    def render(self) -> str:
        if self.kind == MATRIX:
            assert self.min_trace is not None
            return f"M_{self.size}[t={format_ratio(self.min_trace)}]"
        if self.kind == DIFFUSE_TYPE_I:
            return f"LinfM_{self.size}[c={format_ratio(self.central_trace)}]"
        if self.kind == HYPERFINITE_II1:
            return f"R[c={format_ratio(self.central_trace)}]"
        assert self.param is not None
        return f"L(F({format_ratio(self.param)}))[c={format_ratio(self.central_trace)}]"


@dataclass(frozen=True)
class Algebra:
    summands: Tuple[Summand, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "summands", tuple(self.summands))
        if not self.summands:
            raise ValidationError("empty algebra: at least one summand is required")

    @classmethod
    def of(cls, *summands: Summand) -> "Algebra":
        return cls(tuple(summands))

    def __iter__(self) -> Iterator[Summand]:
        return iter(self.summands)

    def __len__(self) -> int:
        return len(self.summands)

    def __getitem__(self, i: int) -> Summand:
        return self.summands[i]

    @property
    def total_trace(self) -> Fraction:
        return sum((s.central_trace for s in self.summands), ZERO)

    @property
    def is_normalized(self) -> bool:
        return self.total_trace == 1

    @property
    def is_finite_dimensional(self) -> bool:
        return all(s.is_atomic for s in self.summands)

    @property
    def fgf_count(self) -> int:
        return sum(1 for s in self.summands if s.kind == FGF)

    def scaled(self, factor: Fraction) -> "Algebra":
        return Algebra(tuple(s.scaled(factor) for s in self.summands))

    def render(self) -> str:
        return " (+) ".join(s.render() for s in self.summands)


def require_normalized(a: Algebra, name: str = "algebra") -> None:
    if not a.is_normalized:
        raise ValidationError(
            f"{name} is not normalized: total trace {format_ratio(a.total_trace)} != 1"
        )


def canonicalize(a: Algebra) -> Algebra:
    return Algebra(tuple(sorted(a.summands, key=Summand.sort_key)))


def algebra_equal(a: Algebra, b: Algebra) -> bool:
    """Equality of presentations (same kinds, sizes, traces and parameters after canonical ordering)."""
    return canonicalize(a).summands == canonicalize(b).summands


def total_weight(summands: Iterable[Summand]) -> Fraction:
    return sum((s.weight for s in summands), ZERO)


def fdim(a: Algebra) -> Fraction:
    require_normalized(a)
    return 1 + total_weight(a.summands)


def compress_fgf(s: RatioLike, t: RatioLike) -> Fraction:
    """Parameter of L(F_s) compressed (t < 1) or dilated (t > 1) by t: 1 + (s-1)/t^2."""
    s, t = ratio(s), ratio(t)
    if s <= 1:
        raise DomainError(f"compress_fgf needs s > 1, got {format_ratio(s)}")
    if t <= 0:
        raise DomainError(f"compress_fgf needs t > 0, got {format_ratio(t)}")
    return 1 + (s - 1) / (t * t)
