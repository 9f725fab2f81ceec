"""Quantization level sets for the three 4-bit power-of-two schemes.

Every level is carried in four forms:

* ``pot_float`` -- the dyadic training-time value, kept as a ``Fraction``;
* ``int8``      -- what a symmetric int8 converter produces for it
  (``round(pot_float * 127 / max|pot_float|)``);
* ``pot_int``   -- ``pot_float`` divided by the smallest nonzero term;
* ``code``      -- the 4-bit sign-magnitude shift code consumed by a shift PE.

Code layout (MSB first)::

    QKeras      s x x x          x = shift amount 0..7
    MSQ / APoT  s f f t          f = first-term field, t = second-term bit

Field decoding for the two-term schemes (``None`` means the term is zero):

    MSQ   first: 0->2^0 1->2^1 2->2^2 3->zero    second: 0->zero 1->2^2
    APoT  first: 0->2^0 1->zero 2->2^2 3->2^3    second: 0->zero 1->2^1
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from itertools import product
from numbers import Real
from typing import Optional

from .errors import UnknownScheme, UnsupportedBitwidth

SIGN_BIT = 0b1000
CODE_COUNT = 16
INT8_MAX = 127


class Kind(str, enum.Enum):
    QKERAS = "qkeras"
    MSQ = "msq"
    APOT = "apot"


@dataclass(frozen=True)
class PoTScheme:
    kind: Kind
    bitwidth: int = 4

    @classmethod
    def parse(cls, name: "str | Kind | PoTScheme", bitwidth: int = 4) -> "PoTScheme":
        if isinstance(name, PoTScheme):
            return name
        try:
            kind = Kind(name.lower() if isinstance(name, str) else name)
        except ValueError:
            valid = ", ".join(k.value for k in Kind)
            raise UnknownScheme(f"unknown scheme {name!r}; valid schemes: {valid}") from None
        return cls(kind, bitwidth)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def has_zero(self) -> bool:
        return self.kind is not Kind.QKERAS

    def __str__(self) -> str:
        return self.kind.value


QKERAS = PoTScheme(Kind.QKERAS)
MSQ = PoTScheme(Kind.MSQ)
APOT = PoTScheme(Kind.APOT)
ALL_SCHEMES = (QKERAS, MSQ, APOT)


@dataclass(frozen=True)
class PoTTermSpec:
    """Allowed pot_int magnitudes for each additive term (0 = term absent)."""

    first_term_values: frozenset
    second_term_values: frozenset
    max_pot_int: int


# pot_float magnitudes of each term, 4-bit configurations.
_FLOAT_TERMS = {
    Kind.QKERAS: (tuple(Fraction(1, 2**e) for e in range(1, 9)), ()),
    Kind.MSQ: (
        (Fraction(0), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8)),
        (Fraction(0), Fraction(1, 2)),
    ),
    Kind.APOT: (
        (Fraction(0), Fraction(1, 2), Fraction(1, 4), Fraction(1, 16)),
        (Fraction(0), Fraction(1, 8)),
    ),
}

# code field value -> shift amount (None encodes a zero term)
FIRST_FIELD_SHIFTS = {
    Kind.QKERAS: {x: x for x in range(8)},
    Kind.MSQ: {0: 0, 1: 1, 2: 2, 3: None},
    Kind.APOT: {0: 0, 1: None, 2: 2, 3: 3},
}
SECOND_FIELD_SHIFTS = {
    Kind.MSQ: {0: None, 1: 2},
    Kind.APOT: {0: None, 1: 1},
}


def _check_bitwidth(scheme: PoTScheme) -> None:
    if scheme.bitwidth != 4:
        raise UnsupportedBitwidth(
            f"{scheme.name}: only 4-bit weights are supported (got {scheme.bitwidth})"
        )


def float_terms(scheme: PoTScheme) -> tuple[tuple[Fraction, ...], tuple[Fraction, ...]]:
    _check_bitwidth(scheme)
    return _FLOAT_TERMS[scheme.kind]


def smallest_term(scheme: PoTScheme) -> Fraction:
    first, second = float_terms(scheme)
    return min(t for t in first + second if t != 0)


def term_spec(scheme: PoTScheme) -> PoTTermSpec:
    first, second = float_terms(scheme)
    unit = smallest_term(scheme)
    fv = frozenset(int(t / unit) for t in first)
    sv = frozenset(int(t / unit) for t in second)
    return PoTTermSpec(fv, sv, max(fv) + max(sv, default=0))


def decode_fields(code: int, scheme: PoTScheme) -> tuple[bool, Optional[int], Optional[int]]:
    """Split a 4-bit code into (negative, first shift, second shift).

    A shift of ``None`` is the zero-term special case. Raises ``KeyError`` for
    codes outside 0..15; callers wrap that into their own error type.
    """
    if not 0 <= code < CODE_COUNT:
        raise KeyError(code)
    negative = bool(code & SIGN_BIT)
    if scheme.kind is Kind.QKERAS:
        return negative, code & 0b111, None
    first = FIRST_FIELD_SHIFTS[scheme.kind][(code >> 1) & 0b11]
    second = SECOND_FIELD_SHIFTS[scheme.kind][code & 1]
    return negative, first, second


def code_value(code: int, scheme: PoTScheme) -> int:
    """pot_int value represented by ``code`` (non-canonical codes included)."""
    negative, s1, s2 = decode_fields(code, scheme)
    mag = (0 if s1 is None else 1 << s1) + (0 if s2 is None else 1 << s2)
    return -mag if negative else mag


def round_half_away(x: Fraction) -> int:
    """Round a rational to the nearest integer, halves away from zero."""
    q = abs(x)
    r = int(q + Fraction(1, 2))  # floor for non-negative
    return -r if x < 0 else r


@dataclass(frozen=True)
class Level:
    pot_float: Fraction
    int8: int
    pot_int: int
    code: int
    # canonical (first, second) pot_int magnitudes of the decomposition
    terms: tuple[int, int] = field(default=(0, 0), compare=False)

    @property
    def code_label(self) -> str:
        """Sign-magnitude rendering of the code, e.g. ``-0`` for 0b1000."""
        mag = self.code & ~SIGN_BIT
        return f"-{mag}" if self.code & SIGN_BIT else str(mag)


@dataclass(frozen=True)
class QuantLevelSet:
    scheme: PoTScheme
    levels: tuple[Level, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @cached_property
    def by_pot_int(self) -> dict[int, Level]:
        return {lv.pot_int: lv for lv in self.levels}

    @cached_property
    def by_int8(self) -> dict[int, Level]:
        return {lv.int8: lv for lv in self.levels}

    @cached_property
    def code_table(self) -> tuple[int, ...]:
        """pot_int for each of the 16 codes, indexed by code."""
        return tuple(code_value(c, self.scheme) for c in range(CODE_COUNT))

    @property
    def max_pot_int(self) -> int:
        return self.levels[-1].pot_int

    @property
    def max_pot_float(self) -> Fraction:
        return self.levels[-1].pot_float

    @property
    def magnitudes(self) -> tuple[int, ...]:
        """Distinct nonnegative pot_int magnitudes, ascending."""
        return tuple(lv.pot_int for lv in self.levels if lv.pot_int >= 0)

    @property
    def zero_code(self) -> Optional[int]:
        lv = self.by_pot_int.get(0)
        return None if lv is None else lv.code


def _decompositions(scheme: PoTScheme):
    """Yield (magnitude pot_float, first, second) for every term combination."""
    first, second = float_terms(scheme)
    if not second:
        for t in first:
            yield t, t, Fraction(0)
        return
    for q0, q1 in product(first, second):
        yield q0 + q1, q0, q1


def _field_for(shift_map: dict, term_int: int) -> int:
    want = None if term_int == 0 else term_int.bit_length() - 1
    for value, shift in shift_map.items():
        if shift == want:
            return value
    raise AssertionError(f"no field encodes term {term_int}")


@lru_cache(maxsize=None)
def generate_levels(scheme: PoTScheme) -> QuantLevelSet:
    """Enumerate every level of ``scheme`` in all four representations."""
    _check_bitwidth(scheme)
    unit = smallest_term(scheme)

    # canonical decomposition of each magnitude: the largest first term wins
    canon: dict[Fraction, tuple[Fraction, Fraction]] = {}
    for mag, q0, q1 in _decompositions(scheme):
        if mag not in canon or q0 > canon[mag][0]:
            canon[mag] = (q0, q1)

    max_float = max(canon)
    levels = []
    for mag, (q0, q1) in canon.items():
        t0, t1 = int(q0 / unit), int(q1 / unit)
        if scheme.kind is Kind.QKERAS:
            code = t0.bit_length() - 1
        else:
            code = (_field_for(FIRST_FIELD_SHIFTS[scheme.kind], t0) << 1) | _field_for(
                SECOND_FIELD_SHIFTS[scheme.kind], t1
            )
        for sign in ((1,) if mag == 0 else (1, -1)):
            pf = sign * mag
            levels.append(
                Level(
                    pot_float=pf,
                    int8=round_half_away(pf * INT8_MAX / max_float),
                    pot_int=int(pf / unit),
                    code=code | (SIGN_BIT if sign < 0 else 0),
                    terms=(t0, t1),
                )
            )
    levels.sort(key=lambda lv: lv.pot_float)
    return QuantLevelSet(scheme, tuple(levels))


def nearest_level(levels: QuantLevelSet, value: Real) -> Level:
    """Closest level to ``value``; ties go toward zero, then toward positive."""
    v = Fraction(value)
    return min(
        levels.levels,
        key=lambda lv: (abs(lv.pot_float - v), abs(lv.pot_float), lv.pot_float < 0),
    )
