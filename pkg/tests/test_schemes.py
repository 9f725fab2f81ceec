from fractions import Fraction
from itertools import product

import pytest
from hypothesis import given, strategies as st

from potacc.errors import UnknownScheme, UnsupportedBitwidth
from potacc.schemes import (
    ALL_SCHEMES, APOT, MSQ, QKERAS, Kind, PoTScheme, code_value, generate_levels, nearest_level,
    term_spec,
)

F = Fraction

# Published APoT mapping: pot_float, int8, pot_int, code label
APOT_ROWS = [
    (F(-5, 8), -127, -10, "-7"), (F(-1, 2), -102, -8, "-6"), (F(-3, 8), -76, -6, "-5"),
    (F(-1, 4), -51, -4, "-4"), (F(-3, 16), -38, -3, "-1"), (F(-1, 8), -25, -2, "-3"),
    (F(-1, 16), -13, -1, "-0"), (F(0), 0, 0, "2"), (F(1, 16), 13, 1, "0"), (F(1, 8), 25, 2, "3"),
    (F(3, 16), 38, 3, "1"), (F(1, 4), 51, 4, "4"), (F(3, 8), 76, 6, "5"), (F(1, 2), 102, 8, "6"),
    (F(5, 8), 127, 10, "7"),
]


def enumerate_levels(first, second):
    """Independent oracle: every signed sum of one term from each set."""
    sums = {a + b for a, b in product(first, second or [F(0)])}
    return sorted({s for m in sums for s in (m, -m)})


def test_apot_table():
    rows = [(lv.pot_float, lv.int8, lv.pot_int, lv.code_label) for lv in generate_levels(APOT)]
    assert rows == APOT_ROWS


def test_term_sets():
    assert term_spec(QKERAS).first_term_values == {2**e for e in range(8)}
    assert term_spec(QKERAS).second_term_values == frozenset()
    assert term_spec(MSQ).first_term_values == {0, 1, 2, 4}
    assert term_spec(MSQ).second_term_values == {0, 4}
    assert term_spec(MSQ).max_pot_int == 8
    assert term_spec(APOT).first_term_values == {0, 1, 4, 8}
    assert term_spec(APOT).second_term_values == {0, 2}
    assert term_spec(APOT).max_pot_int == 10


@pytest.mark.parametrize("scheme, first, second", [
    (QKERAS, [F(1, 2**e) for e in range(1, 9)], []),
    (MSQ, [F(0), F(1, 2), F(1, 4), F(1, 8)], [F(0), F(1, 2)]),
    (APOT, [F(0), F(1, 2), F(1, 4), F(1, 16)], [F(0), F(1, 8)]),
])
def test_levels_match_enumeration(scheme, first, second):
    levels = generate_levels(scheme)
    assert [lv.pot_float for lv in levels] == enumerate_levels(first, second)


def test_level_counts_and_magnitudes():
    assert len(generate_levels(QKERAS)) == 16
    assert {lv.pot_int for lv in generate_levels(QKERAS)} == {s * 2**e for e in range(8) for s in (1, -1)}
    assert 0 not in generate_levels(QKERAS).by_pot_int
    assert generate_levels(MSQ).magnitudes == (0, 1, 2, 4, 5, 6, 8)
    assert len(generate_levels(MSQ)) == 13
    assert len(generate_levels(APOT)) == 15


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_level_invariants(scheme):
    levels = list(generate_levels(scheme))
    unit = min(abs(lv.pot_float) for lv in levels if lv.pot_float)
    top = max(abs(lv.pot_float) for lv in levels)
    for a, b in zip(levels, levels[1:]):
        assert a.pot_float < b.pot_float and a.int8 < b.int8 and a.pot_int < b.pot_int
    for lv in levels:
        assert lv.pot_float == lv.pot_int * unit
        x = lv.pot_float * 127 / top
        assert lv.int8 == (1 if x >= 0 else -1) * int(abs(x) + F(1, 2))
        assert code_value(lv.code, scheme) == lv.pot_int
    assert levels[0].int8 == -127 and levels[-1].int8 == 127


def test_msq_duplicate_uses_first_term():
    lv = generate_levels(MSQ).by_pot_int[4]
    assert lv.code == 0b0100
    assert code_value(0b0111, MSQ) == 4  # second-term form decodes too


def test_qkeras_int8_levels():
    assert [lv.int8 for lv in generate_levels(QKERAS) if lv.int8 > 0] == [1, 2, 4, 8, 16, 32, 64, 127]


def test_parse_and_errors():
    assert PoTScheme.parse("APoT") == APOT
    assert PoTScheme.parse(Kind.MSQ) == MSQ
    with pytest.raises(UnknownScheme, match="qkeras, msq, apot"):
        PoTScheme.parse("log2")
    with pytest.raises(UnsupportedBitwidth):
        generate_levels(PoTScheme(Kind.APOT, 3))


def test_nearest_level_examples():
    levels = generate_levels(APOT)
    assert nearest_level(levels, 0.625).pot_float == F(5, 8)
    assert nearest_level(levels, 0.0).pot_float == 0
    assert nearest_level(levels, 0.22).pot_float == F(1, 4)


def test_nearest_level_ties():
    apot = generate_levels(APOT)
    assert nearest_level(apot, F(3, 32)).pot_float == F(1, 16)   # between 1/16 and 1/8
    assert nearest_level(apot, F(-3, 32)).pot_float == F(-1, 16)
    qk = generate_levels(QKERAS)
    assert nearest_level(qk, 0).pot_float == F(1, 256)            # +/- tie goes positive


@given(st.sampled_from(ALL_SCHEMES), st.floats(-2, 2, allow_nan=False))
def test_nearest_level_is_nearest(scheme, value):
    levels = generate_levels(scheme)
    best = nearest_level(levels, value)
    v = F(value)
    assert all(abs(best.pot_float - v) <= abs(lv.pot_float - v) for lv in levels)


def test_generate_levels_deterministic():
    assert generate_levels(MSQ) == generate_levels(PoTScheme(Kind.MSQ))
