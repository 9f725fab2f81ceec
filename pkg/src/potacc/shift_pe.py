"""Bit-accurate functional model of the shift processing elements.

A PE receives a 4-bit code and a two's-complement int8 activation. It shifts
the *signed* activation left by each non-zero term's shift amount and adds
the (at most two) results; the weight sign is not applied here but by the
accumulator, which adds or subtracts the product.

The intermediate product is a signed value; ``ipw`` is the two's-complement
width that holds every product for the scheme:

    QKeras  max|pot_int| 128 -> products in [-16384, 16256] -> 15 bits
    MSQ     max|pot_int|   8 -> products in [-1024, 1016]   -> 11 bits
    APoT    max|pot_int|  10 -> products in [-1280, 1270]   -> 12 bits
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import AccumulatorOverflow, InvalidCode
from .quantizer import INT32_MAX, INT32_MIN
from .schemes import CODE_COUNT, Kind, PoTScheme, decode_fields, generate_levels

LANES = 64
ACCUW = 32
IPW = {Kind.QKERAS: 15, Kind.MSQ: 11, Kind.APOT: 12}


@dataclass(frozen=True)
class ShiftPEConfig:
    scheme: PoTScheme
    activation_bits: int = 8
    accuw: int = ACCUW

    @property
    def ipw(self) -> int:
        return IPW[self.scheme.kind]


def min_product_width(scheme: PoTScheme, activation_bits: int = 8) -> int:
    """Smallest two's-complement width holding ``pot_int * a`` for all levels/activations."""
    top = generate_levels(scheme).max_pot_int
    lo, hi = -(1 << (activation_bits - 1)), (1 << (activation_bits - 1)) - 1
    extremes = (top * lo, top * hi)
    width = 1
    while not all(-(1 << (width - 1)) <= v < (1 << (width - 1)) for v in extremes):
        width += 1
    return width


@dataclass(frozen=True)
class PEOutput:
    product: int   # signed shifted sum, sign of the weight not yet applied
    negate: bool   # weight sign bit

    @property
    def magnitude(self) -> int:
        return abs(self.product)


def _fields(code: int, scheme: PoTScheme):
    try:
        return decode_fields(int(code), scheme)
    except KeyError:
        raise InvalidCode(f"{code!r} is not a 4-bit code") from None


def pe_multiply(code: int, activation: int, scheme: PoTScheme) -> PEOutput:
    if not -128 <= activation <= 127:
        raise ValueError(f"activation {activation} outside int8")
    negate, s1, s2 = _fields(code, scheme)
    product = 0
    if s1 is not None:
        product += activation << s1
    if s2 is not None:
        product += activation << s2
    return PEOutput(product, negate)


def accumulate(acc: int, out: PEOutput, accuw: int = ACCUW) -> int:
    lo, hi = -(1 << (accuw - 1)), (1 << (accuw - 1)) - 1
    result = acc - out.product if out.negate else acc + out.product
    if not lo <= result <= hi:
        raise AccumulatorOverflow(f"accumulator left {accuw}-bit range: {result}")
    return result


def pad_lanes(codes: Sequence[int], acts: Sequence[int], scheme: PoTScheme):
    """Zero-pad a partial vector to 64 lanes.

    Padding codes use the scheme's zero level; QKeras has none, so its padded
    lanes use code 0 with a zero activation, which contributes nothing either.
    """
    n = len(codes)
    if n != len(acts) or n > LANES:
        raise ValueError("codes and activations must have equal length <= 64")
    zero = generate_levels(scheme).zero_code
    fill = 0 if zero is None else zero
    return list(codes) + [fill] * (LANES - n), list(acts) + [0] * (LANES - n)


def dot64(codes: Sequence[int], acts: Sequence[int], scheme: PoTScheme, acc: int = 0) -> int:
    """One GEMM-unit cycle: 64 shift-PE products accumulated lane by lane."""
    if len(codes) != LANES or len(acts) != LANES:
        raise ValueError(f"dot64 takes exactly {LANES} lanes; use pad_lanes for tails")
    for c, a in zip(codes, acts):
        acc = accumulate(acc, pe_multiply(c, int(a), scheme))
    return acc


# -- vectorized path --------------------------------------------------------

@lru_cache(maxsize=None)
def _shift_tables(scheme: PoTScheme) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per code: first shift, second shift (-1 for a zero term), negate flag."""
    s1 = np.full(CODE_COUNT, -1, dtype=np.int32)
    s2 = np.full(CODE_COUNT, -1, dtype=np.int32)
    neg = np.zeros(CODE_COUNT, dtype=bool)
    for c in range(CODE_COUNT):
        n, a, b = decode_fields(c, scheme)
        neg[c] = n
        s1[c] = -1 if a is None else a
        s2[c] = -1 if b is None else b
    return s1, s2, neg


def lane_products(codes: np.ndarray, acts: np.ndarray, scheme: PoTScheme) -> np.ndarray:
    """Signed PE outputs after the accumulator applies the weight sign.

    ``codes`` and ``acts`` broadcast against each other; the result is int32.
    """
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() >= CODE_COUNT):
        raise InvalidCode("codes must be 4-bit values")
    s1t, s2t, negt = _shift_tables(scheme)
    s1, s2, neg = s1t[c], s2t[c], negt[c]
    a = np.asarray(acts, dtype=np.int32)
    p = np.where(s1 >= 0, np.left_shift(a, np.maximum(s1, 0)), 0)
    p = p + np.where(s2 >= 0, np.left_shift(a, np.maximum(s2, 0)), 0)
    return np.where(neg, -p, p).astype(np.int32)


def dot64_batch(
    codes: np.ndarray,
    acts: np.ndarray,
    scheme: PoTScheme,
    *,
    chunk_elems: int = 1 << 22,
) -> np.ndarray:
    """Shift-based matrix product, 64 lanes per accumulation step.

    ``codes`` is (m, n) weight codes, ``acts`` is (n, k) int8 activations;
    returns the (m, k) int64 accumulators. The dot dimension is consumed in
    64-lane tiles (the tail padded as in :func:`pad_lanes`) and every running
    sum is checked against the 32-bit accumulator range after each tile.
    """
    codes = np.asarray(codes)
    acts = np.asarray(acts)
    m, n = codes.shape
    n2, k = acts.shape
    if n != n2:
        raise ValueError(f"inner dimensions differ: {n} vs {n2}")
    tiles = -(-n // LANES)
    pad = tiles * LANES - n
    if pad:
        zero = generate_levels(scheme).zero_code
        codes = np.concatenate([codes, np.full((m, pad), 0 if zero is None else zero, codes.dtype)], 1)
        acts = np.concatenate([acts, np.zeros((pad, k), acts.dtype)], 0)
    out = np.zeros((m, k), dtype=np.int64)
    if m == 0 or k == 0:
        return out
    cols = max(1, chunk_elems // (m * LANES))
    for j0 in range(0, k, cols):
        a_blk = acts[:, j0:j0 + cols].astype(np.int32)
        acc = np.zeros((m, a_blk.shape[1]), dtype=np.int64)
        for t in range(tiles):
            lanes = slice(t * LANES, (t + 1) * LANES)
            prod = lane_products(codes[:, lanes, None], a_blk[None, lanes, :], scheme)
            acc += prod.sum(axis=1, dtype=np.int64)
            if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
                raise AccumulatorOverflow("accumulator left 32-bit range")
        out[:, j0:j0 + cols] = acc
    return out
