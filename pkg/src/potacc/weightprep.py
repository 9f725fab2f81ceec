"""int8 weights -> corrected scales -> 4-bit shift codes -> packed nibbles.

Scale correction maps each int8 weight back to its pot_int level by table
lookup instead of dividing by the correction factor and rounding, which is
immune to the round-off the int8 converter introduced.

Which table applies depends on the pot_int level that the converter mapped to
+-127 in that scale group. Normally that is the scheme's largest level, but a
filter that never uses it (or one filter of a per-layer FC scale) was scaled
against a different peak, so every candidate peak is tried and the best fit
within +-1 int8 step wins. The correction factor is then ``127 / peak``.

Packed layout: element ``2i`` in the low nibble of byte ``i``, element
``2i + 1`` in the high nibble; an odd trailing element leaves the final high
nibble zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import InvalidCode, NotALevel, NotAPoTWeight
from .quantizer import INT8_MAX, QuantParams, expand_per_layer_scale
from .schemes import CODE_COUNT, Kind, PoTScheme, generate_levels, round_half_away


@dataclass(frozen=True)
class _PeakTable:
    peak: int
    int8: np.ndarray  # sorted ascending
    pot_int: np.ndarray


@lru_cache(maxsize=None)
def _peak_tables(scheme: PoTScheme) -> tuple[_PeakTable, ...]:
    """int8 level tables for every possible group peak, largest peak first."""
    levels = generate_levels(scheme)
    tables = []
    for peak in sorted((m for m in levels.magnitudes if m > 0), reverse=True):
        vals = [lv.pot_int for lv in levels if abs(lv.pot_int) <= peak]
        i8 = [round_half_away(Fraction(INT8_MAX * v, peak)) for v in vals]
        tables.append(_PeakTable(peak, np.array(i8, dtype=np.int64), np.array(vals, dtype=np.int64)))
    return tuple(tables)


def _lookup(table: _PeakTable, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest table entry for every element: (index, |deviation|)."""
    hi = np.clip(np.searchsorted(table.int8, q), 1, table.int8.size - 1)
    lo = hi - 1
    pick_hi = np.abs(table.int8[hi] - q) < np.abs(q - table.int8[lo])
    idx = np.where(pick_hi, hi, lo)
    return idx, np.abs(table.int8[idx] - q)


@dataclass(frozen=True)
class CorrectedWeights:
    pot_int: np.ndarray      # int16, same shape as the int8 input
    params: QuantParams      # weight_scales now hold S_pi per filter
    bias: np.ndarray | None  # int32 bias requantized to S_pi * S_A
    correction: np.ndarray   # C per filter (float64)
    peaks: np.ndarray        # pot_int level that int8 127 stands for, per filter


def rescale_bias(bias: np.ndarray, peaks: np.ndarray, correction_one: bool = False) -> np.ndarray:
    """``round(q_b / C)`` with ``C = 127 / peak``, evaluated in integers."""
    b = np.asarray(bias, dtype=np.int64)
    if correction_one:
        return b.astype(np.int32)
    num = np.abs(b) * np.asarray(peaks, dtype=np.int64)
    out = np.sign(b) * ((2 * num + INT8_MAX) // (2 * INT8_MAX))
    return out.astype(np.int32)


def scale_correct(
    q_w: np.ndarray,
    params: QuantParams,
    scheme: PoTScheme,
    bias: np.ndarray | None = None,
    *,
    qkeras_c1: bool = False,
) -> CorrectedWeights:
    """Convert int8 weights of a PoT-trained layer to pot_int with ``S_pi = S_W * C``.

    ``qkeras_c1`` forces ``C = 1`` for QKeras, treating int8 127 as pot_int
    128 without adjusting the scale (a 127/128 approximation).
    """
    q = np.asarray(q_w)
    if q.ndim == 0:
        q = q.reshape(1)
    filters = q.shape[0]
    params = expand_per_layer_scale(params, filters)
    rows = q.reshape(filters, -1).astype(np.int64)

    tables = _peak_tables(scheme)
    best = np.full(filters, -1)
    best_key = np.full((filters, 2), np.inf)
    best_idx = np.zeros_like(rows)
    if rows.shape[1] == 0:
        best[:] = 0
    for t, table in enumerate(tables if rows.shape[1] else ()):
        idx, dev = _lookup(table, rows)
        key = np.stack([dev.max(axis=1), dev.sum(axis=1)], axis=1).astype(np.float64)
        ok = key[:, 0] <= 1
        better = ok & ((key[:, 0] < best_key[:, 0]) | (
            (key[:, 0] == best_key[:, 0]) & (key[:, 1] < best_key[:, 1])))
        best = np.where(better, t, best)
        best_key[better] = key[better]
        best_idx[better] = idx[better]

    bad = np.flatnonzero(best < 0)
    if bad.size:
        f = int(bad[0])
        _, dev = _lookup(tables[0], rows[f])
        worst = int(rows[f][np.argmax(dev)])
        raise NotAPoTWeight(
            f"filter {f}: int8 weight {worst} is not within 1 of any {scheme.name} level"
        )

    pot = np.empty_like(rows)
    peaks = np.empty(filters, dtype=np.int64)
    for t, table in enumerate(tables):
        sel = best == t
        if sel.any():
            pot[sel] = table.pot_int[best_idx[sel]]
            peaks[sel] = table.peak

    c1 = qkeras_c1 and scheme.kind is Kind.QKERAS
    correction = np.ones(filters) if c1 else INT8_MAX / peaks.astype(np.float64)
    corrected = params.with_weight_scales(params.weight_scales * correction)
    new_bias = None if bias is None else rescale_bias(bias, peaks, correction_one=c1)
    return CorrectedWeights(
        pot_int=pot.reshape(q.shape).astype(np.int16),
        params=corrected,
        bias=new_bias,
        correction=correction,
        peaks=peaks,
    )


@lru_cache(maxsize=None)
def _encode_table(scheme: PoTScheme) -> tuple[int, np.ndarray]:
    levels = generate_levels(scheme)
    offset = levels.max_pot_int
    table = np.full(2 * offset + 1, -1, dtype=np.int16)
    for lv in levels:
        table[lv.pot_int + offset] = lv.code
    return offset, table


def encode(pot_int: np.ndarray, scheme: PoTScheme) -> np.ndarray:
    """Canonical 4-bit sign-magnitude code for every pot_int value (uint8)."""
    offset, table = _encode_table(scheme)
    p = np.asarray(pot_int, dtype=np.int64)
    pos = p + offset
    inside = (pos >= 0) & (pos < table.size)
    codes = np.where(inside, table[np.clip(pos, 0, table.size - 1)], -1)
    if np.any(codes < 0):
        bad = int(p[codes < 0].flat[0])
        raise NotALevel(f"{bad} is not a {scheme.name} pot_int level")
    return codes.astype(np.uint8)


def decode(codes: np.ndarray, scheme: PoTScheme) -> np.ndarray:
    """pot_int value of every code (int16); accepts non-canonical codes."""
    c = np.asarray(codes, dtype=np.int64)
    if np.any((c < 0) | (c >= CODE_COUNT)):
        raise InvalidCode(f"codes must be 4-bit values, got {int(c[(c < 0) | (c >= CODE_COUNT)].flat[0])}")
    table = np.array(generate_levels(scheme).code_table, dtype=np.int16)
    return table[c]


def pack_nibbles(codes: np.ndarray) -> bytes:
    c = np.asarray(codes, dtype=np.int64).ravel()
    if np.any((c < 0) | (c >= CODE_COUNT)):
        raise InvalidCode("codes must be 4-bit values")
    c = c.astype(np.uint8)
    if c.size % 2:
        c = np.append(c, np.uint8(0))
    return (c[0::2] | (c[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size != (count + 1) // 2:
        raise ValueError(f"{b.size} bytes cannot hold exactly {count} nibbles")
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:count]


@dataclass(frozen=True)
class PackedWeightTensor:
    scheme: PoTScheme
    shape: tuple[int, ...]
    data: bytes
    scales: np.ndarray       # S_pi per filter
    correction: np.ndarray   # C per filter

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.data, self.size).reshape(self.shape)

    def pot_int(self) -> np.ndarray:
        return decode(self.codes(), self.scheme)


def pack(
    codes: np.ndarray,
    scheme: PoTScheme,
    scales: np.ndarray | None = None,
    correction: np.ndarray | None = None,
) -> PackedWeightTensor:
    codes = np.asarray(codes)
    filters = codes.shape[0] if codes.ndim else 1
    return PackedWeightTensor(
        scheme=scheme,
        shape=tuple(codes.shape),
        data=pack_nibbles(codes),
        scales=np.ones(filters) if scales is None else np.asarray(scales, dtype=np.float64),
        correction=np.ones(filters) if correction is None else np.asarray(correction, dtype=np.float64),
    )


def unpack(packed: PackedWeightTensor) -> np.ndarray:
    return packed.codes()


def prepare_weights(
    q_w: np.ndarray,
    params: QuantParams,
    scheme: PoTScheme,
    bias: np.ndarray | None = None,
    *,
    qkeras_c1: bool = False,
) -> tuple[PackedWeightTensor, QuantParams, np.ndarray | None]:
    """Full preprocessing: scale correction, encoding, packing."""
    cw = scale_correct(q_w, params, scheme, bias, qkeras_c1=qkeras_c1)
    packed = pack(encode(cw.pot_int, scheme), scheme, cw.params.weight_scales, cw.correction)
    return packed, cw.params, cw.bias
