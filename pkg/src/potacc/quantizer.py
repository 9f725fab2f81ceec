"""Symmetric int8 weight quantization and the scale bookkeeping around it.

Weights are symmetric (zero point 0) with one scale per output filter or one
per layer; activations arrive already quantized with a caller-supplied
(scale, zero point). The bias scale is always ``weight_scale * input_scale``
and is derived rather than stored, so it cannot drift out of sync after
scale correction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import AllZeroGroup, ShapeMismatch

Granularity = Literal["per_filter", "per_layer"]

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


@dataclass(frozen=True)
class QuantParams:
    weight_scales: np.ndarray
    input_scale: float = 1.0
    input_zero_point: int = 0
    output_scale: float = 1.0
    output_zero_point: int = 0

    def __post_init__(self):
        ws = np.atleast_1d(np.asarray(self.weight_scales, dtype=np.float64))
        object.__setattr__(self, "weight_scales", ws)
        if ws.ndim != 1 or ws.size == 0:
            raise ValueError("weight_scales must be a nonempty vector")
        if not np.all(ws > 0) or self.input_scale <= 0 or self.output_scale <= 0:
            raise ValueError("all scales must be positive")
        for zp in (self.input_zero_point, self.output_zero_point):
            if not INT8_MIN <= zp <= INT8_MAX:
                raise ValueError(f"zero point {zp} outside int8 range")

    @property
    def per_layer(self) -> bool:
        return self.weight_scales.size == 1

    @property
    def bias_scales(self) -> np.ndarray:
        return self.weight_scales * self.input_scale

    def multipliers(self, num_filters: int) -> np.ndarray:
        """Requantization multiplier ``S_W * S_A / S_o`` for each filter."""
        return np.broadcast_to(
            self.weight_scales * (self.input_scale / self.output_scale), (num_filters,)
        )

    def with_weight_scales(self, scales) -> "QuantParams":
        return replace(self, weight_scales=np.asarray(scales, dtype=np.float64))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_weights(
    float_weights: np.ndarray, granularity: Granularity = "per_filter"
) -> tuple[np.ndarray, QuantParams]:
    """int8-quantize weights with ``S_W = max|W| / 127`` per scale group.

    Axis 0 indexes output filters. Returns the int8 tensor and params holding
    only the weight scales (activation fields keep their defaults).
    """
    w = np.asarray(float_weights, dtype=np.float64)
    if w.ndim == 0:
        w = w.reshape(1)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if granularity == "per_filter":
        groups = w.reshape(w.shape[0], -1)
    elif granularity == "per_layer":
        groups = w.reshape(1, -1)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    peak = np.abs(groups).max(axis=1)
    empty = np.flatnonzero(peak == 0)
    if empty.size:
        raise AllZeroGroup(f"scale group {int(empty[0])} is entirely zero")

    # (Q * 127) / max: exact for dyadic level ratios, so ties like 63.5 stay ties
    q = round_half_away(groups * INT8_MAX / peak[:, None])
    q = np.clip(q, -INT8_MAX, INT8_MAX).astype(np.int8).reshape(w.shape)
    return q, QuantParams(weight_scales=peak / INT8_MAX)


def expand_per_layer_scale(params: QuantParams, num_filters: int) -> QuantParams:
    """Duplicate a single per-layer weight scale into one entry per filter."""
    if not params.per_layer:
        if params.weight_scales.size == num_filters:
            return params
        raise ShapeMismatch(
            f"cannot expand {params.weight_scales.size} scales to {num_filters} filters"
        )
    return params.with_weight_scales(np.full(num_filters, params.weight_scales[0]))


def dequantize_weights(q: np.ndarray, params: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    scales = np.broadcast_to(params.weight_scales, (q.shape[0],))
    return q.astype(np.float64) * scales.reshape((-1,) + (1,) * (q.ndim - 1))
