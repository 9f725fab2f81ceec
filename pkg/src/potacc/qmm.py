"""Integer QMM engines: the multiply reference and the shift-PE engine.

Both engines compute, per output filter ``f`` and output row ``r``::

    acc   = sum_n w[f, n] * a[r, n] + (b[f] - Z_A * sum_n w[f, n])
    q_out = clamp(rint(M[f] * acc) + Z_o, -128, 127),  M = S_W * S_A / S_o

and share one requantizer (float64 multiply, round half to even), so any
difference between them can only come from the dot products.

Matrix convention: weights are (filters, depth), activations after
lowering are (rows, depth) and outputs are (rows, filters), which reshapes
straight back to NHWC.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AccumulatorOverflow, ShapeMismatch, StageError, UnsupportedLayer
from .quantizer import INT32_MAX, INT32_MIN, QuantParams
from .shift_pe import dot64_batch
from .weightprep import PackedWeightTensor

Engine = Literal["mult", "shift"]
LAYER_KINDS = ("conv2d", "fully_connected")


@dataclass
class LayerSpec:
    name: str
    kind: str
    input_shape: tuple[int, ...]      # (N, H, W, C) or (N, K)
    weight_shape: tuple[int, ...]     # (O, KH, KW, C) or (O, K)
    stride: int = 1
    padding: str = "valid"
    params: QuantParams | None = None
    weights: np.ndarray | PackedWeightTensor | None = None
    bias: np.ndarray | None = None
    pot: bool = True                  # False for layers kept at uniform int8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.weight_shape = tuple(int(d) for d in self.weight_shape)
        if self.kind not in LAYER_KINDS:
            raise UnsupportedLayer(f"{self.name}: layer kind {self.kind!r} is not conv2d/fully_connected")
        if self.kind == "conv2d":
            if len(self.input_shape) != 4 or len(self.weight_shape) != 4:
                raise ShapeMismatch(f"{self.name}: conv2d needs NHWC input and OHWI weights")
            if self.input_shape[3] != self.weight_shape[3]:
                raise ShapeMismatch(
                    f"{self.name}: input has {self.input_shape[3]} channels, "
                    f"weights expect {self.weight_shape[3]}"
                )
            if self.padding not in ("same", "valid"):
                raise ShapeMismatch(f"{self.name}: padding must be 'same' or 'valid'")
            if self.stride < 1:
                raise ShapeMismatch(f"{self.name}: stride must be >= 1")
            if min(self.output_shape) < 1:
                raise ShapeMismatch(f"{self.name}: kernel larger than input with valid padding")
        else:
            if len(self.input_shape) != 2 or len(self.weight_shape) != 2:
                raise ShapeMismatch(f"{self.name}: fully_connected needs (N, K) input and (O, K) weights")
            if self.input_shape[1] != self.weight_shape[1]:
                raise ShapeMismatch(
                    f"{self.name}: input depth {self.input_shape[1]} != weight depth {self.weight_shape[1]}"
                )

    @property
    def filters(self) -> int:
        return self.weight_shape[0]

    @property
    def depth(self) -> int:
        """Dot-product length after lowering."""
        return int(np.prod(self.weight_shape[1:]))

    @property
    def rows(self) -> int:
        """Number of output rows (pixels x batch, or batch)."""
        return int(np.prod(self.output_shape[:-1]))

    @property
    def macs(self) -> int:
        return self.rows * self.depth * self.filters

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind == "fully_connected":
            return (self.input_shape[0], self.filters)
        n, h, w, _ = self.input_shape
        oh, ow = conv_output_hw(h, w, self.weight_shape[1], self.weight_shape[2], self.stride, self.padding)
        return (n, oh, ow, self.filters)

    @property
    def packed(self) -> bool:
        return isinstance(self.weights, PackedWeightTensor)


def conv_output_hw(h, w, kh, kw, stride, padding) -> tuple[int, int]:
    if padding == "same":
        return -(-h // stride), -(-w // stride)
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def im2col(activations: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Lower an NHWC conv input to a (rows, KH*KW*C) patch matrix.

    Column order is (kh, kw, c), matching OHWI weights flattened per filter.
    Padding positions hold the input zero point so they contribute nothing.
    """
    if layer.kind != "conv2d":
        raise UnsupportedLayer(f"{layer.name}: im2col applies to conv2d only")
    x = np.asarray(activations)
    if x.shape != layer.input_shape:
        raise ShapeMismatch(f"{layer.name}: input shape {x.shape} != {layer.input_shape}")
    _, kh, kw, _ = layer.weight_shape
    s = layer.stride
    if layer.padding == "same":
        zp = 0 if layer.params is None else layer.params.input_zero_point
        (pt, pb), (pl, pr) = _same_pads(x.shape[1], kh, s), _same_pads(x.shape[2], kw, s)
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=zp)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::s, ::s]  # N,OH,OW,C,KH,KW
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, -1)


def requantize(acc: np.ndarray, multipliers: np.ndarray, output_zero_point: int) -> np.ndarray:
    q = np.rint(acc.astype(np.float64) * multipliers[None, :]) + output_zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def _check_acc(acc: np.ndarray) -> None:
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise AccumulatorOverflow("accumulator left 32-bit range")


def _offsets(weight_sums: np.ndarray, bias, zero_point: int) -> np.ndarray:
    b = np.zeros_like(weight_sums) if bias is None else np.asarray(bias, dtype=np.int64)
    return b - zero_point * weight_sums


def _check_operands(m, n, patches, params, bias):
    if patches.ndim != 2 or patches.shape[1] != n:
        raise ShapeMismatch(f"activation matrix {patches.shape} does not match weight depth {n}")
    if params.weight_scales.size not in (1, m):
        raise ShapeMismatch(f"{params.weight_scales.size} weight scales for {m} filters")
    if bias is not None and np.shape(bias) != (m,):
        raise ShapeMismatch(f"bias shape {np.shape(bias)} != ({m},)")


def qmm_mult(q_w: np.ndarray, q_a: np.ndarray, params: QuantParams, bias=None) -> np.ndarray:
    """Multiply-based QMM. ``q_w`` may hold int8 or pot_int weights."""
    w = np.asarray(q_w, dtype=np.int64)
    w = w.reshape(w.shape[0], -1)
    a = np.asarray(q_a, dtype=np.int64)
    m, n = w.shape
    _check_operands(m, n, a, params, bias)
    core = a @ w.T
    _check_acc(core)
    acc = core + _offsets(w.sum(axis=1), bias, params.input_zero_point)[None, :]
    _check_acc(acc)
    return requantize(acc, params.multipliers(m), params.output_zero_point)


def qmm_shift(packed: PackedWeightTensor, q_a: np.ndarray, params: QuantParams, bias=None) -> np.ndarray:
    """Shift-PE QMM over preprocessed weights; ``params`` carry the corrected scales."""
    codes = packed.codes()
    codes = codes.reshape(codes.shape[0], -1)
    a = np.asarray(q_a)
    m, n = codes.shape
    _check_operands(m, n, a, params, bias)
    core = dot64_batch(codes, a.T, packed.scheme).T
    weight_sums = packed.pot_int().reshape(m, -1).sum(axis=1, dtype=np.int64)
    acc = core + _offsets(weight_sums, bias, params.input_zero_point)[None, :]
    _check_acc(acc)
    return requantize(acc, params.multipliers(m), params.output_zero_point)


def _lower(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "conv2d":
        return im2col(x, layer)
    if x.size != int(np.prod(layer.input_shape)):
        raise ShapeMismatch(f"{layer.name}: cannot view input {x.shape} as {layer.input_shape}")
    return x.reshape(layer.input_shape)


def run_layer(layer: LayerSpec, x: np.ndarray, engine: Engine = "mult") -> np.ndarray:
    if layer.weights is None or layer.params is None:
        raise StageError(f"{layer.name}: layer has no weights to execute")
    patches = _lower(layer, np.asarray(x))
    if engine == "shift" and layer.pot:
        if not layer.packed:
            raise StageError(f"{layer.name}: shift engine needs preprocessed (pot_int_e) weights")
        out = qmm_shift(layer.weights, patches, layer.params, layer.bias)
    elif engine in ("mult", "shift"):
        w = layer.weights.pot_int() if layer.packed else layer.weights
        out = qmm_mult(w, patches, layer.params, layer.bias)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return out.reshape(layer.output_shape)


def run_model(layers: Sequence[LayerSpec], x: np.ndarray, engine: Engine = "mult") -> np.ndarray:
    """Run a linear chain of conv2d / fully_connected layers."""
    out = np.asarray(x)
    for layer in layers:
        if layer.kind not in LAYER_KINDS:
            raise UnsupportedLayer(f"{layer.name}: {layer.kind}")
        out = run_layer(layer, out, engine)
    return out
