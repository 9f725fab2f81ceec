"""Analytic performance and energy model of the GEMM-unit accelerator.

Dataflow (per offloaded layer, after lowering to filters x depth x rows):

* The CPU lowers activations (im2col for conv) and copies activations, and
  unless preloaded weights, into the DMA buffer.
* Weights move in blocks of 16 filter rows (one block per 16 outputs a unit
  keeps in flight). A tile is as many blocks as fit the local weight buffers.
  Without the weight-copy optimization every unit receives the whole tile, so
  a tile is limited to one unit's LWGT; with it each unit only receives its
  own blocks and a tile spans ``gemm_units`` LWGTs.
* For every tile the activation rows are broadcast from GACT to the units,
  then the tile's blocks are shared out over the units; a unit consumes 64
  depth elements per output per cycle. Dispatch and compute do not overlap.
* Activations larger than GACT are re-sent from DMA for each weight tile and
  cost a synchronisation overhead per chunk.
* Stages never overlap; ``overlap_store`` hides the output copy instead.

All stage costs are in accelerator clock cycles; bandwidths are bytes per
accelerator cycle.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

from .errors import ConfigInvalid, MissingCpuTime, NegativePower, UnsupportedLayer
from .qmm import LAYER_KINDS, LayerSpec

KIB = 1024
REPORT_SCHEMA = "potacc-sim/1"
STAGES = ("prep_act", "load_act", "load_wgt", "send_act", "send_wgt", "acc", "store")
ASSUMPTIONS = (
    "analytic tile-count model, no cycle-level simulation",
    "stages serialized; store hidden only with overlap_store",
    "output-stationary units; weights tiled to LWGT in 16-filter blocks, activations re-streamed from GACT per tile",
    "64 depth elements per unit per cycle, 16 outputs in flight per unit",
)


@dataclass(frozen=True)
class AccelConfig:
    gemm_units: int = 4
    pes_per_unit: int = 64
    outputs_per_unit: int = 16
    gact_bytes: int = 128 * KIB
    lwgt_bytes_per_unit: int = 128 * KIB
    lact_bytes: int = 16 * KIB
    weight_bits: int = 8
    freq_mhz: float = 200.0
    dma_channels: int = 4
    bw_cpu_dma: float = 4.0       # CPU memory -> DMA buffer copies
    bw_dma_acc: float = 4.0       # per DMA channel
    bw_cpu_prep: float = 2.0      # CPU-side activation reorganisation / im2col
    bw_dispatch: float = 4.0      # GACT -> unit activation port
    tile_overhead: int = 64       # scheduler cycles per weight tile
    chunk_overhead: int = 256     # cycles per GACT refill while a tile runs
    weight_copy_opt: bool = False
    dma_preload: bool = False
    overlap_store: bool = False

    def __post_init__(self):
        if self.gemm_units not in (2, 4, 8, 16):
            raise ConfigInvalid(f"gemm_units must be 2, 4, 8 or 16 (got {self.gemm_units})")
        if self.pes_per_unit != 64 or self.outputs_per_unit != 16:
            raise ConfigInvalid("GEMM units have 64 PEs and 16 outputs in flight")
        if self.weight_bits not in (4, 8):
            raise ConfigInvalid(f"weight_bits must be 4 or 8 (got {self.weight_bits})")
        for name in ("gact_bytes", "lwgt_bytes_per_unit", "lact_bytes", "freq_mhz", "dma_channels",
                     "bw_cpu_dma", "bw_dma_acc", "bw_cpu_prep", "bw_dispatch"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")
        if self.tile_overhead < 0 or self.chunk_overhead < 0:
            raise ConfigInvalid("overheads must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "AccelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"preset", "design"}
        if unknown:
            raise ConfigInvalid(f"unknown accelerator option(s): {', '.join(sorted(unknown))}")
        base = preset(data.get("preset", "pynq-z2"), data.get("design", "vmac"))
        return replace(base, **{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


_BOARDS = {
    # 32-bit buffer ports on the original design, 64-bit after the rework
    "pynq-z2": dict(gemm_units=4, freq_mhz=200.0, bw_cpu_dma=4.0, bw_cpu_prep=2.0),
    "kria": dict(gemm_units=8, freq_mhz=250.0, bw_cpu_dma=6.0, bw_cpu_prep=3.0),
}
_DESIGNS = {
    "vmac": dict(weight_bits=8, weight_copy_opt=False, dma_preload=False, bw_dispatch=2.0, bw_dma_acc=4.0),
    "vmac_opt": dict(weight_bits=8, weight_copy_opt=True, dma_preload=True, bw_dispatch=8.0, bw_dma_acc=8.0),
    "vsac": dict(weight_bits=4, weight_copy_opt=True, dma_preload=True, bw_dispatch=8.0, bw_dma_acc=8.0),
}
BOARDS = tuple(_BOARDS)
DESIGNS = tuple(_DESIGNS)


def preset(board: str = "pynq-z2", design: str = "vmac") -> AccelConfig:
    try:
        return AccelConfig(**_BOARDS[board], **_DESIGNS[design])
    except KeyError:
        raise ConfigInvalid(
            f"unknown preset {board!r}/{design!r}; boards: {', '.join(BOARDS)}; "
            f"designs: {', '.join(DESIGNS)}"
        ) from None


@dataclass
class LayerReport:
    name: str
    kind: str
    filters: int
    depth: int
    rows: int
    macs: int
    prep_act: int = 0
    load_act: int = 0
    load_wgt: int = 0
    send_act: int = 0
    send_wgt: int = 0
    acc: int = 0
    store: int = 0
    compute_cycles: int = 0
    act_bytes: int = 0
    weight_bytes: int = 0
    send_act_bytes: int = 0
    send_wgt_bytes: int = 0
    lwgt_bytes_per_unit: float = 0.0
    weight_tiles: int = 0
    lwgt_refetch_count: int = 0
    act_chunks: int = 1
    pe_utilization: float = 0.0

    @property
    def total_cycles(self) -> int:
        return sum(getattr(self, s) for s in STAGES)


@dataclass
class SimReport:
    config: AccelConfig
    layers: list[LayerReport] = field(default_factory=list)
    t_other_ms: float = 0.0

    def stage_cycles(self, stage: str) -> int:
        return sum(getattr(lr, stage) for lr in self.layers)

    @property
    def acc_cycles(self) -> int:
        return self.stage_cycles("acc")

    @property
    def total_cycles(self) -> int:
        return sum(lr.total_cycles for lr in self.layers)

    def ms(self, cycles: float) -> float:
        return cycles / (self.config.freq_mhz * 1e3)

    @property
    def acc_time_ms(self) -> float:
        return self.ms(self.acc_cycles)

    @property
    def t_accel_ms(self) -> float:
        """Time of the offloaded conv/FC layers."""
        return self.ms(self.total_cycles)

    @property
    def total_ms(self) -> float:
        return self.t_accel_ms + self.t_other_ms

    @property
    def total_seconds(self) -> float:
        return self.total_ms / 1e3

    @property
    def macs(self) -> int:
        return sum(lr.macs for lr in self.layers)

    @property
    def pe_utilization(self) -> float:
        slots = self.acc_cycles * self.config.gemm_units * self.config.pes_per_unit
        return self.macs / slots if slots else 0.0

    def to_dict(self) -> dict:
        stages = {s: self.stage_cycles(s) for s in STAGES}
        return {
            "schema": REPORT_SCHEMA,
            "assumptions": list(ASSUMPTIONS),
            "config": self.config.to_dict(),
            "totals": {
                "cycles": stages,
                "ms": {s: self.ms(c) for s, c in stages.items()},
                "acc_cycles": self.acc_cycles,
                "t_conv_fc_ms": self.t_accel_ms,
                "t_other_ms": self.t_other_ms,
                "total_ms": self.total_ms,
                "macs": self.macs,
                "pe_utilization": self.pe_utilization,
                "send_wgt_bytes": sum(lr.send_wgt_bytes for lr in self.layers),
                "send_act_bytes": sum(lr.send_act_bytes for lr in self.layers),
            },
            "layers": [asdict(lr) for lr in self.layers],
        }


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


def _cycles(nbytes: float, bandwidth: float) -> int:
    return math.ceil(nbytes / bandwidth)


def simulate_layer(layer: LayerSpec, cfg: AccelConfig) -> LayerReport:
    if layer.kind not in LAYER_KINDS:
        raise UnsupportedLayer(f"{layer.name}: {layer.kind} is not offloaded")
    m, n, k = layer.filters, layer.depth, layer.rows
    units = cfg.gemm_units
    wb = cfg.weight_bits

    # weights move in blocks of 16 filter rows, one block per 16 outputs in flight;
    # split the depth when a single block overflows one LWGT
    group = cfg.outputs_per_unit
    depth_splits = _cdiv(group * _cdiv(n * wb, 8), cfg.lwgt_bytes_per_unit)
    n_part = _cdiv(n, depth_splits)
    block_bytes = group * _cdiv(n_part * wb, 8)
    blocks = _cdiv(m, group)
    tile_blocks = min(blocks, cfg.lwgt_bytes_per_unit // block_bytes * (units if cfg.weight_copy_opt else 1))
    full, rem = divmod(blocks, tile_blocks)
    tile_sizes = [tile_blocks] * full + ([rem] if rem else [])
    tiles = len(tile_sizes) * depth_splits

    # per tile: broadcast the activations to the busy units, then compute
    lanes_steps = _cdiv(n_part, cfg.pes_per_unit)
    unit_blocks = sum(_cdiv(b, units) for b in tile_sizes)
    compute = unit_blocks * group * k * lanes_steps * depth_splits
    dispatch = tiles * _cycles(k * n_part, cfg.bw_dispatch)
    act_bytes = k * n  # lowered activation matrix, int8
    act_chunks = _cdiv(act_bytes, cfg.gact_bytes)
    overhead = tiles * cfg.tile_overhead + (tiles * act_chunks * cfg.chunk_overhead if act_chunks > 1 else 0)
    acc = compute + dispatch + overhead

    weight_bytes = _cdiv(m * n * wb, 8)
    send_wgt_bytes = weight_bytes * (1 if cfg.weight_copy_opt else units)
    send_act_bytes = act_bytes * (tiles if act_chunks > 1 else 1)
    dma_bw = cfg.bw_dma_acc * cfg.dma_channels

    in_bytes = math.prod(layer.input_shape)
    out_bytes = k * m
    im2col_bytes = act_bytes if layer.kind == "conv2d" else 0

    lr = LayerReport(
        name=layer.name, kind=layer.kind, filters=m, depth=n, rows=k, macs=m * n * k,
        prep_act=_cycles(in_bytes + im2col_bytes, cfg.bw_cpu_prep),
        load_act=_cycles(act_bytes, cfg.bw_cpu_dma),
        load_wgt=0 if cfg.dma_preload else _cycles(weight_bytes, cfg.bw_cpu_dma),
        send_act=_cycles(send_act_bytes, dma_bw),
        send_wgt=_cycles(send_wgt_bytes, dma_bw),
        acc=acc,
        store=0 if cfg.overlap_store else _cycles(out_bytes, cfg.bw_cpu_dma),
        compute_cycles=compute,
        act_bytes=act_bytes,
        weight_bytes=weight_bytes,
        send_act_bytes=send_act_bytes,
        send_wgt_bytes=send_wgt_bytes,
        lwgt_bytes_per_unit=send_wgt_bytes / units,
        weight_tiles=tiles,
        lwgt_refetch_count=tiles,
        act_chunks=act_chunks,
    )
    lr.pe_utilization = lr.macs / (acc * units * cfg.pes_per_unit) if acc else 0.0
    return lr


def simulate_model(
    layers: Sequence[LayerSpec],
    cfg: AccelConfig,
    cpu_layers: Sequence[dict] = (),
) -> SimReport:
    """Simulate every offloaded layer; CPU-side layers contribute their given times."""
    t_other = 0.0
    for entry in cpu_layers:
        t = entry.get("time_ms")
        if t is None:
            raise MissingCpuTime(f"CPU layer {entry.get('name', '?')!r} has no time_ms")
        t_other += float(t)
    return SimReport(cfg, [simulate_layer(layer, cfg) for layer in layers], t_other)


SWEEP_AXES = ("lwgt", "gact", "gemm_units")
HELD_BUFFER = 128 * KIB


def sweep(
    layers: Sequence[LayerSpec],
    cfg: AccelConfig,
    axis: str,
    values: Sequence[int],
    cpu_layers: Sequence[dict] = (),
    *,
    threads: int = 1,
) -> list[tuple[int, SimReport]]:
    """One report per value; the buffer not being swept is held at 128 KiB."""
    if axis == "lwgt":
        make = lambda v: replace(cfg, lwgt_bytes_per_unit=int(v), gact_bytes=HELD_BUFFER)
    elif axis == "gact":
        make = lambda v: replace(cfg, gact_bytes=int(v), lwgt_bytes_per_unit=HELD_BUFFER)
    elif axis == "gemm_units":
        make = lambda v: replace(cfg, gemm_units=int(v))
    else:
        raise ConfigInvalid(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    configs = [make(v) for v in values]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(lambda c: simulate_model(layers, c, cpu_layers), configs))
    else:
        reports = [simulate_model(layers, c, cpu_layers) for c in configs]
    return list(zip(values, reports))


def sweep_csv(axis: str, results: Sequence[tuple[int, SimReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "acc_cycles", *[f"{s}_cycles" for s in STAGES], "t_conv_fc_ms", "total_ms", "pe_utilization"])
    for value, rep in results:
        w.writerow([
            value, rep.acc_cycles, *[rep.stage_cycles(s) for s in STAGES],
            f"{rep.t_accel_ms:.6f}", f"{rep.total_ms:.6f}", f"{rep.pe_utilization:.6f}",
        ])
    return buf.getvalue()


def energy(run: "SimReport | float", p_inference_w: float, p_idle_w: float, images: int = 1) -> float:
    """Joules per image: ``(P_inference - P_idle) * seconds / images``.

    ``run`` is the wall time of the whole measured run in seconds, or a
    report whose total time is used.
    """
    if p_idle_w < 0 or p_inference_w < p_idle_w:
        raise NegativePower(
            f"need P_inference >= P_idle >= 0 (got {p_inference_w} W, {p_idle_w} W)"
        )
    if images < 1:
        raise ValueError("images must be >= 1")
    seconds = run.total_seconds if isinstance(run, SimReport) else float(run)
    if seconds < 0:
        raise ValueError("time must be non-negative")
    return (p_inference_w - p_idle_w) * seconds / images
