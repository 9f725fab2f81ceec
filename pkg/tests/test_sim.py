import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from potacc.errors import ConfigInvalid, MissingCpuTime, NegativePower
from potacc.presets import preset_layers
from potacc.qmm import LayerSpec
from potacc.sim import (
    KIB, STAGES, AccelConfig, SimReport, energy, preset, simulate_layer, simulate_model, sweep, sweep_csv,
)


@pytest.fixture(scope="module")
def resnet():
    layers, cpu = preset_layers("resnet18")
    return [LayerSpec(**d) for d in layers], cpu


def test_lwgt_monotone(resnet):
    layers, _ = resnet
    accs = [r.acc_cycles for _, r in sweep(layers, preset(), "lwgt", [32 * KIB, 64 * KIB, 128 * KIB, 256 * KIB, 512 * KIB])]
    assert all(a >= b for a, b in zip(accs, accs[1:]))


def test_single_tile_layer_unchanged():
    layer = LayerSpec("fc", "fully_connected", (1, 64), (32, 64))
    small = simulate_layer(layer, replace(preset(), lwgt_bytes_per_unit=128 * KIB))
    big = simulate_layer(layer, replace(preset(), lwgt_bytes_per_unit=512 * KIB))
    assert small.weight_tiles == big.weight_tiles == 1
    assert small.acc == big.acc


@given(st.integers(1, 300), st.integers(1, 2000), st.integers(1, 200))
def test_four_bit_weights_halve_traffic(m, n, k):
    layer = LayerSpec("fc", "fully_connected", (k, 2 * n), (m, 2 * n))
    r8 = simulate_layer(layer, replace(preset(), weight_bits=8))
    r4 = simulate_layer(layer, replace(preset(), weight_bits=4))
    assert 2 * r4.send_wgt_bytes == r8.send_wgt_bytes
    assert r4.acc <= r8.acc


@pytest.mark.parametrize("units", [2, 4, 8, 16])
def test_copy_opt_divides_per_unit_bytes(resnet, units):
    layers, _ = resnet
    base = replace(preset(), gemm_units=units)
    a = simulate_model(layers, replace(base, weight_copy_opt=False))
    b = simulate_model(layers, replace(base, weight_copy_opt=True))
    for la, lb in zip(a.layers, b.layers):
        assert la.lwgt_bytes_per_unit == units * lb.lwgt_bytes_per_unit


def test_preload_removes_load_wgt(resnet):
    layers, cpu = resnet
    off = simulate_model(layers, replace(preset(), dma_preload=False), cpu)
    on = simulate_model(layers, replace(preset(), dma_preload=True), cpu)
    assert on.stage_cycles("load_wgt") == 0
    assert off.total_cycles - on.total_cycles == off.stage_cycles("load_wgt") > 0


def test_overlap_store(resnet):
    layers, _ = resnet
    r = simulate_model(layers, replace(preset(), overlap_store=True))
    assert r.stage_cycles("store") == 0


def test_empty_model_is_cpu_time():
    r = simulate_model([], preset(), [{"name": "a", "time_ms": 3.5}, {"name": "b", "time_ms": 1.5}])
    assert r.total_ms == 5.0 and r.t_accel_ms == 0.0 and r.pe_utilization == 0.0


def test_missing_cpu_time():
    with pytest.raises(MissingCpuTime, match="pool"):
        simulate_model([], preset(), [{"name": "pool"}])


def test_config_errors():
    with pytest.raises(ConfigInvalid):
        AccelConfig(gemm_units=3)
    with pytest.raises(ConfigInvalid):
        AccelConfig(weight_bits=2)
    with pytest.raises(ConfigInvalid):
        AccelConfig(lwgt_bytes_per_unit=0)
    with pytest.raises(ConfigInvalid, match="bogus"):
        AccelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigInvalid):
        preset("zynq", "vmac")
    with pytest.raises(ConfigInvalid):
        sweep([], preset(), "freq", [1])


def test_from_dict_overrides_preset():
    cfg = AccelConfig.from_dict({"preset": "kria", "design": "vsac", "lact_bytes": 4096})
    assert cfg.gemm_units == 8 and cfg.weight_bits == 4 and cfg.lact_bytes == 4096


def test_energy_examples():
    assert energy(0, 27.37, 2.74) == 0.0
    assert energy(1.0, 3.0, 1.0) == 2.0
    assert energy(27.37, 2.74, 0.0, 100) == pytest.approx(27.37 * 2.74 / 100, rel=1e-12)
    r = simulate_model([], preset(), [{"name": "x", "time_ms": 250.0}])
    assert energy(r, 5.0, 1.0, 2) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(NegativePower):
        energy(1.0, 1.0, 2.0)
    with pytest.raises(NegativePower):
        energy(1.0, 1.0, -0.5)


def test_report_dict_and_csv(resnet):
    layers, cpu = resnet
    r = simulate_model(layers, preset(), cpu)
    d = json.loads(json.dumps(r.to_dict()))
    assert d["schema"] == "potacc-sim/1"
    assert set(d["totals"]["cycles"]) == set(STAGES)
    assert len(d["layers"]) == len(layers)
    assert d["totals"]["total_ms"] == pytest.approx(r.t_accel_ms + 51.5)
    assert 0 < r.pe_utilization <= 1
    results = sweep(layers, preset(), "gact", [64 * KIB, 128 * KIB], cpu, threads=2)
    text = sweep_csv("gact", results).splitlines()
    assert text[0].startswith("gact,acc_cycles") and len(text) == 3
    serial = sweep(layers, preset(), "gact", [64 * KIB, 128 * KIB], cpu)
    assert [x.acc_cycles for _, x in serial] == [x.acc_cycles for _, x in results]


def test_gact_irrelevant_when_activations_fit():
    layer = LayerSpec("c", "conv2d", (1, 14, 14, 64), (128, 3, 3, 64), padding="same")
    reports = [simulate_layer(layer, replace(preset(), gact_bytes=g)) for g in (128 * KIB, 256 * KIB, 1024 * KIB)]
    assert reports[0].act_bytes <= 128 * KIB
    assert len({r.acc for r in reports}) == 1


@given(st.integers(1, 600), st.integers(1, 3000), st.integers(1, 400), st.sampled_from([2, 4, 8, 16]),
       st.sampled_from(["vmac", "vmac_opt", "vsac"]), st.sampled_from([16, 64, 128, 512]))
def test_compute_lower_bound_and_utilization(m, n, k, units, design, lwgt_k):
    layer = LayerSpec("fc", "fully_connected", (k, n), (m, n))
    cfg = replace(preset(design=design), gemm_units=units, lwgt_bytes_per_unit=lwgt_k * KIB)
    r = simulate_layer(layer, cfg)
    assert r.acc * units * 64 >= r.macs
    assert 0 < r.pe_utilization <= 1


@given(st.integers(1, 600), st.integers(1, 3000), st.integers(1, 400), st.sampled_from([2, 4, 8, 16]))
def test_copy_opt_never_hurts(m, n, k, units):
    layer = LayerSpec("fc", "fully_connected", (k, n), (m, n))
    base = replace(preset(), gemm_units=units)
    a = simulate_layer(layer, replace(base, weight_copy_opt=False))
    b = simulate_layer(layer, replace(base, weight_copy_opt=True))
    for stage in STAGES:
        assert getattr(b, stage) <= getattr(a, stage), stage


def test_deterministic_reports(resnet):
    layers, cpu = resnet
    a = json.dumps(simulate_model(layers, preset("kria", "vsac"), cpu).to_dict(), sort_keys=True)
    b = json.dumps(simulate_model(layers, preset("kria", "vsac"), cpu).to_dict(), sort_keys=True)
    assert a == b
