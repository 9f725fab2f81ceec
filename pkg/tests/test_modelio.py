import json

import numpy as np
import pytest

from potacc.errors import ChecksumMismatch, NotAPoTWeight, SchemaError, StageError, UnknownPreset, VersionUnsupported
from potacc.modelio import (
    ModelFile, blob_path, load_model, prep_model, random_input, read_tensor, save_model, synth_model,
    validate_manifest, write_tensor,
)
from potacc.qmm import run_model
from potacc.schemes import ALL_SCHEMES, generate_levels
from potacc.weightprep import PackedWeightTensor

THREE = [
    dict(name="c1", kind="conv2d", input_shape=[1, 6, 6, 3], weight_shape=[5, 3, 3, 3], padding="same"),
    dict(name="c2", kind="conv2d", input_shape=[1, 6, 6, 5], weight_shape=[4, 3, 3, 5], stride=2, padding="valid"),
    dict(name="fc", kind="fully_connected", input_shape=[1, 16], weight_shape=[3, 16]),
]


def _same_layers(a, b):
    assert len(a.layers) == len(b.layers)
    for x, y in zip(a.layers, b.layers):
        assert (x.name, x.kind, x.input_shape, x.weight_shape, x.stride, x.padding) == \
               (y.name, y.kind, y.input_shape, y.weight_shape, y.stride, y.padding)
        assert np.array_equal(x.params.weight_scales, y.params.weight_scales)
        assert np.array_equal(x.bias, y.bias)
        if isinstance(x.weights, PackedWeightTensor):
            assert x.weights.data == y.weights.data
            assert np.array_equal(x.weights.correction, y.weights.correction)
        else:
            assert np.array_equal(x.weights, y.weights)


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
@pytest.mark.parametrize("prep", [False, True])
def test_save_load_identity(tmp_path, scheme, prep):
    model = synth_model(THREE, scheme, seed=3)
    if prep:
        model = prep_model(model)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.stage == model.stage and back.scheme == model.scheme
    _same_layers(model, back)
    x = random_input(model, 1)
    assert np.array_equal(run_model(model.layers, x), run_model(back.layers, x))
    # saving again reproduces both files byte for byte
    save_model(back, tmp_path / "again.json")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()
    first = json.loads((tmp_path / "m.json").read_text())
    second = json.loads((tmp_path / "again.json").read_text())
    first.pop("blob"), second.pop("blob")
    assert first == second


def test_same_seed_same_files(tmp_path):
    save_model(synth_model("tiny", "apot", seed=9), tmp_path / "a.json")
    save_model(synth_model("tiny", "apot", seed=9), tmp_path / "b.json")
    save_model(synth_model("tiny", "apot", seed=10), tmp_path / "c.json")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()


def test_truncated_blob(tmp_path):
    save_model(synth_model(THREE, "msq", seed=1), tmp_path / "m.json")
    b = blob_path(tmp_path / "m.json")
    b.write_bytes(b.read_bytes()[:-10])
    with pytest.raises(ChecksumMismatch):
        load_model(tmp_path / "m.json")


def test_flipped_byte(tmp_path):
    save_model(synth_model(THREE, "msq", seed=1), tmp_path / "m.json")
    b = blob_path(tmp_path / "m.json")
    raw = bytearray(b.read_bytes())
    raw[3] ^= 0xFF
    b.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch, match="/layers/0/weights"):
        load_model(tmp_path / "m.json")


def test_schema_errors(tmp_path):
    save_model(synth_model(THREE, "apot", seed=1), tmp_path / "m.json")
    manifest = json.loads((tmp_path / "m.json").read_text())
    bad = json.loads(json.dumps(manifest))
    bad["layers"][1]["stride"] = 0
    with pytest.raises(SchemaError, match="/layers/1/stride"):
        validate_manifest(bad)
    bad = json.loads(json.dumps(manifest))
    bad["scheme"] = "log2"
    with pytest.raises(SchemaError, match="/scheme"):
        validate_manifest(bad)
    bad = dict(manifest, version=2)
    with pytest.raises(VersionUnsupported):
        validate_manifest(bad)
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(SchemaError):
        load_model(tmp_path / "x.json")


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
@pytest.mark.parametrize("granularity", ["per_filter", "per_layer"])
def test_synth_weights_dequantize_to_levels(scheme, granularity):
    model = synth_model(THREE, scheme, seed=4, granularity=granularity)
    prepped = prep_model(model)
    levels = {lv.pot_int for lv in generate_levels(scheme)}
    for layer in prepped.layers:
        assert set(np.unique(layer.weights.pot_int()).tolist()) <= levels
    for a, b in zip(model.layers, model.layers[1:]):
        assert a.params.output_scale == b.params.input_scale
        assert a.params.output_zero_point == b.params.input_zero_point


def test_resnet18_preprocesses_cleanly():
    model = synth_model("resnet18", "apot", seed=0)
    try:
        prepped = prep_model(model)
    except NotAPoTWeight as exc:  # pragma: no cover
        pytest.fail(str(exc))
    assert prepped.stage == "pot_int_e" and len(prepped.layers) == len(model.layers)
    assert prepped.cpu_layers[0]["time_ms"] == 51.5


def test_stage_gating():
    model = synth_model(THREE, "apot", seed=1)
    prepped = prep_model(model)
    with pytest.raises(StageError):
        prep_model(prepped)
    with pytest.raises(StageError):
        ModelFile(model.scheme, "pot_int_e", model.layers)
    with pytest.raises(StageError):
        ModelFile(model.scheme, "float", [])
    shapes = synth_model("resnet18", "apot", shapes_only=True)
    with pytest.raises(StageError, match="shapes-only"):
        prep_model(shapes)


def test_unknown_preset():
    with pytest.raises(UnknownPreset, match="resnet18"):
        synth_model("resnet19", "apot")


def test_tensor_round_trip(tmp_path):
    x = np.arange(-12, 12, dtype=np.int8).reshape(2, 3, 4)
    write_tensor(tmp_path / "t.ptns", x, scale=0.5, zero_point=-3, note="hi")
    y, header = read_tensor(tmp_path / "t.ptns")
    assert np.array_equal(x, y) and header["scale"] == 0.5 and header["zero_point"] == -3
    (tmp_path / "bad.ptns").write_bytes((tmp_path / "t.ptns").read_bytes()[:-1])
    with pytest.raises(ChecksumMismatch):
        read_tensor(tmp_path / "bad.ptns")
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "f.ptns", x.astype(np.float32))
