"""Model and tensor files, synthetic model generation and the prep pipeline.

A model is a JSON manifest plus a sidecar blob. The manifest lists layers,
quantization parameters and, for every tensor, the ``(offset, length,
crc32)`` of its section in the blob. All numbers in the blob are
little-endian: weights are int8 or packed 4-bit codes, biases int32.

A model is at one of two stages: ``int8`` (converted, weights are uniform
int8) or ``pot_int_e`` (preprocessed, PoT layers hold packed shift codes).
Layers marked ``pot: false`` stay int8 in both stages.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .errors import ChecksumMismatch, SchemaError, StageError, VersionUnsupported
from .presets import preset_layers
from .qmm import LayerSpec
from .quantizer import QuantParams, quantize_weights
from .schemes import PoTScheme, generate_levels
from .weightprep import PackedWeightTensor, prepare_weights

FORMAT = "potacc-model"
VERSION = 1
STAGES = ("int8", "pot_int_e")
_ALIGN = 8


@dataclass
class ModelFile:
    scheme: PoTScheme
    stage: str
    layers: list[LayerSpec]
    cpu_layers: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StageError(f"unknown stage {self.stage!r}; valid: {', '.join(STAGES)}")
        for layer in self.layers:
            if layer.weights is None or not layer.pot:
                continue
            if layer.packed != (self.stage == "pot_int_e"):
                raise StageError(f"{layer.name}: weights do not match model stage {self.stage!r}")

    @property
    def has_weights(self) -> bool:
        return bool(self.layers) and all(l.weights is not None for l in self.layers)

    def require_stage(self, stage: str, action: str) -> None:
        if self.stage != stage:
            raise StageError(f"{action} needs a {stage!r} model, this one is {self.stage!r}")
        if not self.has_weights:
            raise StageError(f"{action} needs weights; the model was generated shapes-only")


# -- manifest schema ----------------------------------------------------------

@lru_cache(maxsize=None)
def _validator():
    schema = json.loads(resources.files(__package__).joinpath("model_schema.json").read_text())
    return jsonschema.Draft202012Validator(schema)


def _pointer(path: Iterable) -> str:
    return "/" + "/".join(str(p) for p in path)


def validate_manifest(manifest: dict) -> None:
    """Raise VersionUnsupported or SchemaError (with a JSON pointer) if invalid."""
    if not isinstance(manifest, dict):
        raise SchemaError("/: manifest must be a JSON object")
    version = manifest.get("version")
    if isinstance(version, int) and version != VERSION:
        raise VersionUnsupported(f"model format version {version} is not supported (expected {VERSION})")
    errors = sorted(_validator().iter_errors(manifest), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise SchemaError(f"{_pointer(err.absolute_path)}: {err.message}")


# -- save / load --------------------------------------------------------------

def blob_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".bin")


class _BlobWriter:
    def __init__(self):
        self.buf = bytearray()

    def add(self, data: bytes) -> dict:
        self.buf += b"\0" * (-len(self.buf) % _ALIGN)
        entry = {"offset": len(self.buf), "length": len(data), "crc32": zlib.crc32(data)}
        self.buf += data
        return entry


def _quant_record(params: QuantParams, correction=None) -> dict:
    rec = {
        "weight_scales": [float(s) for s in params.weight_scales],
        "input_scale": float(params.input_scale),
        "input_zero_point": int(params.input_zero_point),
        "output_scale": float(params.output_scale),
        "output_zero_point": int(params.output_zero_point),
    }
    if correction is not None:
        rec["correction"] = [float(c) for c in correction]
    return rec


def layer_to_dict(layer: LayerSpec, blob: _BlobWriter | None = None) -> dict:
    d = {
        "name": layer.name,
        "kind": layer.kind,
        "input_shape": list(layer.input_shape),
        "weight_shape": list(layer.weight_shape),
        "stride": layer.stride,
        "padding": layer.padding,
        "pot": layer.pot,
    }
    if layer.params is not None:
        d["quant"] = _quant_record(layer.params, layer.weights.correction if layer.packed else None)
    if blob is not None and layer.weights is not None:
        if layer.packed:
            d["weights"] = {"encoding": "pot4", **blob.add(layer.weights.data)}
        else:
            w = np.asarray(layer.weights, dtype=np.int8)
            d["weights"] = {"encoding": "int8", **blob.add(w.tobytes())}
    if blob is not None and layer.bias is not None:
        d["bias"] = blob.add(np.asarray(layer.bias, dtype="<i4").tobytes())
    if layer.meta:
        d["meta"] = dict(layer.meta)
    return d


def to_manifest(model: ModelFile, blob_name: str) -> tuple[dict, bytes]:
    blob = _BlobWriter()
    layers = [layer_to_dict(l, blob) for l in model.layers]
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "scheme": model.scheme.name,
        "bitwidth": model.scheme.bitwidth,
        "stage": model.stage,
        "blob": blob_name,
        "blob_size": len(blob.buf),
        "layers": layers,
        "cpu_layers": list(model.cpu_layers),
        "meta": dict(model.meta),
    }
    return manifest, bytes(blob.buf)


def save_model(model: ModelFile, path: str | Path) -> Path:
    """Write ``path`` (manifest) and its sidecar blob; returns the blob path."""
    path = Path(path)
    bpath = blob_path(path)
    manifest, blob = to_manifest(model, bpath.name)
    validate_manifest(manifest)
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    bpath.write_bytes(blob)
    return bpath


def _section(blob: bytes, entry: dict, where: str) -> bytes:
    start, length = entry["offset"], entry["length"]
    if start + length > len(blob):
        raise ChecksumMismatch(f"{where}: section [{start}, {start + length}) runs past the {len(blob)}-byte blob")
    data = blob[start:start + length]
    if zlib.crc32(data) != entry["crc32"]:
        raise ChecksumMismatch(f"{where}: CRC32 mismatch")
    return data


def _layer_from_dict(d: dict, blob: bytes, scheme: PoTScheme, where: str) -> LayerSpec:
    params = correction = None
    if "quant" in d:
        q = d["quant"]
        params = QuantParams(
            weight_scales=np.array(q["weight_scales"], dtype=np.float64),
            input_scale=q["input_scale"],
            input_zero_point=q["input_zero_point"],
            output_scale=q["output_scale"],
            output_zero_point=q["output_zero_point"],
        )
        correction = q.get("correction")
    layer = LayerSpec(
        name=d["name"], kind=d["kind"], input_shape=d["input_shape"], weight_shape=d["weight_shape"],
        stride=d.get("stride", 1), padding=d.get("padding", "valid"), params=params,
        pot=d.get("pot", True), meta=d.get("meta", {}),
    )
    shape = layer.weight_shape
    count = int(np.prod(shape))
    if "weights" in d:
        w = d["weights"]
        data = _section(blob, w, f"{where}/weights")
        if w["encoding"] == "int8":
            if len(data) != count:
                raise SchemaError(f"{where}/weights/length: {len(data)} bytes for {count} int8 weights")
            layer.weights = np.frombuffer(data, dtype=np.int8).reshape(shape).copy()
        else:
            if len(data) != (count + 1) // 2:
                raise SchemaError(f"{where}/weights/length: {len(data)} bytes for {count} packed weights")
            if params is None:
                raise SchemaError(f"{where}/quant: packed weights need quantization parameters")
            filters = shape[0]
            corr = np.ones(filters) if correction is None else np.asarray(correction, dtype=np.float64)
            scales = np.broadcast_to(params.weight_scales, (filters,)).astype(np.float64)
            layer.weights = PackedWeightTensor(scheme, shape, bytes(data), scales, corr)
    if "bias" in d:
        data = _section(blob, d["bias"], f"{where}/bias")
        if len(data) != 4 * layer.filters:
            raise SchemaError(f"{where}/bias/length: {len(data)} bytes for {layer.filters} int32 biases")
        layer.bias = np.frombuffer(data, dtype="<i4").astype(np.int32)
    return layer


def from_manifest(manifest: dict, blob: bytes) -> ModelFile:
    validate_manifest(manifest)
    if len(blob) != manifest["blob_size"]:
        raise ChecksumMismatch(f"blob is {len(blob)} bytes, manifest expects {manifest['blob_size']}")
    scheme = PoTScheme.parse(manifest["scheme"])
    stage = manifest["stage"]
    layers = []
    for i, d in enumerate(manifest["layers"]):
        enc = d.get("weights", {}).get("encoding")
        if d.get("pot", True) and enc is not None and enc != ("pot4" if stage == "pot_int_e" else "int8"):
            raise StageError(f"/layers/{i}/weights/encoding: {enc!r} weights in a {stage!r} model")
        layers.append(_layer_from_dict(d, blob, scheme, f"/layers/{i}"))
    return ModelFile(scheme, stage, layers, list(manifest.get("cpu_layers", [])), dict(manifest.get("meta", {})))


def load_model(path: str | Path) -> ModelFile:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"/: not valid JSON ({exc})") from None
    validate_manifest(manifest)
    blob = (path.parent / manifest["blob"]).read_bytes()
    return from_manifest(manifest, blob)


# -- tensor files -------------------------------------------------------------

TENSOR_MAGIC = b"PTNS"


def write_tensor(path: str | Path, x: np.ndarray, scale: float = 1.0, zero_point: int = 0, **extra) -> None:
    """int8 tensor file: magic, u32 header length, JSON header, raw int8 data."""
    x = np.asarray(x)
    if x.dtype != np.int8:
        raise ValueError(f"tensor files hold int8 data, got {x.dtype}")
    header = json.dumps({"dtype": "int8", "shape": list(x.shape), "scale": float(scale),
                         "zero_point": int(zero_point), **extra}).encode()
    Path(path).write_bytes(TENSOR_MAGIC + struct.pack("<I", len(header)) + header + x.tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC or len(raw) < 8:
        raise SchemaError(f"{path}: not a tensor file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen])
    except json.JSONDecodeError:
        raise SchemaError(f"{path}: corrupt tensor header") from None
    shape = tuple(header.get("shape", ()))
    data = raw[8 + hlen:]
    if header.get("dtype") != "int8" or len(data) != int(np.prod(shape)):
        raise ChecksumMismatch(f"{path}: {len(data)} data bytes do not match shape {shape}")
    return np.frombuffer(data, dtype=np.int8).reshape(shape).copy(), header


# -- synthetic models ---------------------------------------------------------

def _synth_weights(rng: np.random.Generator, shape, scheme: PoTScheme, shared_alpha: bool = False) -> np.ndarray:
    """Float weights drawn uniformly over the scheme's levels, times a random scale.

    The scale is per filter unless ``shared_alpha``; a per-layer quantization
    scale only keeps the weights on a PoT grid when every filter shares it.
    """
    values = np.array([float(lv.pot_float) for lv in generate_levels(scheme)])
    idx = rng.integers(0, values.size, size=shape)
    rows = idx.reshape(shape[0], -1)
    nonzero = values[rows] != 0
    for f in np.flatnonzero(~nonzero.any(axis=1)):  # keep every scale group defined
        rows[f, rng.integers(rows.shape[1])] = int(np.flatnonzero(values != 0)[0])
    alpha = rng.uniform(0.02, 0.2, size=(1 if shared_alpha else shape[0],) + (1,) * (len(shape) - 1))
    return values[idx] * alpha



def synth_model(
    layers: "str | Sequence[dict]",
    scheme: "str | PoTScheme",
    seed: int = 0,
    *,
    granularity: str = "per_filter",
    shapes_only: bool = False,
    cpu_layers: Sequence[dict] | None = None,
) -> ModelFile:
    """Build an int8-stage model with PoT-trained-looking weights.

    ``layers`` is a preset name or a list of layer dicts (``name``, ``kind``,
    ``input_shape``, ``weight_shape``, optional ``stride``/``padding``/``pot``).
    Each layer's input quantization is the previous layer's output quantization.
    """
    scheme = PoTScheme.parse(scheme)
    meta = {"seed": int(seed), "granularity": granularity, "shapes_only": shapes_only}
    if isinstance(layers, str):
        meta["preset"] = layers
        layers, preset_cpu = preset_layers(layers)
        cpu_layers = preset_cpu if cpu_layers is None else cpu_layers
    rng = np.random.default_rng(seed)
    in_scale, in_zp = 0.05, int(rng.integers(-8, 9))
    out = []
    for d in layers:
        layer = LayerSpec(**d)
        out_scale = float(in_scale * 0.1 * np.sqrt(layer.depth) * rng.uniform(0.5, 1.5))
        out_zp = int(rng.integers(-8, 9))
        if shapes_only:
            layer.params = QuantParams(np.ones(1), in_scale, in_zp, out_scale, out_zp)
        else:
            q, wp = quantize_weights(
                _synth_weights(rng, layer.weight_shape, scheme, granularity == "per_layer"), granularity)
            layer.weights = q
            layer.params = replace(wp, input_scale=in_scale, input_zero_point=in_zp,
                                   output_scale=out_scale, output_zero_point=out_zp)
            layer.bias = rng.integers(-2000, 2001, size=layer.filters).astype(np.int32)
        out.append(layer)
        in_scale, in_zp = out_scale, out_zp
    return ModelFile(scheme, "int8", out, list(cpu_layers or []), meta)


def prep_model(model: ModelFile, *, qkeras_c1: bool = False) -> ModelFile:
    """Scale-correct, encode and pack every PoT layer of an int8-stage model."""
    model.require_stage("int8", "weight preprocessing")
    layers = []
    for layer in model.layers:
        if not layer.pot:
            layers.append(replace(layer))
            continue
        packed, params, bias = prepare_weights(layer.weights, layer.params, model.scheme, layer.bias,
                                               qkeras_c1=qkeras_c1)
        layers.append(replace(layer, weights=packed, params=params, bias=bias))
    meta = dict(model.meta, qkeras_c1=qkeras_c1)
    return ModelFile(model.scheme, "pot_int_e", layers, list(model.cpu_layers), meta)


def random_input(model: ModelFile, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(-128, 128, size=model.layers[0].input_shape).astype(np.int8)


__all__ = [
    "ModelFile", "validate_manifest", "save_model", "load_model", "blob_path", "to_manifest",
    "from_manifest", "layer_to_dict", "write_tensor", "read_tensor", "synth_model", "prep_model",
    "random_input",
]
