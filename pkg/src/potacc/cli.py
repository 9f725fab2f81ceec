"""``potacc`` command line.

Every subcommand writes data to stdout (a table, or JSON with ``--json``) and
diagnostics to stderr. Exit status: 0 ok, 1 invalid input or a failed check,
2 internal error.

Option values resolve as: command-line flag, then ``POTACC_<NAME>`` in the
environment, then the TOML file given by ``--config`` / ``POTACC_CONFIG``,
then the built-in default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigInvalid, PotaccError
from .modelio import (
    load_model, prep_model, random_input, read_tensor, save_model, synth_model, write_tensor,
)
from .presets import preset_layers
from .qmm import LayerSpec, im2col, qmm_mult, qmm_shift, run_model
from .quantizer import quantize_weights
from .schemes import ALL_SCHEMES, PoTScheme, generate_levels
from .shift_pe import IPW, LANES, dot64, min_product_width, pe_multiply
from .sim import (
    AccelConfig, BOARDS, DESIGNS, SWEEP_AXES, SimReport, energy, preset, simulate_model, sweep, sweep_csv,
)
from .weightprep import decode

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UsageError(PotaccError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- settings -----------------------------------------------------------------

class Settings:
    """Flag > environment > config file > default."""

    def __init__(self, args: argparse.Namespace, environ=None):
        self.args = args
        self.env = os.environ if environ is None else environ
        path = getattr(args, "config", None) or self.env.get("POTACC_CONFIG")
        self.config = {}
        if path:
            with open(path, "rb") as fh:
                self.config = tomllib.load(fh)

    def get(self, name: str, default=None, cast=str):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        env = self.env.get("POTACC_" + name.upper())
        if env is not None:
            try:
                return cast(env)
            except ValueError:
                raise ConfigInvalid(f"POTACC_{name.upper()}={env!r} is not a valid value") from None
        if name in self.config:
            return self.config[name]
        return default

    def require(self, name: str, cast=str):
        value = self.get(name, cast=cast)
        if value is None:
            raise UsageError(f"missing --{name.replace('_', '-')} (or POTACC_{name.upper()} / config key {name!r})")
        return value

    @property
    def threads(self) -> int:
        return max(1, int(self.get("threads", 1, int)))


def _truthy(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(text)


def parse_size(text: "str | int") -> int:
    """``128K``, ``1M``, ``65536`` -> bytes (binary multiples)."""
    if isinstance(text, int):
        return text
    t = str(text).strip().upper().removesuffix("B").removesuffix("I")
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(t[-1:], 1)
    try:
        value = int(float(t[:-1] if mult > 1 else t) * mult)
    except ValueError:
        raise UsageError(f"cannot read size {text!r}; use e.g. 128K, 1M or a byte count") from None
    if value <= 0:
        raise UsageError(f"size must be positive: {text!r}")
    return value


# -- output helpers -----------------------------------------------------------

def _emit(args, data, table: "list[list] | None" = None, header: "list[str] | None" = None) -> None:
    if getattr(args, "json", False) or table is None:
        json.dump(data, sys.stdout, indent=1, default=_json_default)
        sys.stdout.write("\n")
        return
    rows = [header] + [[str(c) for c in r] for r in table] if header else [[str(c) for c in r] for r in table]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _scheme(settings: Settings) -> PoTScheme:
    return PoTScheme.parse(settings.require("scheme"))


# -- subcommands --------------------------------------------------------------

def cmd_levels(args, st: Settings) -> int:
    name = st.get("scheme")
    schemes = [PoTScheme.parse(name)] if name else list(ALL_SCHEMES)
    records = {}
    for s in schemes:
        records[s.name] = [
            {"pot_float": str(lv.pot_float), "pot_float_value": float(lv.pot_float),
             "int8": lv.int8, "pot_int": lv.pot_int, "code": lv.code, "code_label": lv.code_label}
            for lv in generate_levels(s)
        ]
    if args.json:
        _emit(args, records[schemes[0].name] if name else records)
        return 0
    for s in schemes:
        print(f"# {s.name}: {len(records[s.name])} levels")
        _emit(args, None, [[r["pot_float"], r["int8"], r["pot_int"], r["code_label"]] for r in records[s.name]],
              ["pot_float", "int8", "pot_int", "code"])
    return 0


def cmd_quantize(args, st: Settings) -> int:
    w = np.load(args.weights)
    q, params = quantize_weights(w, st.get("granularity", "per_filter"))
    write_tensor(args.out, q, weight_scales=params.weight_scales.tolist())
    data = {"out": str(args.out), "shape": list(q.shape), "weight_scales": params.weight_scales.tolist()}
    _emit(args, data, [[i, s] for i, s in enumerate(params.weight_scales)], ["group", "scale"])
    return 0


def cmd_prep(args, st: Settings) -> int:
    model = load_model(args.model)
    expected = st.get("scheme")
    if expected and PoTScheme.parse(expected) != model.scheme:
        raise UsageError(f"model uses scheme {model.scheme.name!r}, not {expected!r}")
    prepped = prep_model(model, qkeras_c1=bool(st.get("qkeras_c1", False, _truthy)))
    save_model(prepped, args.out)
    rows, data = [], []
    for before, after in zip(model.layers, prepped.layers):
        if not after.packed:
            continue
        corr = after.weights.correction
        rows.append([after.name, before.weights.nbytes, after.weights.nbytes,
                     f"{corr.min():.6f}", f"{corr.max():.6f}"])
        data.append({"layer": after.name, "int8_bytes": int(before.weights.nbytes),
                     "packed_bytes": after.weights.nbytes, "correction": corr.tolist()})
    _emit(args, {"out": str(args.out), "stage": prepped.stage, "layers": data}, rows,
          ["layer", "int8_bytes", "packed_bytes", "C_min", "C_max"])
    return 0


def pe_check(scheme: PoTScheme, vectors: int = 1000, seed: int = 0) -> dict:
    """Exhaustive single-PE check plus random 64-lane dot products."""
    table = generate_levels(scheme).code_table
    mismatches, widest = [], 0
    for code in range(16):
        for a in range(-128, 128):
            out = pe_multiply(code, a, scheme)
            widest = max(widest, (out.product if out.product >= 0 else ~out.product).bit_length() + 1)
            got = -out.product if out.negate else out.product
            if got != table[code] * a:
                mismatches.append({"code": code, "activation": a, "got": got, "want": table[code] * a})
    rng = np.random.default_rng(seed)
    dot_bad = 0
    for _ in range(vectors):
        codes = rng.integers(0, 16, LANES)
        acts = rng.integers(-128, 128, LANES)
        if dot64(codes.tolist(), acts.tolist(), scheme) != int(decode(codes, scheme).astype(np.int64) @ acts):
            dot_bad += 1
    return {
        "scheme": scheme.name, "cases": 16 * 256, "mismatches": len(mismatches),
        "first_mismatch": mismatches[0] if mismatches else None,
        "ipw": IPW[scheme.kind], "required_width": min_product_width(scheme), "widest_product": widest,
        "dot64_vectors": vectors, "dot64_mismatches": dot_bad,
    }


def cmd_pe_check(args, st: Settings) -> int:
    name = st.get("scheme")
    schemes = [PoTScheme.parse(name)] if name else list(ALL_SCHEMES)
    results = [pe_check(s, args.vectors, int(st.get("seed", 0, int))) for s in schemes]
    ok = all(r["mismatches"] == 0 and r["dot64_mismatches"] == 0 and r["widest_product"] <= r["ipw"]
             for r in results)
    _emit(args, {"ok": ok, "schemes": results},
          [[r["scheme"], r["cases"], r["mismatches"], r["ipw"], r["widest_product"], r["dot64_mismatches"]]
           for r in results],
          ["scheme", "cases", "mismatches", "ipw", "widest", "dot64_bad"])
    if not ok:
        bad = next(r for r in results if r["mismatches"] or r["dot64_mismatches"] or r["widest_product"] > r["ipw"])
        _note(f"pe-check failed for {bad['scheme']}: first mismatch {bad['first_mismatch']}")
    return 0 if ok else 1


def cmd_run(args, st: Settings) -> int:
    model = load_model(args.model)
    engine = st.get("engine", "mult")
    if engine not in ("mult", "shift"):
        raise UsageError(f"unknown engine {engine!r}; valid: mult, shift")
    if engine == "shift":
        model.require_stage("pot_int_e", "the shift engine")
    elif not model.has_weights:
        raise PotaccError("model was generated shapes-only and cannot be executed")
    if args.random_input:
        x = random_input(model, int(st.get("seed", 0, int)))
    elif args.input and args.input.endswith(".npy"):
        x = np.load(args.input)
    elif args.input:
        x, _ = read_tensor(args.input)
    else:
        raise UsageError("give --input FILE or --random-input")
    y = run_model(model.layers, x, engine)
    last = model.layers[-1].params
    if args.out:
        write_tensor(args.out, y, last.output_scale, last.output_zero_point)
    data = {"engine": engine, "shape": list(y.shape), "crc32": zlib.crc32(y.tobytes()),
            "head": y.ravel()[:16].tolist()}
    _emit(args, data, [[k, v] for k, v in data.items()])
    return 0


def verify_model(model, seed: int = 0, max_rows: int | None = 4096) -> dict:
    """Compare the shift engine with the multiply engine on every PoT layer."""
    model.require_stage("pot_int_e", "verify")
    rng = np.random.default_rng(seed)
    layers = []
    for layer in model.layers:
        if not layer.pot:
            continue
        x = rng.integers(-128, 128, size=layer.input_shape).astype(np.int8)
        patches = im2col(x, layer) if layer.kind == "conv2d" else x
        rows = np.arange(patches.shape[0])
        if max_rows and rows.size > max_rows:
            rows = np.sort(rng.choice(rows.size, max_rows, replace=False))
            patches = patches[rows]
        got = qmm_shift(layer.weights, patches, layer.params, layer.bias)
        want = qmm_mult(layer.weights.pot_int(), patches, layer.params, layer.bias)
        entry = {"layer": layer.name, "rows_checked": int(rows.size), "outputs": int(got.size), "mismatches": 0}
        diff = np.argwhere(got != want)
        if diff.size:
            r, f = (int(v) for v in diff[0])
            entry.update(mismatches=int(diff.shape[0]), first={
                "row": int(rows[r]), "filter": f, "shift": int(got[r, f]), "mult": int(want[r, f])})
        layers.append(entry)
    return {"ok": all(e["mismatches"] == 0 for e in layers), "layers": layers}


def cmd_verify(args, st: Settings) -> int:
    model = load_model(args.model)
    max_rows = int(st.get("max_rows", 4096, int))
    result = verify_model(model, int(st.get("seed", 0, int)), max_rows or None)
    _emit(args, result, [[e["layer"], e["rows_checked"], e["outputs"], e["mismatches"]] for e in result["layers"]],
          ["layer", "rows", "outputs", "mismatches"])
    if not result["ok"]:
        bad = next(e for e in result["layers"] if e["mismatches"])
        first = bad["first"]
        _note(f"mismatch in {bad['layer']} at row {first['row']}, filter {first['filter']}: "
              f"shift={first['shift']} mult={first['mult']}")
        return 1
    return 0


def _sim_inputs(args, st: Settings) -> tuple[list[LayerSpec], list[dict]]:
    if args.model and args.preset:
        raise UsageError("give --model or --preset, not both")
    if args.model:
        model = load_model(args.model)
        return model.layers, model.cpu_layers
    name = args.preset or st.get("preset")
    if not name:
        raise UsageError("give --model FILE or --preset NAME")
    layers, cpu = preset_layers(name)
    return [LayerSpec(**d) for d in layers], cpu


def _accel(args, st: Settings) -> AccelConfig:
    base = dict(st.config.get("accel", {}))
    accel_file = st.get("accel")
    if accel_file:
        with open(accel_file, "rb") as fh:
            data = tomllib.load(fh)
        base.update(data.get("accel", data))
    for key in ("board", "design"):
        value = st.get(key)
        if value is not None:
            base["preset" if key == "board" else "design"] = value
    cfg = AccelConfig.from_dict(base)
    overrides = {}
    for flag, field_name in (("lwgt", "lwgt_bytes_per_unit"), ("gact", "gact_bytes"), ("lact", "lact_bytes")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = parse_size(value)
    for flag in ("gemm_units", "weight_bits"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    for flag in ("weight_copy_opt", "dma_preload", "overlap_store"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return replace(cfg, **overrides) if overrides else cfg


def _report_rows(rep: SimReport) -> list[list]:
    rows = [[s, rep.stage_cycles(s), f"{rep.ms(rep.stage_cycles(s)):.3f}"] for s in
            ("prep_act", "load_act", "load_wgt", "send_act", "send_wgt", "acc", "store")]
    rows += [["T_conv+T_fc", rep.total_cycles, f"{rep.t_accel_ms:.3f}"],
             ["T_other", "", f"{rep.t_other_ms:.3f}"],
             ["total", "", f"{rep.total_ms:.3f}"],
             ["pe_utilization", "", f"{rep.pe_utilization:.4f}"]]
    return rows


def _run_sweep(args, st, layers, cpu, cfg, axis, values) -> int:
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    vals = [parse_size(v) if axis != "gemm_units" else int(v) for v in values]
    if vals != sorted(vals):
        raise UsageError("sweep values must be ascending")
    results = sweep(layers, cfg, axis, vals, cpu, threads=st.threads)
    csv_text = sweep_csv(axis, results)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.report:
        Path(args.report).write_text(json.dumps(
            {"axis": axis, "points": [{"value": v, "report": r.to_dict()} for v, r in results]}, indent=1))
    if args.json:
        _emit(args, {"axis": axis, "points": [
            {"value": v, "acc_cycles": r.acc_cycles, "t_conv_fc_ms": r.t_accel_ms, "total_ms": r.total_ms}
            for v, r in results]})
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_sim(args, st: Settings) -> int:
    layers, cpu = _sim_inputs(args, st)
    cfg = _accel(args, st)
    if args.sweep:
        axis, _, values = args.sweep.partition("=")
        if not values:
            raise UsageError("--sweep takes AXIS=V1,V2,... e.g. lwgt=128K,256K,512K")
        return _run_sweep(args, st, layers, cpu, cfg, axis.strip(), values.split(","))
    rep = simulate_model(layers, cfg, cpu)
    data = rep.to_dict()
    if args.report:
        Path(args.report).write_text(json.dumps(data, indent=1))
    if args.csv:
        Path(args.csv).write_text(_layers_csv(rep))
    _emit(args, data, _report_rows(rep), ["stage", "cycles", "ms"])
    return 0


def _layers_csv(rep: SimReport) -> str:
    import csv
    import io

    buf = io.StringIO()
    cols = ["name", "kind", "filters", "depth", "rows", "prep_act", "load_act", "load_wgt", "send_act",
            "send_wgt", "acc", "store", "weight_tiles", "act_chunks", "pe_utilization"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for lr in rep.layers:
        w.writerow([getattr(lr, c) for c in cols])
    return buf.getvalue()


def cmd_sweep(args, st: Settings) -> int:
    layers, cpu = _sim_inputs(args, st)
    return _run_sweep(args, st, layers, cpu, _accel(args, st), args.axis, args.values.split(","))


def cmd_energy(args, st: Settings) -> int:
    sources = [s for s in (args.seconds, args.time_ms, args.report) if s is not None]
    if len(sources) != 1:
        raise UsageError("give exactly one of --seconds, --time-ms, --report")
    if args.report:
        data = json.loads(Path(args.report).read_text())
        try:
            seconds = data["totals"]["total_ms"] / 1e3
        except (KeyError, TypeError):
            raise UsageError(f"{args.report}: /totals/total_ms missing; pass a report written by `potacc sim`") from None
    elif args.time_ms is not None:
        seconds = args.time_ms / 1e3
    else:
        seconds = args.seconds
    joules = energy(seconds, args.p_inf, args.p_idle, args.images)
    data = {"seconds": seconds, "p_inference_w": args.p_inf, "p_idle_w": args.p_idle,
            "images": args.images, "joules_per_image": joules}
    _emit(args, data, [[k, v] for k, v in data.items()])
    return 0


def cmd_synth(args, st: Settings) -> int:
    scheme = _scheme(st)
    seed = int(st.get("seed", 0, int))
    if bool(args.preset) == bool(args.layers):
        raise UsageError("give exactly one of --preset NAME or --layers FILE")
    if args.layers:
        source = json.loads(Path(args.layers).read_text())
        source = source.get("layers", source) if isinstance(source, dict) else source
    else:
        source = args.preset
    model = synth_model(source, scheme, seed, granularity=st.get("granularity", "per_filter"),
                        shapes_only=args.shapes_only)
    if args.prep:
        model = prep_model(model, qkeras_c1=bool(st.get("qkeras_c1", False, _truthy)))
    blob = save_model(model, args.out)
    data = {"out": str(args.out), "blob": str(blob), "scheme": scheme.name, "seed": seed,
            "stage": model.stage, "layers": len(model.layers),
            "weights": int(sum(np.prod(l.weight_shape) for l in model.layers))}
    _emit(args, data, [[k, v] for k, v in data.items()])
    return 0


# -- parser -------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML file with option defaults")
    return p


def _sim_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("model")
    src.add_argument("--model", help="model manifest")
    src.add_argument("--preset", help="built-in layer list, e.g. resnet18")
    acc = p.add_argument_group("accelerator")
    acc.add_argument("--accel", help="accelerator TOML file")
    acc.add_argument("--board", help=f"board preset: {', '.join(BOARDS)}")
    acc.add_argument("--design", help=f"design preset: {', '.join(DESIGNS)}")
    acc.add_argument("--lwgt", help="LWGT bytes per unit, e.g. 256K")
    acc.add_argument("--gact", help="GACT bytes, e.g. 128K")
    acc.add_argument("--lact", help="LACT bytes per unit")
    acc.add_argument("--gemm-units", type=int)
    acc.add_argument("--weight-bits", type=int)
    for flag in ("weight-copy-opt", "dma-preload", "overlap-store"):
        acc.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write CSV plot data here")
    p.add_argument("--threads", type=int, help="sweep worker threads (env POTACC_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="potacc", description="Power-of-two weight quantization toolkit.", parents=[common])
    parser.add_argument("--version", action="version", version=f"potacc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("levels", cmd_levels, "print the level table of a scheme")
    p.add_argument("--scheme")

    p = add("quantize", cmd_quantize, "int8-quantize a float weight array (.npy)")
    p.add_argument("--weights", required=True)
    p.add_argument("--granularity", choices=("per_filter", "per_layer"))
    p.add_argument("--out", required=True)

    p = add("prep", cmd_prep, "scale-correct, encode and pack an int8-stage model")
    p.add_argument("--model", "--in", dest="model", required=True)
    p.add_argument("--scheme", help="fail unless the model uses this scheme")
    p.add_argument("--out", required=True)
    p.add_argument("--qkeras-c1", action="store_true", default=None, help="QKeras: keep C = 1")

    p = add("pe-check", cmd_pe_check, "exhaustive shift-PE check against integer products")
    p.add_argument("--scheme")
    p.add_argument("--vectors", type=int, default=1000, help="random 64-lane dot products")
    p.add_argument("--seed", type=int)

    p = add("run", cmd_run, "run a model end to end on one input")
    p.add_argument("--model", required=True)
    p.add_argument("--engine", choices=("mult", "shift"))
    p.add_argument("--input")
    p.add_argument("--random-input", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("verify", cmd_verify, "check shift engine == multiply engine on every PoT layer")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-rows", type=int, help="rows sampled per layer (0 = all)")

    p = add("sim", cmd_sim, "simulate accelerator latency")
    _sim_flags(p)
    p.add_argument("--sweep", help="AXIS=V1,V2,... with AXIS in lwgt, gact, gemm_units")

    p = add("sweep", cmd_sweep, "sweep one accelerator parameter")
    _sim_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated, ascending")

    p = add("energy", cmd_energy, "energy per image from power and time")
    p.add_argument("--p-inf", type=float, required=True, help="power during inference (W)")
    p.add_argument("--p-idle", type=float, required=True, help="idle power (W)")
    p.add_argument("--seconds", type=float)
    p.add_argument("--time-ms", type=float)
    p.add_argument("--report", help="sim report JSON; uses its total time")
    p.add_argument("--images", type=int, default=1)

    p = add("synth", cmd_synth, "generate a synthetic PoT model")
    p.add_argument("--preset")
    p.add_argument("--layers", help="JSON list of layer dicts")
    p.add_argument("--scheme")
    p.add_argument("--seed", type=int)
    p.add_argument("--granularity", choices=("per_filter", "per_layer"))
    p.add_argument("--shapes-only", action="store_true", help="no weights; enough for sim")
    p.add_argument("--prep", action="store_true", help="also run weight preprocessing")
    p.add_argument("--qkeras-c1", action="store_true", default=None)
    p.add_argument("--out", required=True)
    return parser


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _note(f"error: {exc}")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.json = getattr(args, "json", False)
    try:
        return args.func(args, Settings(args))
    except (PotaccError, OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        _note(f"error: {exc}")
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
